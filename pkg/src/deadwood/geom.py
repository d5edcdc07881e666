"""Axis-aligned box and binary-mask geometry.

Boxes are (x, y, w, h) in pixels with a top-left origin, the same
convention COCO uses, so values round-trip through annotation files
without conversion. All functions here are pure; nothing mutates its
inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

AnchorLabel = Literal["positive", "negative", "ignore"]

DEFAULT_POS_IOU = 0.7
DEFAULT_NEG_IOU = 0.3


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: x/y are the left/top edge, w/h the extent."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError(f"box fields must be finite, got {self}")
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box width/height must be non-negative, got {self.w}x{self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class BoxDelta:
    """Box offsets relative to an anchor: tx/ty normalized by anchor size, tw/th in log space."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.tx, self.ty, self.tw, self.th)):
            raise ValueError(f"delta components must be finite, got {self}")


@dataclass(frozen=True)
class Anchor:
    """A pre-defined candidate box on a feature-pyramid level."""

    box: BBox
    level: int = 0
    objectness: Optional[float] = None

    def __post_init__(self) -> None:
        if self.level < 0:
            raise ValueError(f"anchor level must be >= 0, got {self.level}")
        if self.objectness is not None and not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness must lie in [0,1], got {self.objectness}")


@dataclass(eq=False)
class InstanceMask:
    """Binary mask over a (height, width) pixel grid, row-major."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        self.data = arr.astype(bool, copy=False)

    @classmethod
    def zeros(cls, width: int, height: int) -> "InstanceMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def area(self) -> int:
        """Number of set cells."""
        return int(np.count_nonzero(self.data))

    def tight_bbox(self) -> Optional[BBox]:
        """Smallest box covering all set cells, or None for an empty mask."""
        rows = np.flatnonzero(self.data.any(axis=1))
        if rows.size == 0:
            return None
        cols = np.flatnonzero(self.data.any(axis=0))
        return BBox(
            x=float(cols[0]),
            y=float(rows[0]),
            w=float(cols[-1] - cols[0] + 1),
            h=float(rows[-1] - rows[0] + 1),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InstanceMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class AnchorAssignment:
    anchor_index: int
    label: AnchorLabel
    gt_index: Optional[int]


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area; 0.0 when the union is empty."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    """IoU of two same-size masks; 0.0 when both are empty."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mask shapes differ: {a.data.shape} vs {b.data.shape}")
    inter = int(np.count_nonzero(a.data & b.data))
    union = int(np.count_nonzero(a.data | b.data))
    if union == 0:
        return 0.0
    return inter / union


def encode_delta(gt: BBox, anchor: BBox) -> BoxDelta:
    """Express a ground-truth box relative to an anchor.

    tx = (x - x_a) / w_a, ty = (y - y_a) / h_a, tw = log(w / w_a),
    th = log(h / h_a). Both boxes need positive width and height.
    """
    if anchor.w <= 0 or anchor.h <= 0:
        raise ValueError(f"anchor must have positive dimensions, got {anchor.w}x{anchor.h}")
    if gt.w <= 0 or gt.h <= 0:
        raise ValueError(f"ground-truth box must have positive dimensions, got {gt.w}x{gt.h}")
    return BoxDelta(
        tx=(gt.x - anchor.x) / anchor.w,
        ty=(gt.y - anchor.y) / anchor.h,
        tw=math.log(gt.w / anchor.w),
        th=math.log(gt.h / anchor.h),
    )


def decode_delta(delta: BoxDelta, anchor: BBox) -> BBox:
    """Inverse of :func:`encode_delta`: apply a delta to an anchor."""
    if anchor.w <= 0 or anchor.h <= 0:
        raise ValueError(f"anchor must have positive dimensions, got {anchor.w}x{anchor.h}")
    return BBox(
        x=delta.tx * anchor.w + anchor.x,
        y=delta.ty * anchor.h + anchor.y,
        w=math.exp(delta.tw) * anchor.w,
        h=math.exp(delta.th) * anchor.h,
    )


def assign_anchors(
    anchors: Sequence[Anchor],
    gts: Sequence[BBox],
    pos_thresh: float = DEFAULT_POS_IOU,
    neg_thresh: float = DEFAULT_NEG_IOU,
) -> list[AnchorAssignment]:
    """Label anchors positive/negative/ignore against ground-truth boxes.

    An anchor is positive when its best IoU over all gts reaches
    ``pos_thresh`` (matched to the argmax gt, ties to the lower gt
    index), negative when the best IoU falls below ``neg_thresh``, and
    ignore in between. Additionally, every gt that no anchor reaches at
    ``pos_thresh`` promotes its own best-IoU anchor to positive (ties
    to the lower anchor index), provided that IoU is non-zero; a
    promoted anchor that is already positive keeps its original match.
    """
    if not 0.0 <= neg_thresh <= pos_thresh <= 1.0:
        raise ValueError(f"need 0 <= neg_thresh <= pos_thresh <= 1, got {neg_thresh}, {pos_thresh}")
    if not anchors:
        return []
    if not gts:
        return [AnchorAssignment(i, "negative", None) for i in range(len(anchors))]

    table = [[iou(a.box, g) for g in gts] for a in anchors]

    labels: list[AnchorLabel] = []
    matches: list[Optional[int]] = []
    for row in table:
        best = max(row)
        if best >= pos_thresh:
            labels.append("positive")
            matches.append(row.index(best))
        elif best < neg_thresh:
            labels.append("negative")
            matches.append(None)
        else:
            labels.append("ignore")
            matches.append(None)

    for j in range(len(gts)):
        col = [table[i][j] for i in range(len(anchors))]
        if max(col) >= pos_thresh:
            continue
        best = max(col)
        if best <= 0.0:
            continue
        i = col.index(best)
        if labels[i] != "positive":
            labels[i] = "positive"
            matches[i] = j

    return [AnchorAssignment(i, labels[i], matches[i]) for i in range(len(anchors))]


def nms(dets: Sequence[tuple[BBox, float]], iou_thresh: float) -> list[int]:
    """Greedy non-max suppression; returns kept indices in descending score order.

    The highest-scoring remaining box is kept and every remaining box
    overlapping it with IoU strictly above ``iou_thresh`` is discarded;
    an exact duplicate of a kept box is always discarded, so a
    threshold of 1.0 removes only duplicates. Score ties break toward
    the lower original index.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in [0,1], got {iou_thresh}")
    for _, score in dets:
        if not math.isfinite(score):
            raise ValueError(f"scores must be finite, got {score}")

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], i))
    kept: list[int] = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        box_i = dets[i][0]
        for j in order:
            if suppressed[j] or j == i:
                continue
            box_j = dets[j][0]
            if box_j == box_i or iou(box_i, box_j) > iou_thresh:
                suppressed[j] = True
    return kept


def generate_anchors(
    image_w: int,
    image_h: int,
    stride: int,
    scales: Sequence[float] = (32.0, 64.0, 128.0),
    ratios: Sequence[float] = (0.5, 1.0, 2.0),
    level: int = 0,
) -> list[Anchor]:
    """Lay a grid of fixed-size anchors over an image.

    One anchor per (cell, scale, ratio) combination, centred on the
    cell. ``scale`` is the square-root of the anchor area and ``ratio``
    is height over width. Scales and ratios are configurable because
    they are deployment choices, not properties of the geometry.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    anchors = []
    for row in range(math.ceil(image_h / stride)):
        cy = (row + 0.5) * stride
        for col in range(math.ceil(image_w / stride)):
            cx = (col + 0.5) * stride
            for scale in scales:
                for ratio in ratios:
                    h = scale * math.sqrt(ratio)
                    w = scale / math.sqrt(ratio)
                    anchors.append(Anchor(BBox(cx - w / 2, cy - h / 2, w, h), level=level))
    return anchors
