"""COCO-format annotation files: model, validation, canonical serialization.

Masks are the source of truth. Segmentations default to uncompressed
run-length counts (column-major, starting with the zero run); polygons
are supported on both read and write and can be derived from a mask on
request. Serialization is canonical: fixed key order, arrays sorted by
id, shortest round-trip float representation, so identical datasets
always produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .geom import BBox, InstanceMask

Segmentation = Union[dict, list]


class CocoError(ValueError):
    """Malformed or inconsistent COCO data; the message names the offending id."""


@dataclass
class CocoCategory:
    id: int
    name: str


@dataclass
class CocoImage:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class CocoAnnotation:
    id: int
    image_id: int
    category_id: int
    bbox: BBox
    area: float
    segmentation: Segmentation
    iscrowd: int = 0


@dataclass
class CocoDataset:
    images: list[CocoImage] = field(default_factory=list)
    annotations: list[CocoAnnotation] = field(default_factory=list)
    categories: list[CocoCategory] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Run-length encoding (uncompressed COCO counts)
# ---------------------------------------------------------------------------

def mask_to_rle(mask: InstanceMask) -> list[int]:
    """Column-major run lengths, first run counting zeros (may be 0)."""
    flat = mask.data.ravel(order="F")
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return counts


def rle_to_mask(counts: Sequence[int], width: int, height: int) -> InstanceMask:
    """Inverse of :func:`mask_to_rle`."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise CocoError(f"negative run length in counts: {counts}")
    total = sum(counts)
    if total != width * height:
        raise CocoError(f"run lengths sum to {total}, expected {width}x{height}={width * height}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return InstanceMask(flat.reshape((height, width), order="F"))


def _rle_area(counts: Sequence[int]) -> int:
    return int(sum(counts[1::2]))


def _rle_tight_bbox(counts: Sequence[int], width: int, height: int) -> Optional[BBox]:
    """Tight bbox straight from the runs, without materializing the mask."""
    minx, maxx = width, -1
    miny, maxy = height, -1
    pos = 0
    for k, c in enumerate(counts):
        if c and k % 2 == 1:
            last = pos + c - 1
            col_lo, col_hi = pos // height, last // height
            minx = min(minx, col_lo)
            maxx = max(maxx, col_hi)
            if col_hi > col_lo:
                # The run wraps a column boundary, touching both row extremes.
                miny, maxy = 0, height - 1
            else:
                miny = min(miny, pos % height)
                maxy = max(maxy, last % height)
        pos += c
    if maxx < 0:
        return None
    return BBox(float(minx), float(miny), float(maxx - minx + 1), float(maxy - miny + 1))


# ---------------------------------------------------------------------------
# Polygons
# ---------------------------------------------------------------------------

# Tie-break order for boundary following at pixel-corner junctions:
# prefer the sharpest clockwise turn so diagonally-touching regions
# come out as separate loops.
_TURNS = {
    (1, 0): [(0, 1), (1, 0), (0, -1)],
    (0, 1): [(-1, 0), (0, 1), (1, 0)],
    (-1, 0): [(0, -1), (-1, 0), (0, 1)],
    (0, -1): [(1, 0), (0, -1), (-1, 0)],
}


def mask_to_polygons(mask: InstanceMask) -> list[list[float]]:
    """Trace region boundaries into COCO flat polygons ([x1,y1,x2,y2,...]).

    Vertices sit on pixel corners, so the shoelace area of the loops
    equals the pixel count of the traced regions. Interior holes cannot
    be represented by COCO polygons and are dropped (filled).
    """
    data = mask.data
    edges: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def add(a: tuple[int, int], b: tuple[int, int]) -> None:
        edges.setdefault(a, []).append(b)

    set_rows, set_cols = np.nonzero(data)
    h, w = data.shape
    for r, c in zip(set_rows.tolist(), set_cols.tolist()):
        if r == 0 or not data[r - 1, c]:
            add((c, r), (c + 1, r))
        if c == w - 1 or not data[r, c + 1]:
            add((c + 1, r), (c + 1, r + 1))
        if r == h - 1 or not data[r + 1, c]:
            add((c + 1, r + 1), (c, r + 1))
        if c == 0 or not data[r, c - 1]:
            add((c, r + 1), (c, r))

    loops: list[list[tuple[int, int]]] = []
    while edges:
        start = min(edges)
        prev = start
        cur = edges[start][0]
        _pop_edge(edges, start, cur)
        loop = [start, cur]
        while cur != start:
            nxt = _next_vertex(edges, prev, cur)
            _pop_edge(edges, cur, nxt)
            loop.append(nxt)
            prev, cur = cur, nxt
        loops.append(_simplify_collinear(loop[:-1]))

    polys = []
    for loop in loops:
        if _signed_area(loop) <= 0:
            continue  # hole
        flat: list[float] = []
        for x, y in loop:
            flat.extend((float(x), float(y)))
        polys.append(flat)
    return polys


def _pop_edge(edges: dict, a: tuple[int, int], b: tuple[int, int]) -> None:
    outs = edges[a]
    outs.remove(b)
    if not outs:
        del edges[a]


def _next_vertex(edges: dict, prev: tuple[int, int], cur: tuple[int, int]) -> tuple[int, int]:
    outs = edges.get(cur)
    if not outs:
        raise RuntimeError(f"open boundary at vertex {cur}")
    if len(outs) == 1:
        return outs[0]
    direction = (cur[0] - prev[0], cur[1] - prev[1])
    for dx, dy in _TURNS[direction]:
        cand = (cur[0] + dx, cur[1] + dy)
        if cand in outs:
            return cand
    return outs[0]


def _simplify_collinear(loop: list[tuple[int, int]]) -> list[tuple[int, int]]:
    out = []
    n = len(loop)
    for i in range(n):
        a, b, c = loop[i - 1], loop[i], loop[(i + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) != (b[1] - a[1]) * (c[0] - b[0]):
            out.append(b)
    return out


def _signed_area(loop: Sequence[tuple[float, float]]) -> float:
    total = 0.0
    n = len(loop)
    for i in range(n):
        x1, y1 = loop[i]
        x2, y2 = loop[(i + 1) % n]
        total += x1 * y2 - x2 * y1
    # With y growing downward the tracer's outer loops are clockwise on
    # screen, which makes this plain shoelace sum positive; holes negative.
    return total / 2.0


def polygon_area(polys: Sequence[Sequence[float]]) -> float:
    """Total shoelace area of COCO flat polygons."""
    total = 0.0
    for poly in polys:
        pts = [(poly[i], poly[i + 1]) for i in range(0, len(poly), 2)]
        total += abs(_signed_area(pts))
    return total


def polygons_to_mask(polys: Sequence[Sequence[float]], width: int, height: int) -> InstanceMask:
    """Rasterize flat polygons by even-odd filling at pixel centers."""
    data = np.zeros((height, width), dtype=bool)
    for poly in polys:
        pts = np.asarray(poly, dtype=float).reshape(-1, 2)
        xs, ys = pts[:, 0], pts[:, 1]
        xs2, ys2 = np.roll(xs, -1), np.roll(ys, -1)
        for r in range(height):
            cy = r + 0.5
            crossing = (ys <= cy) != (ys2 <= cy)
            if not crossing.any():
                continue
            t = (cy - ys[crossing]) / (ys2[crossing] - ys[crossing])
            xi = np.sort(xs[crossing] + t * (xs2[crossing] - xs[crossing]))
            for k in range(0, len(xi) - 1, 2):
                c0 = int(np.ceil(xi[k] - 0.5))
                c1 = int(np.ceil(xi[k + 1] - 0.5))  # centers in [xi_k, xi_k+1)
                if c1 > c0:
                    data[r, max(c0, 0):min(c1, width)] = True
    return InstanceMask(data)


def segmentation_to_mask(seg: Segmentation, width: int, height: int) -> InstanceMask:
    """Decode either segmentation form to a full-image mask."""
    if isinstance(seg, dict):
        counts = seg.get("counts")
        size = seg.get("size")
        if counts is None or size is None:
            raise CocoError(f"RLE segmentation needs 'size' and 'counts', got keys {sorted(seg)}")
        if list(size) != [height, width]:
            raise CocoError(f"RLE size {size} does not match image size [{height}, {width}]")
        return rle_to_mask(counts, width, height)
    if isinstance(seg, list):
        return polygons_to_mask(seg, width, height)
    raise CocoError(f"unsupported segmentation type {type(seg).__name__}")


def annotation_from_mask(
    ann_id: int,
    image_id: int,
    category_id: int,
    mask: InstanceMask,
    iscrowd: int = 0,
) -> CocoAnnotation:
    """Build an RLE annotation whose bbox/area are derived from the mask."""
    bbox = mask.tight_bbox()
    if bbox is None:
        raise CocoError(f"annotation {ann_id}: mask is empty")
    seg = {"size": [mask.height, mask.width], "counts": mask_to_rle(mask)}
    return CocoAnnotation(
        id=ann_id,
        image_id=image_id,
        category_id=category_id,
        bbox=bbox,
        area=float(mask.area),
        segmentation=seg,
        iscrowd=iscrowd,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate(ds: CocoDataset) -> None:
    """Raise :class:`CocoError` on the first violated dataset invariant."""
    images: dict[int, CocoImage] = {}
    for img in ds.images:
        if img.id in images:
            raise CocoError(f"duplicate image id {img.id}")
        if img.id < 1:
            raise CocoError(f"image id {img.id} is not a positive integer")
        if img.width <= 0 or img.height <= 0:
            raise CocoError(f"image {img.id}: non-positive size {img.width}x{img.height}")
        images[img.id] = img

    cat_ids = set()
    for cat in ds.categories:
        if cat.id in cat_ids:
            raise CocoError(f"duplicate category id {cat.id}")
        if cat.id < 1:
            raise CocoError(f"category id {cat.id} is not a positive integer")
        cat_ids.add(cat.id)

    ann_ids = set()
    for ann in ds.annotations:
        if ann.id in ann_ids:
            raise CocoError(f"duplicate annotation id {ann.id}")
        if ann.id < 1:
            raise CocoError(f"annotation id {ann.id} is not a positive integer")
        ann_ids.add(ann.id)
        if ann.image_id not in images:
            raise CocoError(f"annotation {ann.id} references missing image id {ann.image_id}")
        if ann.category_id not in cat_ids:
            raise CocoError(f"annotation {ann.id} references missing category id {ann.category_id}")
        if ann.iscrowd not in (0, 1):
            raise CocoError(f"annotation {ann.id}: iscrowd must be 0 or 1, got {ann.iscrowd}")
        img = images[ann.image_id]
        _check_segmentation(ann, img)


def _check_segmentation(ann: CocoAnnotation, img: CocoImage) -> None:
    seg = ann.segmentation
    if isinstance(seg, dict):
        counts = seg.get("counts")
        size = seg.get("size")
        if counts is None or size is None:
            raise CocoError(f"annotation {ann.id}: RLE needs 'size' and 'counts'")
        if list(size) != [img.height, img.width]:
            raise CocoError(
                f"annotation {ann.id}: RLE size {size} does not match image "
                f"{img.id} size [{img.height}, {img.width}]"
            )
        total = sum(counts)
        if total != img.width * img.height:
            raise CocoError(
                f"annotation {ann.id}: run lengths sum to {total}, "
                f"expected {img.width * img.height}"
            )
        pixel_area = _rle_area(counts)
        if abs(ann.area - pixel_area) > 0.5:
            raise CocoError(
                f"annotation {ann.id}: area {ann.area} does not equal mask pixel count {pixel_area}"
            )
        tight = _rle_tight_bbox(counts, img.width, img.height)
        if tight is None:
            raise CocoError(f"annotation {ann.id}: segmentation is empty")
    elif isinstance(seg, list):
        if not seg:
            raise CocoError(f"annotation {ann.id}: segmentation is empty")
        for poly in seg:
            if not isinstance(poly, list) or len(poly) < 6 or len(poly) % 2:
                raise CocoError(
                    f"annotation {ann.id}: polygon must be a flat even-length "
                    f"list of at least 3 points"
                )
        poly_area = polygon_area(seg)
        if abs(ann.area - poly_area) > 0.02 * max(poly_area, 1e-9):
            raise CocoError(
                f"annotation {ann.id}: area {ann.area} deviates more than 2% "
                f"from polygon area {poly_area}"
            )
        xs = [v for poly in seg for v in poly[0::2]]
        ys = [v for poly in seg for v in poly[1::2]]
        tight = BBox(min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys))
    else:
        raise CocoError(f"annotation {ann.id}: unsupported segmentation type {type(seg).__name__}")

    for stored, expected, edge in (
        (ann.bbox.x, tight.x, "left"),
        (ann.bbox.y, tight.y, "top"),
        (ann.bbox.x2, tight.x2, "right"),
        (ann.bbox.y2, tight.y2, "bottom"),
    ):
        if abs(stored - expected) > 1.0:
            raise CocoError(
                f"annotation {ann.id}: bbox {edge} edge {stored} is more than "
                f"1px from the segmentation's tight box edge {expected}"
            )


# ---------------------------------------------------------------------------
# Reading and writing
# ---------------------------------------------------------------------------

def read_coco(path: Union[str, Path]) -> CocoDataset:
    """Load and fully validate a COCO annotation file."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CocoError(f"{path}: not valid JSON: {exc}") from exc

    if not isinstance(raw, dict):
        raise CocoError(f"{path}: top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        if key not in raw or not isinstance(raw[key], list):
            raise CocoError(f"{path}: missing or non-array '{key}' section")

    images = [
        CocoImage(
            id=_expect_int(obj, "id", "image"),
            file_name=_expect(obj, "file_name", str, "image"),
            width=_expect_int(obj, "width", "image"),
            height=_expect_int(obj, "height", "image"),
        )
        for obj in raw["images"]
    ]
    categories = [
        CocoCategory(
            id=_expect_int(obj, "id", "category"),
            name=_expect(obj, "name", str, "category"),
        )
        for obj in raw["categories"]
    ]
    annotations = []
    for obj in raw["annotations"]:
        ann_id = _expect_int(obj, "id", "annotation")
        bbox = obj.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise CocoError(f"annotation {ann_id}: bbox must be [x, y, w, h]")
        if "segmentation" not in obj:
            raise CocoError(f"annotation {ann_id}: missing segmentation")
        try:
            box = BBox(*(float(v) for v in bbox))
        except (TypeError, ValueError) as exc:
            raise CocoError(f"annotation {ann_id}: bad bbox {bbox}: {exc}") from exc
        annotations.append(
            CocoAnnotation(
                id=ann_id,
                image_id=_expect_int(obj, "image_id", "annotation"),
                category_id=_expect_int(obj, "category_id", "annotation"),
                bbox=box,
                area=float(_expect(obj, "area", (int, float), "annotation")),
                segmentation=obj["segmentation"],
                iscrowd=int(obj.get("iscrowd", 0)),
            )
        )

    ds = CocoDataset(images=images, annotations=annotations, categories=categories)
    validate(ds)
    return ds


def _expect(obj, key: str, types, kind: str):
    ident = obj.get("id", "?") if isinstance(obj, dict) else "?"
    if not isinstance(obj, dict) or key not in obj:
        raise CocoError(f"{kind} {ident}: missing '{key}'")
    value = obj[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise CocoError(f"{kind} {ident}: field '{key}' has wrong type {type(value).__name__}")
    return value


def _expect_int(obj: dict, key: str, kind: str) -> int:
    return int(_expect(obj, key, int, kind))


def write_coco(ds: CocoDataset, path: Union[str, Path]) -> None:
    """Write a dataset in canonical form (validates first).

    Canonical means: fixed key order, sections sorted by id, 2-space
    indentation, UTF-8, trailing newline. Equal datasets always yield
    byte-identical files.
    """
    validate(ds)
    doc = {
        "images": [
            {"id": img.id, "file_name": img.file_name, "width": img.width, "height": img.height}
            for img in sorted(ds.images, key=lambda i: i.id)
        ],
        "annotations": [
            {
                "id": ann.id,
                "image_id": ann.image_id,
                "category_id": ann.category_id,
                "bbox": [float(ann.bbox.x), float(ann.bbox.y), float(ann.bbox.w), float(ann.bbox.h)],
                "area": float(ann.area),
                "segmentation": _canonical_segmentation(ann.segmentation),
                "iscrowd": int(ann.iscrowd),
            }
            for ann in sorted(ds.annotations, key=lambda a: a.id)
        ],
        "categories": [
            {"id": cat.id, "name": cat.name}
            for cat in sorted(ds.categories, key=lambda c: c.id)
        ],
    }
    text = json.dumps(doc, indent=2, ensure_ascii=False) + "\n"
    Path(path).write_bytes(text.encode("utf-8"))


def _canonical_segmentation(seg: Segmentation) -> Segmentation:
    if isinstance(seg, dict):
        return {"size": [int(v) for v in seg["size"]], "counts": [int(c) for c in seg["counts"]]}
    return [[float(v) for v in poly] for poly in seg]
