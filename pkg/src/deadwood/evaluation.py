"""Detection-vs-ground-truth matching and the evaluation metric battery.

Matching is greedy in descending score order with single-use ground
truths (ties broken toward the lower detection index), average
precision uses 101-point recall interpolation, and the summary report
carries AP at fixed IoU thresholds, the IoU-averaged AP, per-image mean
precision/recall/F1 with 0.05-wide histograms, pooled counterparts, and
per-category detection counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .coco_io import CocoDataset, CocoError, segmentation_to_mask
from .geom import BBox, InstanceMask, iou, mask_iou

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
HIST_BIN_EDGES = [round(0.05 * i, 2) for i in range(21)]


@dataclass
class Detection:
    image_id: int
    category_id: int
    box: BBox
    score: float
    mask: Optional[InstanceMask] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0,1], got {self.score}")


@dataclass
class GroundTruth:
    id: int
    image_id: int
    category_id: int
    box: BBox
    mask: Optional[InstanceMask] = None
    iscrowd: int = 0


@dataclass(frozen=True)
class DetMatch:
    """Outcome for one detection, in original detection order."""

    det_index: int
    score: float
    is_tp: bool
    gt_id: Optional[int]
    iou: float


@dataclass
class MatchResult:
    det_matches: list[DetMatch]
    matched_gt_ids: set[int]
    n_gts: int  # non-crowd ground truths eligible for matching

    @property
    def n_tp(self) -> int:
        return sum(1 for d in self.det_matches if d.is_tp)

    @property
    def n_fp(self) -> int:
        return sum(1 for d in self.det_matches if not d.is_tp)

    @property
    def n_fn(self) -> int:
        return self.n_gts - self.n_tp


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class PRCurve:
    """One point per distinct score threshold; empty when there are no gts."""

    points: list[PRPoint]
    n_gts: int


@dataclass
class PrfSummary:
    m_precision: float
    m_recall: float
    m_f1: float
    pooled_precision: float
    pooled_recall: float
    pooled_f1: float
    histograms: dict[str, list[int]]
    n_images_evaluated: int
    n_images_skipped: int


@dataclass
class ApSummary:
    ap50: float
    ap75: float
    mean_ap: float
    ap_by_threshold: dict[float, float]


@dataclass
class EvalReport:
    ap50: float
    ap75: float
    mean_ap: float
    ap_by_threshold: dict[float, float]
    m_precision: float
    m_recall: float
    m_f1: float
    pooled_precision: float
    pooled_recall: float
    pooled_f1: float
    category_counts: dict[int, int]
    histograms: dict[str, list[int]]
    n_images: int
    n_images_evaluated: int
    n_images_skipped: int
    n_gts: int
    n_dets: int
    matching_iou: float = 0.5
    used_masks: bool = False

    def to_dict(self) -> dict:
        return {
            "ap50": self.ap50,
            "ap75": self.ap75,
            "mean_ap": self.mean_ap,
            "ap_by_threshold": {f"{t:.2f}": v for t, v in sorted(self.ap_by_threshold.items())},
            "m_precision": self.m_precision,
            "m_recall": self.m_recall,
            "m_f1": self.m_f1,
            "pooled_precision": self.pooled_precision,
            "pooled_recall": self.pooled_recall,
            "pooled_f1": self.pooled_f1,
            "category_counts": {str(k): v for k, v in sorted(self.category_counts.items())},
            "histograms": {k: list(v) for k, v in sorted(self.histograms.items())},
            "histogram_bin_edges": HIST_BIN_EDGES,
            "n_images": self.n_images,
            "n_images_evaluated": self.n_images_evaluated,
            "n_images_skipped": self.n_images_skipped,
            "n_gts": self.n_gts,
            "n_dets": self.n_dets,
            "matching_iou": self.matching_iou,
            "used_masks": self.used_masks,
        }


def _pair_iou(det: Detection, gt: GroundTruth, use_masks: bool) -> float:
    if not use_masks:
        return iou(det.box, gt.box)
    if det.mask is None or gt.mask is None:
        raise ValueError("mask matching requested but a detection or gt has no mask")
    return mask_iou(det.mask, gt.mask)


def match(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_thresh: float,
    use_masks: bool = False,
) -> MatchResult:
    """Greedily match detections to ground truths of the same image and category.

    Detections are visited in descending score order (ties toward the
    lower index); each takes its best-IoU still-unmatched gt if that
    IoU reaches ``iou_thresh``, and is a false positive otherwise.
    Crowd ground truths are never matched and are not counted.
    """
    eligible = [g for g in gts if g.iscrowd == 0]
    by_key: dict[tuple[int, int], list[int]] = {}
    for j, gt in enumerate(eligible):
        by_key.setdefault((gt.image_id, gt.category_id), []).append(j)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken: set[int] = set()
    outcomes: dict[int, DetMatch] = {}
    for i in order:
        det = dets[i]
        best_iou, best_j = 0.0, None
        for j in by_key.get((det.image_id, det.category_id), ()):
            if j in taken:
                continue
            value = _pair_iou(det, eligible[j], use_masks)
            if value > best_iou:
                best_iou, best_j = value, j
        if best_j is not None and best_iou >= iou_thresh:
            taken.add(best_j)
            outcomes[i] = DetMatch(i, det.score, True, eligible[best_j].id, best_iou)
        else:
            outcomes[i] = DetMatch(i, det.score, False, None, best_iou)
    det_matches = [outcomes[i] for i in range(len(dets))]
    return MatchResult(
        det_matches=det_matches,
        matched_gt_ids={d.gt_id for d in det_matches if d.gt_id is not None},
        n_gts=len(eligible),
    )


def pr_curve(result: MatchResult) -> PRCurve:
    """Precision/recall at every distinct score threshold.

    With zero ground truths recall is undefined, reported as an
    explicit empty curve (``n_gts == 0``) rather than NaNs.
    """
    if result.n_gts == 0:
        return PRCurve(points=[], n_gts=0)
    ordered = sorted(result.det_matches, key=lambda d: (-d.score, d.det_index))
    points: list[PRPoint] = []
    tp = fp = 0
    for idx, d in enumerate(ordered):
        if d.is_tp:
            tp += 1
        else:
            fp += 1
        last_of_score = idx + 1 == len(ordered) or ordered[idx + 1].score != d.score
        if last_of_score:
            points.append(PRPoint(
                threshold=d.score,
                precision=tp / (tp + fp),
                recall=tp / result.n_gts,
            ))
    return PRCurve(points=points, n_gts=result.n_gts)


def average_precision_101(curve: PRCurve) -> float:
    """Mean of max-precision-at-recall>=r over the 101 recall grid points."""
    if not curve.points:
        return 0.0
    recalls = np.array([p.recall for p in curve.points])
    precisions = np.array([p.precision for p in curve.points])
    order = np.argsort(recalls, kind="stable")
    recalls = recalls[order]
    # Max precision over all curve points whose recall is >= each point's.
    suffix_max = np.maximum.accumulate(precisions[order][::-1])[::-1]
    total = 0.0
    for k in range(101):
        r = k / 100.0
        idx = np.searchsorted(recalls, r, side="left")
        if idx < len(recalls):
            total += float(suffix_max[idx])
    return total / 101.0


def coco_map(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    use_masks: bool = False,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
) -> ApSummary:
    """AP at each IoU threshold (category-averaged) plus their mean.

    Categories are those present in the ground truth; a category
    without detections scores 0.
    """
    categories = sorted({g.category_id for g in gts if g.iscrowd == 0})
    if not categories:
        raise ValueError("cannot evaluate AP without any ground truths")
    dets_by_cat = {c: [d for d in dets if d.category_id == c] for c in categories}
    gts_by_cat = {c: [g for g in gts if g.category_id == c] for c in categories}
    ap_by_threshold: dict[float, float] = {}
    for t in iou_thresholds:
        aps = []
        for cat in categories:
            curve = pr_curve(match(dets_by_cat[cat], gts_by_cat[cat], t, use_masks))
            aps.append(average_precision_101(curve))
        ap_by_threshold[round(t, 2)] = float(np.mean(aps))
    mean_ap = float(np.mean(list(ap_by_threshold.values())))
    return ApSummary(
        ap50=ap_by_threshold.get(0.5, 0.0),
        ap75=ap_by_threshold.get(0.75, 0.0),
        mean_ap=mean_ap,
        ap_by_threshold=ap_by_threshold,
    )


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _histogram(values: Sequence[float]) -> list[int]:
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=np.array(HIST_BIN_EDGES))
    return [int(c) for c in counts]


def mean_prf(per_image: Mapping[int, MatchResult]) -> PrfSummary:
    """Per-image precision/recall/F1 averaged over images, plus pooled totals.

    Images without ground truths are skipped by the per-image averages
    (their false positives still enter the pooled counts) and reported
    in ``n_images_skipped``.
    """
    precisions, recalls, f1s = [], [], []
    pooled_tp = pooled_fp = pooled_gts = 0
    skipped = 0
    for _image_id, result in sorted(per_image.items()):
        pooled_tp += result.n_tp
        pooled_fp += result.n_fp
        pooled_gts += result.n_gts
        if result.n_gts == 0:
            skipped += 1
            continue
        tp, fp = result.n_tp, result.n_fp
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / result.n_gts
        precisions.append(p)
        recalls.append(r)
        f1s.append(_f1(p, r))
    n_eval = len(precisions)
    pooled_p = pooled_tp / (pooled_tp + pooled_fp) if pooled_tp + pooled_fp > 0 else 0.0
    pooled_r = pooled_tp / pooled_gts if pooled_gts > 0 else 0.0
    return PrfSummary(
        m_precision=float(np.mean(precisions)) if n_eval else 0.0,
        m_recall=float(np.mean(recalls)) if n_eval else 0.0,
        m_f1=float(np.mean(f1s)) if n_eval else 0.0,
        pooled_precision=pooled_p,
        pooled_recall=pooled_r,
        pooled_f1=_f1(pooled_p, pooled_r),
        histograms={
            "precision": _histogram(precisions),
            "recall": _histogram(recalls),
            "f1": _histogram(f1s),
        },
        n_images_evaluated=n_eval,
        n_images_skipped=skipped,
    )


def category_counts(dets: Sequence[Detection]) -> dict[int, int]:
    """Detections per category (input is assumed to be post-NMS)."""
    counts: dict[int, int] = {}
    for det in dets:
        counts[det.category_id] = counts.get(det.category_id, 0) + 1
    return dict(sorted(counts.items()))


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    matching_iou: float = 0.5,
    use_masks: bool = False,
    image_ids: Optional[Sequence[int]] = None,
) -> EvalReport:
    """Full report: AP family plus per-image PRF at ``matching_iou``.

    ``image_ids`` fixes the image universe (e.g. all images of the gt
    dataset) so images with neither gts nor detections are counted as
    skipped; it defaults to the images seen in gts or detections.
    """
    ap = coco_map(dets, gts, use_masks)
    if image_ids is None:
        ids = sorted({g.image_id for g in gts} | {d.image_id for d in dets})
    else:
        ids = sorted(set(image_ids))
    dets_by_image: dict[int, list[Detection]] = {i: [] for i in ids}
    gts_by_image: dict[int, list[GroundTruth]] = {i: [] for i in ids}
    for d in dets:
        dets_by_image.setdefault(d.image_id, []).append(d)
    for g in gts:
        gts_by_image.setdefault(g.image_id, []).append(g)
    per_image = {
        image_id: match(dets_by_image[image_id], gts_by_image[image_id],
                        matching_iou, use_masks)
        for image_id in ids
    }
    prf = mean_prf(per_image)
    return EvalReport(
        ap50=ap.ap50,
        ap75=ap.ap75,
        mean_ap=ap.mean_ap,
        ap_by_threshold=ap.ap_by_threshold,
        m_precision=prf.m_precision,
        m_recall=prf.m_recall,
        m_f1=prf.m_f1,
        pooled_precision=prf.pooled_precision,
        pooled_recall=prf.pooled_recall,
        pooled_f1=prf.pooled_f1,
        category_counts=category_counts(dets),
        histograms=prf.histograms,
        n_images=len(ids),
        n_images_evaluated=prf.n_images_evaluated,
        n_images_skipped=prf.n_images_skipped,
        n_gts=sum(1 for g in gts if g.iscrowd == 0),
        n_dets=len(dets),
        matching_iou=matching_iou,
        used_masks=use_masks,
    )


# ---------------------------------------------------------------------------
# Wire formats
# ---------------------------------------------------------------------------

def ground_truths_from_coco(ds: CocoDataset, decode_masks: bool = False) -> list[GroundTruth]:
    """Convert dataset annotations; masks decoded only when asked for."""
    sizes = {img.id: (img.width, img.height) for img in ds.images}
    gts = []
    for ann in ds.annotations:
        mask = None
        if decode_masks:
            w, h = sizes[ann.image_id]
            mask = segmentation_to_mask(ann.segmentation, w, h)
        gts.append(GroundTruth(
            id=ann.id,
            image_id=ann.image_id,
            category_id=ann.category_id,
            box=ann.bbox,
            mask=mask,
            iscrowd=ann.iscrowd,
        ))
    return gts


def read_detections(
    path: Union[str, Path],
    image_sizes: Optional[Mapping[int, tuple[int, int]]] = None,
    decode_masks: bool = False,
) -> list[Detection]:
    """Load a COCO-results-style JSON array of detections.

    Each element: {"image_id", "category_id", "bbox": [x,y,w,h],
    "score", "segmentation"?}. ``image_sizes`` (width, height by image
    id) is required to decode polygon segmentations.
    """
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CocoError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(raw, list):
        raise CocoError(f"{path}: detections file must be a JSON array")
    dets = []
    for idx, obj in enumerate(raw):
        try:
            bbox = obj["bbox"]
            box = BBox(*(float(v) for v in bbox))
            mask = None
            if decode_masks:
                seg = obj.get("segmentation")
                if seg is None:
                    raise CocoError(f"detection {idx}: mask evaluation needs a segmentation")
                if isinstance(seg, dict):
                    h, w = seg["size"]
                elif image_sizes is not None and int(obj["image_id"]) in image_sizes:
                    w, h = image_sizes[int(obj["image_id"])]
                else:
                    raise CocoError(f"detection {idx}: cannot size polygon segmentation")
                mask = segmentation_to_mask(seg, w, h)
            dets.append(Detection(
                image_id=int(obj["image_id"]),
                category_id=int(obj["category_id"]),
                box=box,
                score=float(obj["score"]),
                mask=mask,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CocoError):
                raise
            raise CocoError(f"detection {idx}: {exc}") from exc
    return dets


def write_report(report: EvalReport, json_path: Union[str, Path],
                 csv_path: Optional[Union[str, Path]] = None) -> None:
    """Write the JSON report, and optionally a metrics CSV plus histogram CSV.

    The histogram file sits next to the CSV with a ``.hist.csv``
    suffix: one row per (metric, bin).
    """
    doc = json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n"
    Path(json_path).write_text(doc, encoding="utf-8")
    if csv_path is None:
        return
    csv_path = Path(csv_path)
    scalar_rows = [
        ("ap50", report.ap50),
        ("ap75", report.ap75),
        ("mean_ap", report.mean_ap),
        ("m_precision", report.m_precision),
        ("m_recall", report.m_recall),
        ("m_f1", report.m_f1),
        ("pooled_precision", report.pooled_precision),
        ("pooled_recall", report.pooled_recall),
        ("pooled_f1", report.pooled_f1),
    ]
    lines = ["metric,value"]
    lines += [f"{name},{value}" for name, value in scalar_rows]
    for cat, count in sorted(report.category_counts.items()):
        lines.append(f"category_{cat}_count,{count}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    hist_lines = ["metric,bin_lo,bin_hi,count"]
    for name, counts in sorted(report.histograms.items()):
        for k, count in enumerate(counts):
            hist_lines.append(f"{name},{HIST_BIN_EDGES[k]},{HIST_BIN_EDGES[k + 1]},{count}")
    csv_path.with_suffix(".hist.csv").write_text("\n".join(hist_lines) + "\n", encoding="utf-8")
