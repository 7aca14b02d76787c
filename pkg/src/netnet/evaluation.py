"""Detection metrics and error analysis.

Matching follows the COCO convention: per image and class, detections are
visited by descending score (ties keep input order) and each claims the
unmatched ground truth of highest IoU at or above the threshold (ties go to
the earlier ground truth).  With a scale filter, ground truths of other scale
classes are "ignored": a detection matched to one is dropped, and so is an
unmatched detection whose own size falls outside the filtered class.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .boxes import Detection, GroundTruthBox, intersection, iou

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_IOUS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
ABSENT = float("nan")

# side-length fractions (sqrt of normalized box area) of each scale class
DEFAULT_SIZE_RANGES = {"small": (0.0, 0.12), "medium": (0.12, 0.35), "large": (0.35, math.inf)}


def size_class(box, size_ranges=None) -> str:
    ranges = size_ranges or DEFAULT_SIZE_RANGES
    side = math.sqrt(max(box.area, 0.0))
    for name, (lo, hi) in ranges.items():
        if lo <= side <= hi if name == "small" else lo < side <= hi:
            return name
    return "none"


def _group(items, key=lambda x: (x.image_id, x.class_id)):
    out = defaultdict(list)
    for i, it in enumerate(items):
        out[key(it)].append(i)
    return out


@dataclass
class MatchResult:
    """Per-detection outcome: 1 TP, 0 FP, -1 ignored; plus GT match flags."""

    det_status: np.ndarray
    det_gt: np.ndarray
    gt_matched: np.ndarray
    gt_ignored: np.ndarray


def match_detections(dets: list[Detection], gts: list[GroundTruthBox], iou_thresh: float = 0.5,
                     scale_filter: str | None = None, size_ranges=None) -> MatchResult:
    status = np.zeros(len(dets), dtype=np.int64)
    det_gt = np.full(len(dets), -1, dtype=np.int64)
    gt_matched = np.zeros(len(gts), dtype=bool)
    gt_ignored = np.array([scale_filter is not None and g.scale_class != scale_filter for g in gts], dtype=bool)
    gt_groups = _group(gts)
    for key, di in _group(dets).items():
        gi = gt_groups.get(key, [])
        # stable descending score order
        di = sorted(di, key=lambda i: -dets[i].score)
        for d in di:
            best, best_iou = -1, iou_thresh
            for prefer_ignored in (False, True):
                for g in gi:
                    if gt_matched[g] or gt_ignored[g] != prefer_ignored:
                        continue
                    v = iou(dets[d], gts[g])
                    if v >= best_iou and (best < 0 or v > best_iou):
                        best, best_iou = g, v
                if best >= 0:
                    break
            if best >= 0:
                gt_matched[best] = True
                det_gt[d] = best
                status[d] = -1 if gt_ignored[best] else 1
            elif scale_filter is not None and size_class(dets[d], size_ranges) != scale_filter:
                status[d] = -1
    return MatchResult(status, det_gt, gt_matched, gt_ignored)


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    iou_thresh: float
    description: str = ""
    num_gts: int = 0

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def interpolated_ap(self) -> float:
        return interpolated_ap(self.recall, self.precision) if self.num_gts else ABSENT


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP of raw curve points ordered by score cut."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(np.asarray(precision, dtype=np.float64)[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    # correctly rounded sum, so the result does not depend on summation order
    return math.fsum(q.tolist()) / len(RECALL_POINTS)


def _curve_from(dets, match: MatchResult, num_gts: int, iou_thresh: float, desc: str) -> PrCurve:
    order = sorted((i for i in range(len(dets)) if match.det_status[i] >= 0), key=lambda i: -dets[i].score)
    tp = np.cumsum([match.det_status[i] == 1 for i in order], dtype=np.float64)
    fp = np.cumsum([match.det_status[i] == 0 for i in order], dtype=np.float64)
    if num_gts == 0:
        recall = np.zeros_like(tp)
    else:
        recall = tp / num_gts
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return PrCurve(recall, precision, iou_thresh, desc, num_gts)


def pr_curve(dets: list[Detection], gts: list[GroundTruthBox], iou_thresh: float = 0.5,
             scale_filter: str | None = None, class_id: int | None = None, size_ranges=None) -> PrCurve:
    """Raw precision/recall after every score cut (classes pooled unless ``class_id``)."""
    if class_id is not None:
        dets = [d for d in dets if d.class_id == class_id]
        gts = [g for g in gts if g.class_id == class_id]
    m = match_detections(dets, gts, iou_thresh, scale_filter, size_ranges)
    npig = int((~m.gt_ignored).sum())
    desc = f"iou={iou_thresh:g} scale={scale_filter or 'all'} class={class_id if class_id is not None else 'all'}"
    return _curve_from(dets, m, npig, iou_thresh, desc)


def compute_ap(dets: list[Detection], gts: list[GroundTruthBox], iou_thresh: float = 0.5,
               scale_filter: str | None = None, size_ranges=None) -> float:
    """Mean over classes with at least one in-filter GT; NaN when there are none."""
    classes = sorted({g.class_id for g in gts if scale_filter is None or g.scale_class == scale_filter})
    if not classes:
        return ABSENT
    aps = [pr_curve(dets, gts, iou_thresh, scale_filter, c, size_ranges).interpolated_ap() for c in classes]
    return float(np.mean(aps))


def coco_ap(dets, gts, scale_filter=None, size_ranges=None) -> float:
    vals = [compute_ap(dets, gts, t, scale_filter, size_ranges) for t in COCO_IOUS]
    return ABSENT if any(math.isnan(v) for v in vals) else float(np.mean(vals))


def summarize(dets, gts, size_ranges=None) -> dict[str, float]:
    return {
        "AP": coco_ap(dets, gts, None, size_ranges),
        "AP50": compute_ap(dets, gts, 0.5, None, size_ranges),
        "AP75": compute_ap(dets, gts, 0.75, None, size_ranges),
        "AP_s": coco_ap(dets, gts, "small", size_ranges),
        "AP_m": coco_ap(dets, gts, "medium", size_ranges),
        "AP_l": coco_ap(dets, gts, "large", size_ranges),
    }


# --------------------------------------------------------------------------
# error analysis


@dataclass
class FalsePositive:
    detection: Detection
    max_iou: float
    best_gt: GroundTruthBox | None


def fp_analysis(dets: list[Detection], gts: list[GroundTruthBox], iou_thresh: float = 0.5) -> list[FalsePositive]:
    """Detections whose best IoU with a same-class GT of their image is below the threshold."""
    by_key = _group(gts)
    out = []
    for d in dets:
        cands = [gts[i] for i in by_key.get((d.image_id, d.class_id), [])]
        best, best_iou = None, 0.0
        for g in cands:
            v = iou(d, g)
            if v > best_iou:
                best, best_iou = g, v
        if best_iou < iou_thresh:
            out.append(FalsePositive(d, best_iou, best))
    return out


def part_rate(det: Detection, gts: Iterable[GroundTruthBox]) -> float:
    """Largest fraction of the detection's area lying inside one GT."""
    a = det.area
    if a <= 0:
        return 0.0
    return max((intersection(det, g) / a for g in gts), default=0.0)


def pfp_rate(dets: list[Detection], gts: list[GroundTruthBox], thresholds: Iterable[float],
             iou_thresh: float = 0.5) -> dict[float, float]:
    """Share of all detections that are false positives lying mostly inside a same-class GT."""
    thresholds = list(thresholds)
    if any(not (0.0 < t <= 1.0) for t in thresholds):
        raise ValueError("part-rate thresholds must lie in (0, 1]")
    if not dets:
        return {t: 0.0 for t in thresholds}
    by_key = _group(gts)
    rates = [part_rate(fp.detection, (gts[i] for i in by_key.get((fp.detection.image_id, fp.detection.class_id), [])))
             for fp in fp_analysis(dets, gts, iou_thresh)]
    return {t: sum(r >= t for r in rates) / len(dets) for t in thresholds}


@dataclass
class FnReport:
    fn_count: int
    total: int
    by_scale: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.fn_count / self.total if self.total else ABSENT

    def scale_rate(self, scale: str) -> float:
        fn, tot = self.by_scale.get(scale, (0, 0))
        return fn / tot if tot else ABSENT


def fn_analysis(dets: list[Detection], gts: list[GroundTruthBox], iou_thresh: float = 0.5) -> FnReport:
    m = match_detections(dets, gts, iou_thresh)
    by_scale: dict[str, list[int]] = {}
    for g, hit in zip(gts, m.gt_matched):
        row = by_scale.setdefault(g.scale_class, [0, 0])
        row[0] += int(not hit)
        row[1] += 1
    return FnReport(int((~m.gt_matched).sum()), len(gts), {k: (v[0], v[1]) for k, v in sorted(by_scale.items())})


@dataclass
class ErrorReport:
    fp_count: int
    pfp_ratio: dict[float, float]
    fn_count: int
    fn_error_rate: float
    total_detections: int
    total_gts: int
    fn_by_scale: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        pfp_max = max(self.pfp_ratio.values(), default=0.0) * self.total_detections
        if not (pfp_max <= self.fp_count + 1e-9 and self.fp_count <= self.total_detections
                and self.fn_count <= self.total_gts):
            raise ValueError("inconsistent error report counts")


def error_report(dets, gts, thresholds=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
                 iou_thresh: float = 0.5) -> ErrorReport:
    fps = fp_analysis(dets, gts, iou_thresh)
    fn = fn_analysis(dets, gts, iou_thresh)
    return ErrorReport(len(fps), pfp_rate(dets, gts, thresholds, iou_thresh), fn.fn_count, fn.rate,
                       len(dets), len(gts), fn.by_scale)
