"""Detection metrics under the VisDrone protocol (COCO-style AP and AR).

AP is the 101-point interpolated precision averaged over classes with at
least one ground truth, then over the IoU thresholds 0.50:0.05:0.95.  AR_k is
the recall reached when each image keeps only its top-k detections, averaged
the same way.  Each image contributes at most 500 detections.

Ground truth flagged ``ignore`` can absorb detections (which then count as
neither TP nor FP) and is never a miss.  An ignored box with ``class_id``
``None`` is a class-agnostic ignore region.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import NUM_CLASSES, Detection, iou_matrix

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
MAX_DETS = 500
AR_LIMITS = (1, 10, 100, 500)

TP, FP, IGNORED = 1, 0, -1


@dataclass(frozen=True)
class GroundTruthBox:
    box: np.ndarray
    class_id: Optional[int]
    ignore: bool = False


@dataclass
class EvalReport:
    ap_5095: float
    ap_50: float
    ap_75: float
    ar_1: float
    ar_10: float
    ar_100: float
    ar_500: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def format_text(self) -> str:
        names = {
            "ap_5095": "AP@[0.50:0.95]", "ap_50": "AP@0.50", "ap_75": "AP@0.75",
            "ar_1": "AR@1", "ar_10": "AR@10", "ar_100": "AR@100", "ar_500": "AR@500",
        }
        return "\n".join(f"{names[k]:<16}{100 * v:6.2f}" for k, v in self.as_dict().items())

    def format_kv(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.as_dict().items())


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_threshold: float) -> np.ndarray:
    """TP/FP/IGNORED flag per detection of one image.

    ``dets`` must already be in score-descending order.  Each detection takes
    the unmatched same-class (or class-agnostic ignore) gt with the highest IoU
    at or above the threshold; ties go to the earlier gt.  Ignored gts are
    never consumed.
    """
    flags = np.zeros(len(dets), dtype=np.int64)
    if not dets:
        return flags
    if not gts:
        return flags
    ious = iou_matrix([d.box for d in dets], np.stack([g.box for g in gts]))
    used = np.zeros(len(gts), dtype=bool)
    for i, d in enumerate(dets):
        best, best_j = -1.0, -1
        for j, g in enumerate(gts):
            if g.class_id is not None and g.class_id != d.class_id:
                continue
            if used[j] or ious[i, j] < iou_threshold:
                continue
            if ious[i, j] > best:
                best, best_j = ious[i, j], j
        if best_j < 0:
            flags[i] = FP
        elif gts[best_j].ignore:
            flags[i] = IGNORED
        else:
            used[best_j] = True
            flags[i] = TP
    return flags


def average_precision(flags: Sequence[int], num_gt: int) -> float:
    """101-point interpolated AP of score-ordered TP/FP flags (IGNORED entries skipped).

    Returns NaN when ``num_gt`` is 0.
    """
    if num_gt <= 0:
        return float("nan")
    f = np.asarray(flags, dtype=np.int64)
    f = f[f != IGNORED]
    if f.size == 0:
        return 0.0
    tp = np.cumsum(f == TP)
    fp = np.cumsum(f == FP)
    precision = tp / (tp + fp)
    # monotone envelope, running max from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= k/100 tested as 100*tp >= k*num_gt, free of rounding at points like 0.7
    pos = np.searchsorted(100 * tp, np.arange(101) * num_gt, side="left")
    sampled = np.where(pos < len(precision), precision[np.minimum(pos, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def _sorted_dets(dets: Sequence[Detection]) -> list[Detection]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in order]


def _check_ids(all_dets: Mapping, all_gts: Mapping) -> None:
    extra = set(all_dets) - set(all_gts)
    if extra:
        raise ValueError(f"detections reference images without ground truth: {sorted(extra)[:5]}")


@dataclass
class _ClassStats:
    # per threshold: list of (score, image_id, index, flag)
    records: list
    num_gt: int
    # per threshold, per AR limit: matched TP count
    recalled: np.ndarray


def _collect(all_dets: Mapping, all_gts: Mapping) -> dict[int, _ClassStats]:
    _check_ids(all_dets, all_gts)
    stats = {
        c: _ClassStats([[] for _ in IOU_THRESHOLDS], 0,
                       np.zeros((len(IOU_THRESHOLDS), len(AR_LIMITS)), dtype=np.int64))
        for c in range(NUM_CLASSES)
    }
    for image_id in sorted(all_gts):
        gts = list(all_gts[image_id])
        dets = _sorted_dets(list(all_dets.get(image_id, ())))[:MAX_DETS]
        rank = {id(d): r for r, d in enumerate(dets)}
        for g in gts:
            if not g.ignore and g.class_id is not None:
                stats[g.class_id].num_gt += 1
        for c in range(NUM_CLASSES):
            cdets = [d for d in dets if d.class_id == c]
            cgts = [g for g in gts if g.class_id is None or g.class_id == c]
            if not cdets:
                continue
            ranks = np.array([rank[id(d)] for d in cdets])
            for t, thr in enumerate(IOU_THRESHOLDS):
                flags = match_detections(cdets, cgts, thr)
                stats[c].records[t].extend(
                    (d.score, image_id, int(r), int(fl)) for d, r, fl in zip(cdets, ranks, flags)
                )
                for k, limit in enumerate(AR_LIMITS):
                    sub = match_detections([d for d, r in zip(cdets, ranks) if r < limit], cgts, thr)
                    stats[c].recalled[t, k] += int((sub == TP).sum())
    return stats


def _class_ap(stats: _ClassStats) -> np.ndarray:
    """AP per IoU threshold for one class (NaN when it has no ground truth)."""
    out = np.empty(len(IOU_THRESHOLDS))
    for t, rec in enumerate(stats.records):
        rec = sorted(rec, key=lambda r: (-r[0], r[1], r[2]))
        out[t] = average_precision([r[3] for r in rec], stats.num_gt)
    return out


def evaluate(all_dets: Mapping[str, Sequence[Detection]],
             all_gts: Mapping[str, Sequence[GroundTruthBox]]) -> EvalReport:
    stats = _collect(all_dets, all_gts)
    valid = [c for c in range(NUM_CLASSES) if stats[c].num_gt > 0]
    if not valid:
        return EvalReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    ap = np.stack([_class_ap(stats[c]) for c in valid])  # (classes, thresholds)
    per_threshold = ap.mean(axis=0)
    recall = np.stack([stats[c].recalled / stats[c].num_gt for c in valid])  # (classes, T, K)
    ar = recall.mean(axis=0).mean(axis=0)
    t50 = int(np.flatnonzero(IOU_THRESHOLDS == 0.5)[0])
    t75 = int(np.flatnonzero(IOU_THRESHOLDS == 0.75)[0])
    return EvalReport(
        float(per_threshold.mean()), float(per_threshold[t50]), float(per_threshold[t75]),
        *(float(v) for v in ar),
    )


def per_class_report(all_dets: Mapping[str, Sequence[Detection]],
                     all_gts: Mapping[str, Sequence[GroundTruthBox]]) -> list[Optional[float]]:
    """AP@[0.50:0.95] for each of the 10 classes; ``None`` where a class has no ground truth."""
    stats = _collect(all_dets, all_gts)
    out: list[Optional[float]] = []
    for c in range(NUM_CLASSES):
        out.append(float(_class_ap(stats[c]).mean()) if stats[c].num_gt > 0 else None)
    return out
