"""Segmentation quality metrics and continual-learning aggregation.

Panoptic quality per class is computed from matched segment pairs:
a prediction and a ground-truth segment match when they carry the same
class and overlap with IoU above 0.5. Because segments on each side
are disjoint, that matching is unique. PQ decomposes as SQ (mean IoU
over matches) times RQ (an F1-style detection score).

Semantic quality is per-class IoU of label maps. Continual runs are
summarized by the usual four views: base (first-step classes), new
(everything added later), all, and the per-step running average.

All scores live in [0, 1]; any presentation in percentage points is
up to the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import IntegrityError
from .synthdata import Segment

MATCH_IOU_THRESHOLD = 0.5


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0 when both empty."""
    if a.shape != b.shape:
        raise ValueError("mask shapes differ: %s vs %s" % (a.shape, b.shape))
    a = a.astype(bool)
    b = b.astype(bool)
    union = int((a | b).sum())
    if union == 0:
        return 0.0
    return float((a & b).sum()) / union


@dataclass
class ClassStats:
    """Match counts for one class, mergeable by field-wise addition."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tp_iou_sum: float = 0.0

    def merged(self, other: "ClassStats") -> "ClassStats":
        return ClassStats(tp=self.tp + other.tp, fp=self.fp + other.fp,
                          fn=self.fn + other.fn,
                          tp_iou_sum=self.tp_iou_sum + other.tp_iou_sum)


@dataclass
class PqValues:
    pq: float
    sq: float
    rq: float


@dataclass
class PqStats:
    """Per-class match statistics accumulated over an evaluation set."""

    per_class: dict[int, ClassStats] = field(default_factory=dict)

    def merge(self, other: "PqStats") -> "PqStats":
        merged = {c: ClassStats(s.tp, s.fp, s.fn, s.tp_iou_sum)
                  for c, s in self.per_class.items()}
        for c, s in other.per_class.items():
            merged[c] = merged[c].merged(s) if c in merged else \
                ClassStats(s.tp, s.fp, s.fn, s.tp_iou_sum)
        return PqStats(per_class=merged)

    def values(self) -> dict[int, PqValues]:
        """PQ, SQ, RQ per class; classes never seen on either side are
        undefined and omitted. SQ is reported as 0 when there are no
        matches (the decomposition PQ = SQ * RQ still holds)."""
        out = {}
        for c, s in sorted(self.per_class.items()):
            values = _values_of(s)
            if values is not None:
                out[c] = values
        return out

    def pooled_stats(self, class_ids=None) -> ClassStats:
        """Tallies summed over a class subset (all classes when None)."""
        total = ClassStats()
        for c, s in self.per_class.items():
            if class_ids is None or c in class_ids:
                total = total.merged(s)
        return total

    def pooled_values(self, class_ids=None) -> PqValues | None:
        """PQ, SQ, RQ of the summed tallies over a class subset.

        Pooling conditions SQ on the actual matches instead of averaging
        per-class values, so classes with no surviving detections do not
        drag SQ down; None when the subset has no segments at all.
        """
        return _values_of(self.pooled_stats(class_ids))


def _values_of(s: ClassStats) -> PqValues | None:
    denom = s.tp + 0.5 * s.fp + 0.5 * s.fn
    if denom == 0:
        return None
    sq = s.tp_iou_sum / s.tp if s.tp > 0 else 0.0
    return PqValues(pq=s.tp_iou_sum / denom, sq=sq, rq=s.tp / denom)


def _check_disjoint(segments: list[Segment], side: str) -> None:
    if not segments:
        return
    coverage = np.zeros(segments[0].mask.shape, dtype=np.int64)
    for seg in segments:
        if seg.mask.shape != coverage.shape:
            raise IntegrityError("%s segment shapes differ" % side)
        coverage += seg.mask.astype(np.int64)
    if coverage.max() > 1:
        raise IntegrityError("%s segments overlap" % side)


def accumulate_pq(pred_segments: list[Segment], gt_segments: list[Segment],
                  stats: PqStats) -> PqStats:
    """Fold one image's segments into the running statistics."""
    _check_disjoint(pred_segments, "predicted")
    _check_disjoint(gt_segments, "ground-truth")
    image = PqStats()
    classes = sorted({s.class_id for s in pred_segments}
                     | {s.class_id for s in gt_segments})
    for c in classes:
        preds = [s for s in pred_segments if s.class_id == c]
        gts = [s for s in gt_segments if s.class_id == c]
        matched_preds = set()
        matched_gts = set()
        entry = ClassStats()
        for gi, gt in enumerate(gts):
            for pi, pred in enumerate(preds):
                if pi in matched_preds:
                    continue
                overlap = iou(pred.mask, gt.mask)
                if overlap > MATCH_IOU_THRESHOLD:
                    # disjointness on both sides makes this pairing unique
                    matched_preds.add(pi)
                    matched_gts.add(gi)
                    entry.tp += 1
                    entry.tp_iou_sum += overlap
                    break
        entry.fp = len(preds) - len(matched_preds)
        entry.fn = len(gts) - len(matched_gts)
        image.per_class[c] = entry
    return stats.merge(image)


def brute_force_pq(pred_segments: list[Segment],
                   gt_segments: list[Segment]) -> PqStats:
    """Exhaustive-search reference for accumulate_pq.

    Enumerates every injective same-class pairing with IoU above the
    threshold and keeps the one maximizing (match count, IoU sum).
    Exponential; intended for small self-check instances only.
    """
    _check_disjoint(pred_segments, "predicted")
    _check_disjoint(gt_segments, "ground-truth")
    stats = PqStats()
    classes = sorted({s.class_id for s in pred_segments}
                     | {s.class_id for s in gt_segments})
    for c in classes:
        preds = [s for s in pred_segments if s.class_id == c]
        gts = [s for s in gt_segments if s.class_id == c]
        overlaps = [[iou(p.mask, g.mask) for g in gts] for p in preds]
        best = (-1, -1.0)

        def explore(pi, used, count, total):
            nonlocal best
            if pi == len(preds):
                if (count, total) > best:
                    best = (count, total)
                return
            explore(pi + 1, used, count, total)
            for gi in range(len(gts)):
                if gi not in used and overlaps[pi][gi] > MATCH_IOU_THRESHOLD:
                    explore(pi + 1, used | {gi}, count + 1,
                            total + overlaps[pi][gi])

        explore(0, frozenset(), 0, 0.0)
        tp, iou_sum = best
        stats.per_class[c] = ClassStats(tp=tp, fp=len(preds) - tp,
                                        fn=len(gts) - tp, tp_iou_sum=iou_sum)
    return stats


# -- semantic quality --------------------------------------------------------


def mean_iou(pred_map: np.ndarray, gt_map: np.ndarray,
             classes: set[int]) -> tuple[dict[int, float], float | None]:
    """Per-class IoU of label maps plus the mean over defined classes.

    A class absent from both maps is undefined and excluded; if every
    class is undefined the mean is None.
    """
    if pred_map.shape != gt_map.shape:
        raise ValueError("label map shapes differ: %s vs %s"
                         % (pred_map.shape, gt_map.shape))
    per_class = {}
    for c in sorted(classes):
        pred_c = pred_map == c
        gt_c = gt_map == c
        union = int((pred_c | gt_c).sum())
        if union == 0:
            continue
        per_class[c] = float((pred_c & gt_c).sum()) / union
    if not per_class:
        return per_class, None
    return per_class, sum(per_class.values()) / len(per_class)


# -- continual aggregation ---------------------------------------------------


@dataclass
class ClassReport:
    pq: float
    sq: float
    rq: float
    iou: float


@dataclass
class StepReport:
    """Evaluation over all seen classes after finishing one step."""

    step: int
    per_class: dict[int, ClassReport]


def _group_mean(report: StepReport, class_ids, attr: str) -> float | None:
    values = [getattr(report.per_class[c], attr)
              for c in class_ids if c in report.per_class]
    if not values:
        return None
    return sum(values) / len(values)


def aggregate_continual(reports: list[StepReport], protocol) -> dict:
    """Summarize a finished run into base/new/all/avg views.

    base, new, and all are means over class groups at the final step;
    avg is the mean over steps of each step's all-seen-classes mean.
    Emitted for both panoptic quality and IoU.
    """
    if [r.step for r in reports] != [t.step for t in protocol]:
        raise IntegrityError("reports %s do not cover protocol steps %s"
                             % ([r.step for r in reports],
                                [t.step for t in protocol]))
    final = reports[-1]
    base_classes = protocol[0].new_classes
    new_classes = [c for task in protocol[1:] for c in task.new_classes]
    all_classes = protocol[-1].seen_classes

    summary = {}
    for key, attr in (("pq", "pq"), ("miou", "iou")):
        step_means = [_group_mean(r, protocol[i].seen_classes, attr)
                      for i, r in enumerate(reports)]
        defined = [m for m in step_means if m is not None]
        summary[key] = {
            "base": _group_mean(final, base_classes, attr),
            "new": _group_mean(final, new_classes, attr),
            "all": _group_mean(final, all_classes, attr),
            "avg": sum(defined) / len(defined) if defined else None,
        }
    return summary
