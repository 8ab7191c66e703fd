"""Remembering old classes: output distillation and pseudo-labels.

When the classifier has grown, the current model's distribution over
old classes plus "no object" is compared against the frozen previous
model. Probability assigned to classes the old model never knew is
folded into the no-object slot first, so learning new classes is not
punished. The comparison is a KL term, either averaged uniformly over
the queries or weighted toward queries the old model was confident
about (weight (1 - p_old(no object))^2).

Pseudo-labels replay the old model's own segmentation as extra
annotations: each output's binarized mask is kept where that output
wins the per-pixel confidence contest and no current ground truth
claims the pixel, and the result survives only if it retains at least
half of the binarized mask and at least one pixel.

Old-model quantities are constants everywhere; no gradient flows into
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, IntegrityError
from .model import PredictionSet
from .objective import LOG_FLOOR, LabelEntry, LabelSet
from .synthdata import Segment

BINARIZE_THRESHOLD = 0.5


@dataclass
class PseudoLabel:
    class_id: int
    mask: np.ndarray       # bool (H, W)
    query_index: int
    confidence: float      # peak of the weighted mask that produced it


def unbiased_prob(p: np.ndarray, new_indices: set[int]) -> np.ndarray:
    """Fold new-class probability into the no-object slot (index 0).

    Input is one distribution over old classes + new classes + no
    object; output is over old classes + no object, with the old-class
    entries untouched and in their original order.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("expected a single distribution, got shape %s" % (p.shape,))
    if 0 in new_indices or any(not 0 < i < p.size for i in new_indices):
        raise ValueError("new indices must be within 1..%d" % (p.size - 1))
    keep = [i for i in range(1, p.size) if i not in new_indices]
    folded = p[0] + sum(p[i] for i in new_indices)
    return np.concatenate([[folded], p[keep]])


def adaptive_weight(old_probs: np.ndarray) -> np.ndarray:
    """Per-query weight (1 - p_old(no object))^2."""
    old_probs = np.asarray(old_probs, dtype=np.float64)
    return (1.0 - old_probs[:, 0]) ** 2


def _check_alignment(preds: PredictionSet, old: PredictionSet,
                     new_class_ids=None) -> int:
    k_old = len(old.class_ids)
    if preds.class_ids[:k_old] != old.class_ids:
        raise ConfigError("current classifier columns do not extend the old ones: "
                          "%s vs %s" % (preds.class_ids, old.class_ids))
    derived_new = preds.class_ids[k_old:]
    if new_class_ids is not None and set(new_class_ids) != set(derived_new):
        raise ConfigError("new classes %s do not match grown columns %s"
                          % (sorted(new_class_ids), sorted(derived_new)))
    return k_old


def _build_distill(preds: PredictionSet, old: PredictionSet, new_class_ids=None):
    """Per-query KL(old || folded current) terms as a graph node.

    Returns (row_terms Var of shape (N,), probs leaf). Old entries
    below the log floor contribute nothing.
    """
    k_old = _check_alignment(preds, old, new_class_ids)
    probs_leaf = ad.Var(preds.class_probs)
    po = np.where(old.class_probs >= LOG_FLOOR, old.class_probs, 0.0)

    folded_void = probs_leaf[:, 0] + ad.vsum(probs_leaf[:, k_old + 1:], axis=1)
    log_void = ad.clamped_log(folded_void, LOG_FLOOR)
    log_old = ad.clamped_log(probs_leaf[:, 1:k_old + 1], LOG_FLOOR)

    log_po = np.log(np.maximum(old.class_probs, LOG_FLOOR))
    const_rows = (po * log_po).sum(axis=1)

    cross = po[:, 0] * log_void + ad.vsum(po[:, 1:] * log_old, axis=1)
    row_terms = -(cross - const_rows)  # KL(old_i || folded_i), one per query
    return row_terms, probs_leaf


def kd_loss(preds: PredictionSet, old: PredictionSet, new_class_ids=None) -> float:
    """Uniformly averaged distillation loss over all queries."""
    row_terms, _ = _build_distill(preds, old, new_class_ids)
    return float(ad.vmean(row_terms).value)


def kd_loss_grads(preds: PredictionSet, old: PredictionSet, new_class_ids=None):
    row_terms, leaf = _build_distill(preds, old, new_class_ids)
    loss = ad.vmean(row_terms)
    ad.backward([(loss, np.array(1.0))])
    return float(loss.value), leaf.grad


def ad_loss(preds: PredictionSet, old: PredictionSet, new_class_ids=None) -> float:
    """Distillation loss weighted toward queries the old model used.

    Degenerate case: if every weight is zero (the old model predicted
    pure no-object everywhere) the loss is zero.
    """
    weights = adaptive_weight(old.class_probs)
    total = weights.sum()
    if total == 0.0:
        return 0.0
    row_terms, _ = _build_distill(preds, old, new_class_ids)
    return float(ad.vsum(row_terms * (weights / total)).value)


def ad_loss_grads(preds: PredictionSet, old: PredictionSet, new_class_ids=None):
    weights = adaptive_weight(old.class_probs)
    total = weights.sum()
    if total == 0.0:
        return 0.0, np.zeros_like(preds.class_probs)
    row_terms, leaf = _build_distill(preds, old, new_class_ids)
    loss = ad.vsum(row_terms * (weights / total))
    ad.backward([(loss, np.array(1.0))])
    return float(loss.value), leaf.grad


# -- pseudo-labels -----------------------------------------------------------


def generate_pseudo_labels(old: PredictionSet,
                           gt_segments: list[Segment]) -> list[PseudoLabel]:
    """Mine annotations for old classes from the frozen model's output.

    Pixels already covered by ground truth are off limits. Each pixel
    can back at most one pseudo-label: the output with the highest
    confidence-weighted mask value there (ties to the lowest output
    index). An output's label survives if its claimed pixels keep at
    least half of its binarized mask, with at least one pixel.
    """
    n, h, w = old.masks.shape
    if len(old.class_ids) == 0:
        return []
    gt_all = np.zeros((h, w), dtype=bool)
    for seg in gt_segments:
        if seg.mask.shape != (h, w):
            raise IntegrityError("ground-truth mask shape %s does not match %s"
                                 % (seg.mask.shape, (h, w)))
        gt_all |= seg.mask

    class_part = old.class_probs[:, 1:]
    peak = class_part.max(axis=1)
    peak_col = class_part.argmax(axis=1)
    weighted = peak[:, None, None] * old.masks
    owner = weighted.argmax(axis=0)
    binarized = old.masks > BINARIZE_THRESHOLD

    labels = []
    for i in range(n):
        claimed = (owner == i) & ~gt_all & binarized[i]
        kept = int(claimed.sum())
        full = int(binarized[i].sum())
        if kept >= 1 and 2 * kept >= full:
            labels.append(PseudoLabel(class_id=old.class_ids[int(peak_col[i])],
                                      mask=claimed, query_index=i,
                                      confidence=float(weighted[i].max())))
    return labels


def merge_labels(gt_segments: list[Segment],
                 pseudo_labels: list[PseudoLabel]) -> LabelSet:
    """Ground truth plus pseudo-labels as one target set.

    All masks must be pairwise disjoint; pseudo-labels never touch
    ground-truth pixels by construction, but the merge re-checks
    everything.
    """
    entries = [LabelEntry(class_id=s.class_id, mask=s.mask, origin="gt")
               for s in gt_segments]
    entries += [LabelEntry(class_id=p.class_id, mask=p.mask, origin="pseudo")
                for p in pseudo_labels]
    if entries:
        coverage = np.zeros(entries[0].mask.shape, dtype=np.int64)
        for entry in entries:
            if entry.class_id == 0:
                raise IntegrityError("label entries cannot use the unlabeled id 0")
            coverage += entry.mask.astype(np.int64)
        if coverage.max() > 1:
            raise IntegrityError("merged label masks overlap")
    return LabelSet(entries)
