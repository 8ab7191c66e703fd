"""Set-prediction training objective: matching plus per-pair losses.

Predictions and annotations are matched one-to-one by minimizing
``-p_i(class_j) * dice(mask_i, target_j)`` with an exact assignment
solver; annotations left over is an error, predictions left over are
pushed toward the "no object" column. Matched pairs pay a focal
classification term plus dice and per-pixel cross-entropy on the mask.
Gradients with respect to the model outputs are exact; the matching
itself is held fixed while differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .errors import CapacityError, IntegrityError
from .model import PredictionSet
from .synthdata import Segment

LOG_FLOOR = 1e-12
DICE_EPS = 1e-8

# tolerance for "equally good" assignments during tie-breaking
MATCH_TIE_TOL = 1e-9


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 20.0
    gamma: float = 2.0
    lambda_mask: float = 5.0
    no_object_weight: float = 1.0
    lambda_distill: float = 1.0


@dataclass(frozen=True)
class LabelEntry:
    """One training target; origin is "gt" or "pseudo"."""

    class_id: int
    mask: np.ndarray
    origin: str = "gt"


@dataclass
class LabelSet:
    entries: list[LabelEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def labels_from_segments(segments: list[Segment]) -> LabelSet:
    return LabelSet([LabelEntry(class_id=s.class_id, mask=s.mask, origin="gt")
                     for s in segments])


@dataclass
class LossBreakdown:
    focal: float
    dice_loss: float
    mask_ce: float
    adaptive_distill: float
    total: float


# -- scalar building blocks ----------------------------------------------


def dice(a: np.ndarray, b: np.ndarray, eps: float = DICE_EPS) -> float:
    """Soft dice overlap in [0, 1]; empty-vs-empty counts as full overlap."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("dice shapes differ: %s vs %s" % (a.shape, b.shape))
    return float((2.0 * (a * b).sum() + eps) / (a.sum() + b.sum() + eps))


def focal_term(prob: float, alpha: float = 20.0, gamma: float = 2.0) -> float:
    """Down-weighted negative log-likelihood of the target class."""
    p = float(prob)
    return -alpha * (1.0 - p) ** gamma * np.log(max(p, LOG_FLOOR))


def mask_term(mask: np.ndarray, target: np.ndarray) -> tuple[float, float]:
    """(1 - dice, mean binary cross-entropy) of a soft mask vs a target."""
    mask = np.asarray(mask, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if mask.shape != target.shape:
        raise ValueError("mask shapes differ: %s vs %s" % (mask.shape, target.shape))
    dice_loss = 1.0 - dice(mask, target)
    ce = float(np.mean(-(target * np.log(np.maximum(mask, LOG_FLOOR))
                         + (1.0 - target) * np.log(np.maximum(1.0 - mask, LOG_FLOOR)))))
    return dice_loss, ce


# -- matching --------------------------------------------------------------


def matching_costs(preds: PredictionSet, labels: LabelSet) -> np.ndarray:
    """(N, len(labels)) matrix of -class_prob * dice scores."""
    n = preds.class_probs.shape[0]
    flat_masks = preds.masks.reshape(n, -1)
    mask_sums = flat_masks.sum(axis=1)
    cost = np.empty((n, len(labels)), dtype=np.float64)
    for j, entry in enumerate(labels):
        if entry.class_id not in preds.class_ids:
            raise IntegrityError("label class %d is unknown to the model"
                                 % entry.class_id)
        col = preds.class_ids.index(entry.class_id) + 1
        target = np.asarray(entry.mask, dtype=np.float64).reshape(-1)
        overlap = flat_masks @ target
        dices = (2.0 * overlap + DICE_EPS) / (mask_sums + target.sum() + DICE_EPS)
        cost[:, j] = -preds.class_probs[:, col] * dices
    return cost


def _assignment_total(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def match_costs(cost: np.ndarray, n_outputs: int) -> tuple[int, ...]:
    """Minimum-cost injection of annotations (columns) into outputs (rows).

    Unassigned outputs implicitly match zero-cost padding, so the
    optimum over the given matrix is the optimum of the padded square
    problem. Among equally cheap assignments the lexicographically
    smallest one wins: annotation 0 takes the lowest workable output
    index, then annotation 1, and so on.
    """
    n, n_labels = cost.shape
    if n != n_outputs:
        raise ValueError("cost has %d rows for %d outputs" % (n, n_outputs))
    if n_labels > n:
        raise CapacityError("%d annotations exceed %d model outputs"
                            % (n_labels, n))
    if n_labels == 0:
        return ()
    best = _assignment_total(cost)
    tol = MATCH_TIE_TOL * (1.0 + abs(best))
    unused = np.ones(n, dtype=bool)
    fixed = 0.0
    chosen: list[int] = []
    for j in range(n_labels):
        rest_cols = np.arange(j + 1, n_labels)
        # cheap lower bound for pruning: per-column minima of what's left
        col_floor = cost[unused][:, rest_cols].min(axis=0).sum() if len(rest_cols) else 0.0
        picked = -1
        for i in range(n):
            if not unused[i]:
                continue
            if fixed + cost[i, j] + col_floor > best + tol:
                continue
            unused[i] = False
            completion = _assignment_total(cost[unused][:, rest_cols])
            unused[i] = True
            if fixed + cost[i, j] + completion <= best + tol:
                picked = i
                break
        if picked < 0:
            raise RuntimeError("assignment refinement lost the optimum")
        chosen.append(picked)
        unused[picked] = False
        fixed += cost[picked, j]
    return tuple(chosen)


def match(preds: PredictionSet, labels: LabelSet) -> tuple[int, ...]:
    """Assign one prediction index to each label; see `match_costs`."""
    n = preds.class_probs.shape[0]
    if len(labels) > n:
        raise CapacityError("%d annotations exceed %d model outputs"
                            % (len(labels), n))
    if len(labels) == 0:
        return ()
    return match_costs(matching_costs(preds, labels), n)


def brute_force_match(cost: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Exhaustive reference: try every injection of columns into rows.

    Returns the optimal total and the lexicographically smallest
    assignment among those within the tie tolerance of it. Different
    summation orders of mathematically tied assignments can differ by
    an ulp, so ties use the same relative tolerance as the fast path.
    Only viable for small matrices.
    """
    n, n_labels = cost.shape
    if n_labels == 0:
        return 0.0, ()
    cols = np.arange(n_labels)
    totals = [float(cost[list(sigma), cols].sum())
              for sigma in permutations(range(n), n_labels)]
    best_total = min(totals)
    tol = MATCH_TIE_TOL * (1.0 + abs(best_total))
    for sigma, total in zip(permutations(range(n), n_labels), totals):
        # permutations arrive in lexicographic order, so the first
        # assignment inside the tolerance is the canonical one
        if total <= best_total + tol:
            return best_total, sigma
    raise RuntimeError("unreachable: the minimum is always within tolerance")


# -- the segmentation loss -------------------------------------------------


def _sum_vars(terms: list[ad.Var]) -> ad.Var:
    if not terms:
        return ad.Var(np.array(0.0))
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out


def _build_seg_loss(preds: PredictionSet, labels: LabelSet, sigma: tuple[int, ...],
                    weights: LossWeights):
    """Graph for the supervised loss; returns components and the leaves."""
    n = preds.class_probs.shape[0]
    if len(sigma) != len(labels):
        raise IntegrityError("assignment length %d does not match %d labels"
                             % (len(sigma), len(labels)))
    if len(set(sigma)) != len(sigma) or any(not 0 <= i < n for i in sigma):
        raise IntegrityError("assignment is not an injection into outputs")

    probs_leaf = ad.Var(preds.class_probs)
    logits_leaf = ad.Var(preds.mask_logits)
    hw = preds.mask_logits.shape[1] * preds.mask_logits.shape[2]
    flat_logits = ad.reshape(logits_leaf, (n, hw))
    if preds.mask_activation == "softmax":
        masks = ad.softmax(flat_logits, axis=0)
    else:
        masks = ad.sigmoid(flat_logits)

    focal_terms = []
    dice_terms = []
    ce_terms = []
    matched = set()
    for j, entry in enumerate(labels):
        i = sigma[j]
        matched.add(i)
        col = preds.class_ids.index(entry.class_id) + 1
        p = probs_leaf[i, col]
        focal_terms.append(-weights.alpha * (1.0 - p) ** weights.gamma
                           * ad.clamped_log(p, LOG_FLOOR))
        target = np.asarray(entry.mask, dtype=np.float64).reshape(-1)
        m = masks[i]
        overlap = ad.vsum(m * target)
        denom = ad.vsum(m) + (target.sum() + DICE_EPS)
        dice_terms.append(1.0 - (2.0 * overlap + DICE_EPS) / denom)
        ce_terms.append(ad.vmean(-(target * ad.clamped_log(m, LOG_FLOOR)
                                   + (1.0 - target)
                                   * ad.clamped_log(1.0 - m, LOG_FLOOR))))
    for i in range(n):
        if i in matched:
            continue
        p0 = probs_leaf[i, 0]
        focal_terms.append(weights.no_object_weight * (
            -weights.alpha * (1.0 - p0) ** weights.gamma
            * ad.clamped_log(p0, LOG_FLOOR)))

    focal = _sum_vars(focal_terms)
    dice_loss = _sum_vars(dice_terms)
    mask_ce = _sum_vars(ce_terms)
    total = focal + weights.lambda_mask * (dice_loss + mask_ce)
    return total, focal, dice_loss, mask_ce, probs_leaf, logits_leaf


def seg_loss(preds: PredictionSet, labels: LabelSet, sigma: tuple[int, ...],
             weights: LossWeights) -> LossBreakdown:
    """Supervised loss value under a fixed assignment."""
    total, focal, dice_loss, mask_ce, _, _ = _build_seg_loss(preds, labels, sigma,
                                                             weights)
    return LossBreakdown(focal=focal.item(), dice_loss=dice_loss.item(),
                         mask_ce=mask_ce.item(), adaptive_distill=0.0,
                         total=total.item())


def seg_loss_grads(preds: PredictionSet, labels: LabelSet, sigma: tuple[int, ...],
                   weights: LossWeights):
    """Loss plus exact gradients w.r.t. class_probs and mask_logits."""
    total, focal, dice_loss, mask_ce, probs_leaf, logits_leaf = _build_seg_loss(
        preds, labels, sigma, weights)
    ad.backward([(total, np.array(1.0))])
    d_probs = probs_leaf.grad if probs_leaf.grad is not None \
        else np.zeros_like(preds.class_probs)
    d_logits = logits_leaf.grad if logits_leaf.grad is not None \
        else np.zeros_like(preds.mask_logits)
    breakdown = LossBreakdown(focal=focal.item(), dice_loss=dice_loss.item(),
                              mask_ce=mask_ce.item(), adaptive_distill=0.0,
                              total=total.item())
    return breakdown, d_probs, d_logits


SEG_COMPONENTS = ("focal", "dice", "mask_ce", "total")


def seg_component_grads(preds: PredictionSet, labels: LabelSet,
                        sigma: tuple[int, ...], weights: LossWeights,
                        component: str):
    """Value and gradients of one term of the supervised loss.

    Same graph as seg_loss_grads, but the backward pass is seeded from
    the chosen component instead of the weighted total. Used by the
    gradient self-check to exercise each term in isolation.
    """
    if component not in SEG_COMPONENTS:
        raise ValueError("component must be one of %s" % (SEG_COMPONENTS,))
    total, focal, dice_loss, mask_ce, probs_leaf, logits_leaf = _build_seg_loss(
        preds, labels, sigma, weights)
    chosen = {"focal": focal, "dice": dice_loss,
              "mask_ce": mask_ce, "total": total}[component]
    ad.backward([(chosen, np.array(1.0))])
    d_probs = probs_leaf.grad if probs_leaf.grad is not None \
        else np.zeros_like(preds.class_probs)
    d_logits = logits_leaf.grad if logits_leaf.grad is not None \
        else np.zeros_like(preds.mask_logits)
    return chosen.item(), d_probs, d_logits
