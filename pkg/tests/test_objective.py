"""Matching and supervised loss terms."""

from __future__ import annotations

import numpy as np
import pytest

from contseg import model as mm
from contseg import objective as obj
from contseg.errors import CapacityError, IntegrityError


def make_preds(rng, n=5, class_ids=(1, 2, 3), h=6, w=6, activation="softmax"):
    logits = rng.normal(size=(n, len(class_ids) + 1))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    mask_logits = rng.normal(scale=2.0, size=(n, h, w))
    masks = mm.apply_mask_activation(mask_logits, activation)
    return mm.PredictionSet(class_probs=probs, mask_logits=mask_logits, masks=masks,
                            class_ids=tuple(class_ids), mask_activation=activation)


def make_labels(rng, class_ids=(1, 2, 3), count=3, h=6, w=6):
    entries = []
    for _ in range(count):
        mask = rng.random((h, w)) < 0.3
        entries.append(obj.LabelEntry(class_id=int(rng.choice(class_ids)), mask=mask))
    return obj.LabelSet(entries)


# -- dice ------------------------------------------------------------------


def test_dice_basics():
    a = np.array([1.0, 1.0, 0.0, 0.0])
    b = np.array([1.0, 0.0, 0.0, 0.0])
    assert abs(obj.dice(a, a) - 1.0) < 1e-9
    assert abs(obj.dice(a, b) - 2.0 / 3.0) < 1e-8
    assert obj.dice(a, 1.0 - a) < 1e-8  # disjoint
    assert abs(obj.dice(np.zeros(4), np.zeros(4)) - 1.0) < 1e-12  # empty vs empty


def test_dice_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        obj.dice(np.zeros(3), np.zeros(4))


def test_dice_is_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.random(20)
        b = rng.random(20)
        d = obj.dice(a, b)
        assert abs(d - obj.dice(b, a)) < 1e-15
        assert 0.0 <= d <= 1.0 + 1e-12


# -- focal and mask terms ----------------------------------------------------


def test_focal_values():
    assert obj.focal_term(1.0) == 0.0
    expected = 20.0 * 0.25 * np.log(2.0)
    assert abs(obj.focal_term(0.5, alpha=20.0, gamma=2.0) - expected) < 1e-12
    assert abs(expected - 3.4657359027997264) < 1e-12
    # gamma 0, alpha 1 reduces to plain cross-entropy
    assert abs(obj.focal_term(0.3, alpha=1.0, gamma=0.0) + np.log(0.3)) < 1e-12
    assert np.isfinite(obj.focal_term(0.0))


def test_mask_term_saturated_and_uniform():
    target = np.array([[1.0, 0.0], [0.0, 1.0]])
    dice_loss, ce = obj.mask_term(target, target)
    assert abs(dice_loss) < 1e-8
    assert abs(ce) < 1e-9

    half = np.full((2, 2), 0.5)
    dice_loss, ce = obj.mask_term(half, target)
    assert abs(ce - np.log(2.0)) < 1e-12

    with pytest.raises(ValueError):
        obj.mask_term(np.zeros((2, 2)), np.zeros((2, 3)))


# -- matching ---------------------------------------------------------------


def test_match_two_by_two_example():
    cost = np.array([[-0.9, -0.1], [-0.2, -0.8]])
    sigma = obj.match_costs(cost, 2)
    assert sigma == (0, 1)
    total = cost[0, 0] + cost[1, 1]
    assert abs(total - (-1.7)) < 1e-12


def test_match_prefers_lexicographically_smallest_on_ties():
    assert obj.match_costs(np.zeros((2, 2)), 2) == (0, 1)
    assert obj.match_costs(np.zeros((4, 2)), 4) == (0, 1)
    cost = np.array([[-1.0, 0.0], [-1.0, 0.0], [0.0, -1.0]])
    assert obj.match_costs(cost, 3) == (0, 2)


def test_match_single_annotation_takes_cheapest_row():
    rng = np.random.default_rng(1)
    for _ in range(20):
        cost = rng.normal(size=(6, 1))
        assert obj.match_costs(cost, 6) == (int(cost.argmin()),)


def test_match_agrees_with_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        n_labels = int(rng.integers(0, n + 1))
        cost = -rng.random((n, n_labels))
        sigma = obj.match_costs(cost, n)
        best_total, best_sigma = obj.brute_force_match(cost)
        assert sigma == best_sigma
        if n_labels:
            total = float(cost[list(sigma), range(n_labels)].sum())
            assert total == best_total


def test_match_zero_cost_padding_is_implicit():
    from scipy.optimize import linear_sum_assignment

    rng = np.random.default_rng(3)
    for _ in range(20):
        cost = -rng.random((5, 3))
        padded = np.hstack([cost, np.zeros((5, 2))])
        rows, cols = linear_sum_assignment(padded)
        padded_total = float(padded[rows, cols].sum())
        sigma = obj.match_costs(cost, 5)
        total = float(cost[list(sigma), range(3)].sum())
        assert abs(total - padded_total) < 1e-12


def test_match_capacity_and_unknown_class():
    rng = np.random.default_rng(4)
    preds = make_preds(rng, n=2)
    labels = make_labels(rng, count=3)
    with pytest.raises(CapacityError):
        obj.match(preds, labels)
    preds5 = make_preds(rng, n=5)
    bad = obj.LabelSet([obj.LabelEntry(class_id=77, mask=np.zeros((6, 6), dtype=bool))])
    with pytest.raises(IntegrityError):
        obj.match(preds5, bad)
    assert obj.match(preds5, obj.LabelSet([])) == ()


def test_match_on_predictions_is_deterministic():
    rng = np.random.default_rng(5)
    preds = make_preds(rng)
    labels = make_labels(rng)
    assert obj.match(preds, labels) == obj.match(preds, labels)


# -- seg loss ----------------------------------------------------------------


def reference_seg_loss(preds, labels, sigma, w):
    """Straight-line scalar transcription used as an independent check."""
    n = preds.class_probs.shape[0]
    flat = preds.mask_logits.reshape(n, -1)
    if preds.mask_activation == "softmax":
        e = np.exp(flat - flat.max(axis=0, keepdims=True))
        masks = e / e.sum(axis=0, keepdims=True)
    else:
        masks = 1.0 / (1.0 + np.exp(-flat))
    focal = 0.0
    dice_loss = 0.0
    ce = 0.0
    for j, entry in enumerate(labels):
        i = sigma[j]
        col = preds.class_ids.index(entry.class_id) + 1
        p = preds.class_probs[i, col]
        focal += -w.alpha * (1.0 - p) ** w.gamma * np.log(max(p, 1e-12))
        m = masks[i]
        t = entry.mask.reshape(-1).astype(float)
        d = (2.0 * (m * t).sum() + 1e-8) / (m.sum() + t.sum() + 1e-8)
        dice_loss += 1.0 - d
        ce += np.mean(-(t * np.log(np.maximum(m, 1e-12))
                        + (1.0 - t) * np.log(np.maximum(1.0 - m, 1e-12))))
    for i in set(range(n)) - set(sigma):
        p0 = preds.class_probs[i, 0]
        focal += w.no_object_weight * (-w.alpha * (1.0 - p0) ** w.gamma
                                       * np.log(max(p0, 1e-12)))
    return focal + w.lambda_mask * (dice_loss + ce)


def test_seg_loss_matches_reference():
    rng = np.random.default_rng(6)
    w = obj.LossWeights()
    for _ in range(25):
        preds = make_preds(rng, n=int(rng.integers(2, 7)))
        labels = make_labels(rng, count=int(rng.integers(0, 3)))
        sigma = obj.match(preds, labels)
        breakdown = obj.seg_loss(preds, labels, sigma, w)
        want = reference_seg_loss(preds, labels, sigma, w)
        assert abs(breakdown.total - want) < 1e-9
        composed = breakdown.focal + w.lambda_mask * (breakdown.dice_loss
                                                      + breakdown.mask_ce)
        assert abs(breakdown.total - composed) < 1e-12
        assert breakdown.adaptive_distill == 0.0


def test_seg_loss_perfect_predictions_near_zero():
    # one query nails the one target with saturated mask and probability
    h = w = 5
    target = np.zeros((h, w), dtype=bool)
    target[1:4, 1:4] = True
    mask_logits = np.where(target, 30.0, -30.0)[None].repeat(2, axis=0)
    mask_logits[1] = -mask_logits[1]
    probs = np.array([[0.0, 1.0], [1.0, 0.0]])
    masks = mm.apply_mask_activation(mask_logits, "softmax")
    preds = mm.PredictionSet(class_probs=probs, mask_logits=mask_logits, masks=masks,
                             class_ids=(1,), mask_activation="softmax")
    labels = obj.LabelSet([obj.LabelEntry(class_id=1, mask=target)])
    breakdown = obj.seg_loss(preds, labels, (0,), obj.LossWeights())
    assert breakdown.total < 1e-6


def test_seg_loss_empty_labels_is_no_object_focal():
    rng = np.random.default_rng(7)
    preds = make_preds(rng, n=4)
    w = obj.LossWeights(no_object_weight=0.7)
    breakdown = obj.seg_loss(preds, obj.LabelSet([]), (), w)
    want = sum(0.7 * obj.focal_term(p0, w.alpha, w.gamma)
               for p0 in preds.class_probs[:, 0])
    assert abs(breakdown.total - want) < 1e-12
    assert breakdown.dice_loss == 0.0 and breakdown.mask_ce == 0.0

    silent = obj.LossWeights(no_object_weight=0.0)
    assert obj.seg_loss(preds, obj.LabelSet([]), (), silent).total == 0.0


def test_seg_loss_invariant_under_label_permutation():
    rng = np.random.default_rng(8)
    preds = make_preds(rng, n=6)
    labels = make_labels(rng, count=3)
    sigma = obj.match(preds, labels)
    w = obj.LossWeights()
    base = obj.seg_loss(preds, labels, sigma, w).total
    order = [2, 0, 1]
    shuffled = obj.LabelSet([labels.entries[k] for k in order])
    shuffled_sigma = tuple(sigma[k] for k in order)
    permuted = obj.seg_loss(preds, shuffled, shuffled_sigma, w).total
    assert abs(permuted - base) < 1e-12


def test_seg_loss_rejects_bad_assignment():
    rng = np.random.default_rng(9)
    preds = make_preds(rng, n=4)
    labels = make_labels(rng, count=2)
    w = obj.LossWeights()
    with pytest.raises(IntegrityError):
        obj.seg_loss(preds, labels, (0,), w)  # wrong length
    with pytest.raises(IntegrityError):
        obj.seg_loss(preds, labels, (1, 1), w)  # not injective
    with pytest.raises(IntegrityError):
        obj.seg_loss(preds, labels, (0, 9), w)  # out of range


def test_seg_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    w = obj.LossWeights()
    preds = make_preds(rng, n=4, h=5, w=5)
    labels = make_labels(rng, count=2, h=5, w=5)
    sigma = obj.match(preds, labels)
    _, d_probs, d_logits = obj.seg_loss_grads(preds, labels, sigma, w)

    def loss_at(probs, logits):
        masks = mm.apply_mask_activation(logits, preds.mask_activation)
        p = mm.PredictionSet(class_probs=probs, mask_logits=logits, masks=masks,
                             class_ids=preds.class_ids,
                             mask_activation=preds.mask_activation)
        return obj.seg_loss(p, labels, sigma, w).total

    h = 1e-6
    worst = 0.0
    checked = 0
    for arr, grad in ((preds.class_probs, d_probs), (preds.mask_logits, d_logits)):
        flat = arr.reshape(-1)
        for idx in rng.choice(arr.size, size=min(60, arr.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            hi = loss_at(preds.class_probs, preds.mask_logits)
            flat[idx] = orig - h
            lo = loss_at(preds.class_probs, preds.mask_logits)
            flat[idx] = orig
            fd = (hi - lo) / (2.0 * h)
            got = grad.reshape(-1)[idx]
            worst = max(worst, abs(got - fd) / max(1.0, abs(got), abs(fd)))
            checked += 1
    assert checked >= 76
    assert worst < 1e-4, worst


def test_seg_loss_sigmoid_mode_also_differentiates():
    rng = np.random.default_rng(11)
    w = obj.LossWeights()
    preds = make_preds(rng, n=3, h=4, w=4, activation="sigmoid")
    labels = make_labels(rng, count=1, h=4, w=4)
    sigma = obj.match(preds, labels)
    _, _, d_logits = obj.seg_loss_grads(preds, labels, sigma, w)

    idx = 7
    h = 1e-6
    flat = preds.mask_logits.reshape(-1)

    def value():
        masks = mm.apply_mask_activation(preds.mask_logits, "sigmoid")
        p = mm.PredictionSet(class_probs=preds.class_probs,
                             mask_logits=preds.mask_logits, masks=masks,
                             class_ids=preds.class_ids, mask_activation="sigmoid")
        return obj.seg_loss(p, labels, sigma, w).total

    orig = flat[idx]
    flat[idx] = orig + h
    hi = value()
    flat[idx] = orig - h
    lo = value()
    flat[idx] = orig
    fd = (hi - lo) / (2.0 * h)
    assert abs(d_logits.reshape(-1)[idx] - fd) < 1e-6
