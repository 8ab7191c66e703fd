"""Experiment orchestration: config, training loop, evaluation, self-checks.

One experiment is a sequence of class-incremental steps over a synthetic
scene dataset. Each step slices the training data to its new classes,
optionally freezes the previous model to drive distillation and
pseudo-labels, trains with an adaptive-moment optimizer, and evaluates
panoptic and semantic quality on a fixed held-out test set over all
classes seen so far. Everything is derived deterministically from the
config, so identical configs produce byte-identical result files.

Result files per run directory: config.json (echo), step_NNN.cmfk
checkpoints, steps.csv (per-step per-class metrics), summary.json
(base/new/all/avg for PQ and mIoU), curves.svg.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill, metrics, model, objective, plots
from .errors import ConfigError, IntegrityError, NumericError, PlacementError
from .objective import LabelSet, LossWeights, labels_from_segments
from .protocol import ProtocolSpec, TaskSpec, build_protocol, make_ordering, slice_dataset
from .synthdata import (SceneGeometry, SceneSample, Segment, generate_dataset,
                        generate_scene, make_palette, to_semantic)

IMAGE_CHANNELS = 3


# -- configuration -----------------------------------------------------------


@dataclass
class DataConfig:
    num_classes: int = 8
    num_things: int = 4
    grid_size: int = 16
    samples_per_class: int = 6
    test_samples_per_class: int = 4
    max_instances: int = 2


@dataclass
class ProtocolConfig:
    initial: int = 4
    increment: int = 2
    overlap_mode: str = "overlap"
    ordering_seed: int | None = None


@dataclass
class ModelConfig:
    n_queries: int = 10
    dim: int = 32
    mask_activation: str = "softmax"
    min_confidence: float = 0.5
    min_area: int = 4


@dataclass
class OptimConfig:
    step0_updates: int = 2000
    updates_per_class: int = 400
    lr_step0: float = 1e-3
    lr_later: float = 5e-4
    batch_size: int = 4
    seed: int = 0


@dataclass
class LossConfig:
    alpha: float = 20.0
    gamma: float = 2.0
    lambda_mask: float = 5.0
    no_object_weight: float = 1.0
    lambda_distill: float | None = None  # None picks 1.0 for <= 2 steps, 10.0 after
    distill_mode: str = "none"           # none | kd | ad
    pseudo_labels: bool = False


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimization: OptimConfig = field(default_factory=OptimConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    output_dir: str = "runs/experiment"


_SECTIONS = {"data": DataConfig, "protocol": ProtocolConfig, "model": ModelConfig,
             "optimization": OptimConfig, "losses": LossConfig}


def _section_from(cls, name: str, raw: dict):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError("unknown key(s) in '%s': %s"
                          % (name, ", ".join(sorted(unknown))))
    return cls(**raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - set(_SECTIONS) - {"output_dir"}
    if unknown:
        raise ConfigError("unknown top-level key(s): %s"
                          % ", ".join(sorted(unknown)))
    sections = {name: _section_from(cls, name, raw.get(name, {}))
                for name, cls in _SECTIONS.items()}
    config = ExperimentConfig(output_dir=raw.get("output_dir", "runs/experiment"),
                              **sections)
    validate_config(config)
    return config


def config_to_dict(config: ExperimentConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(config, name)) for name in _SECTIONS}
    out["output_dir"] = config.output_dir
    return out


def validate_config(config: ExperimentConfig) -> None:
    d, p, m, o, lo = (config.data, config.protocol, config.model,
                      config.optimization, config.losses)
    positive = [("data.num_classes", d.num_classes),
                ("data.grid_size", d.grid_size),
                ("data.samples_per_class", d.samples_per_class),
                ("data.test_samples_per_class", d.test_samples_per_class),
                ("data.max_instances", d.max_instances),
                ("protocol.initial", p.initial),
                ("model.n_queries", m.n_queries),
                ("model.dim", m.dim),
                ("optimization.step0_updates", o.step0_updates),
                ("optimization.updates_per_class", o.updates_per_class),
                ("optimization.batch_size", o.batch_size)]
    for name, value in positive:
        if value < 1:
            raise ConfigError("%s must be positive, got %r" % (name, value))
    if not 0 <= d.num_things <= d.num_classes:
        raise ConfigError("data.num_things out of range")
    if p.increment < 0:
        raise ConfigError("protocol.increment must be non-negative")
    if p.overlap_mode not in ("overlap", "disjoint"):
        raise ConfigError("protocol.overlap_mode must be 'overlap' or 'disjoint'")
    if m.mask_activation not in model.MASK_ACTIVATIONS:
        raise ConfigError("model.mask_activation must be one of %s"
                          % (model.MASK_ACTIVATIONS,))
    if not 0.0 <= m.min_confidence <= 1.0 or m.min_area < 0:
        raise ConfigError("model inference thresholds out of range")
    if o.lr_step0 <= 0 or o.lr_later <= 0:
        raise ConfigError("learning rates must be > 0")
    for name, value in [("losses.alpha", lo.alpha), ("losses.gamma", lo.gamma),
                        ("losses.lambda_mask", lo.lambda_mask),
                        ("losses.no_object_weight", lo.no_object_weight)]:
        if value < 0:
            raise ConfigError("%s must be non-negative" % name)
    if lo.lambda_distill is not None and lo.lambda_distill < 0:
        raise ConfigError("losses.lambda_distill must be non-negative or null")
    if lo.distill_mode not in ("none", "kd", "ad"):
        raise ConfigError("losses.distill_mode must be 'none', 'kd' or 'ad'")
    if not isinstance(lo.pseudo_labels, bool):
        raise ConfigError("losses.pseudo_labels must be a boolean")


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- optimizer ---------------------------------------------------------------


class AdamState:
    """Adaptive-moment optimizer state; one instance per training step."""

    def __init__(self, params: model.ModelParams, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(v) for name, v in params.tensors.items()}
        self.v = {name: np.zeros_like(v) for name, v in params.tensors.items()}

    def step(self, params: model.ModelParams, grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, tensor in params.tensors.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            tensor -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class BatchSampler:
    """Epoch-style shuffled batches from a dedicated RNG stream."""

    def __init__(self, count: int, batch_size: int, rng: np.random.Generator):
        self.count = count
        self.batch_size = min(batch_size, count)
        self.rng = rng
        self.queue: list[int] = []

    def next(self) -> list[int]:
        if len(self.queue) < self.batch_size:
            self.queue += [int(i) for i in self.rng.permutation(self.count)]
        batch, self.queue = self.queue[:self.batch_size], self.queue[self.batch_size:]
        return batch


# -- per-step preparation ----------------------------------------------------


@dataclass
class PreparedSample:
    """Everything constant about one training sample within a step."""

    image: np.ndarray
    labels: LabelSet
    old_preds: model.PredictionSet | None
    seed: int | None


@dataclass
class RunState:
    params: model.ModelParams
    old_params: model.ModelParams | None
    reports: list[metrics.StepReport]
    init_rng: np.random.Generator
    shuffle_rng: np.random.Generator


def resolve_lambda_distill(config: ExperimentConfig, n_steps: int) -> float:
    if config.losses.lambda_distill is not None:
        return float(config.losses.lambda_distill)
    return 1.0 if n_steps <= 2 else 10.0


def prepare_samples(samples: list[SceneSample], old_params: model.ModelParams | None,
                    config: ExperimentConfig) -> list[PreparedSample]:
    """Precompute per-sample constants for one step.

    The frozen model's predictions (for distillation) and the pseudo-
    labels mined from them are fixed for the whole step, so both are
    computed once per sample. If ground truth plus pseudo-labels would
    exceed the query count, the lowest-confidence pseudo-labels are
    dropped to fit.
    """
    needs_old = old_params is not None and (
        config.losses.distill_mode != "none" or config.losses.pseudo_labels)
    prepared = []
    for sample in samples:
        old_preds = None
        labels = labels_from_segments(sample.segments)
        if needs_old:
            old_preds, _ = model.forward(old_params, sample.image)
            if config.losses.pseudo_labels:
                mined = distill.generate_pseudo_labels(old_preds, sample.segments)
                room = config.model.n_queries - len(sample.segments)
                if len(mined) > room:
                    mined = sorted(mined, key=lambda lab: -lab.confidence)[:max(room, 0)]
                    mined.sort(key=lambda lab: lab.query_index)
                labels = distill.merge_labels(sample.segments, mined)
        prepared.append(PreparedSample(image=sample.image, labels=labels,
                                       old_preds=old_preds, seed=sample.seed))
    return prepared


def sample_loss_grads(params: model.ModelParams, prep: PreparedSample,
                      weights: LossWeights, distill_mode: str):
    """Total loss and parameter gradients for one sample."""
    preds, cache = model.forward(params, prep.image)
    sigma = objective.match(preds, prep.labels)
    breakdown, d_probs, d_logits = objective.seg_loss_grads(
        preds, prep.labels, sigma, weights)
    total = breakdown.total
    if distill_mode != "none" and prep.old_preds is not None \
            and weights.lambda_distill != 0.0:
        grad_fn = distill.kd_loss_grads if distill_mode == "kd" \
            else distill.ad_loss_grads
        value, d_distill = grad_fn(preds, prep.old_preds)
        total += weights.lambda_distill * value
        d_probs = d_probs + weights.lambda_distill * d_distill
    grads = model.backward(params, cache, d_probs, d_logits)
    return total, grads


# -- evaluation --------------------------------------------------------------


def evaluate_step(params: model.ModelParams, test_samples: list[SceneSample],
                  task: TaskSpec, config: ModelConfig
                  ) -> tuple[metrics.StepReport, metrics.PqStats]:
    """Panoptic and semantic metrics over all seen classes.

    Returns the per-class report plus the raw match tallies so callers
    can pool statistics across class groups.
    """
    seen = set(task.seen_classes)
    stats = metrics.PqStats()
    pred_maps = []
    gt_maps = []
    for sample in test_samples:
        gt_segments = [s for s in sample.segments if s.class_id in seen]
        preds, _ = model.forward(params, sample.image)
        pred_segments = model.infer_panoptic(preds,
                                             min_confidence=config.min_confidence,
                                             min_area=config.min_area)
        stats = metrics.accumulate_pq(pred_segments, gt_segments, stats)
        h, w = sample.image.shape[1:]
        pred_maps.append(model.infer_semantic(preds).ravel())
        gt_maps.append(to_semantic(gt_segments, h, w).ravel())
    per_iou, _ = metrics.mean_iou(np.concatenate(pred_maps),
                                  np.concatenate(gt_maps), seen)
    pq_values = stats.values()
    per_class = {}
    for c in sorted(seen):
        pq = pq_values.get(c)
        one_iou = per_iou.get(c)
        if pq is None and one_iou is None:
            continue
        per_class[c] = metrics.ClassReport(
            pq=float(pq.pq) if pq else 0.0,
            sq=float(pq.sq) if pq else 0.0,
            rq=float(pq.rq) if pq else 0.0,
            iou=float(one_iou) if one_iou is not None else 0.0)
    return metrics.StepReport(step=task.step, per_class=per_class), stats


# -- result files ------------------------------------------------------------


def write_steps_csv(reports: list[metrics.StepReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "class_id", "pq", "sq", "rq", "iou"])
        for report in reports:
            for class_id in sorted(report.per_class):
                row = report.per_class[class_id]
                writer.writerow([report.step, class_id,
                                 repr(float(row.pq)), repr(float(row.sq)),
                                 repr(float(row.rq)), repr(float(row.iou))])


def _pooled_groups(stats: metrics.PqStats, tasks) -> dict:
    """Summed match tallies and their PQ/SQ/RQ for the final step.

    Pooling keeps SQ conditioned on surviving matches, which separates
    detection loss from mask-quality loss in a way per-class means
    (where an extinct class scores SQ 0) cannot.
    """
    groups = {
        "base": tasks[0].new_classes,
        "old": [c for t in tasks[:-1] for c in t.new_classes],
        "all": tasks[-1].seen_classes,
    }
    out = {}
    for name, ids in groups.items():
        values = stats.pooled_values(set(ids))
        if not ids or values is None:
            out[name] = None
            continue
        tallies = stats.pooled_stats(set(ids))
        out[name] = {"pq": values.pq, "sq": values.sq, "rq": values.rq,
                     "tp": tallies.tp, "fp": tallies.fp, "fn": tallies.fn,
                     "tp_iou_sum": tallies.tp_iou_sum}
    return out


def write_summary_json(summary: dict, path: Path) -> None:
    def clean(value):
        if isinstance(value, dict):
            return {k: clean(v) for k, v in value.items()}
        if value is None or isinstance(value, (bool, int, str)):
            return value
        return float(value)

    with open(path, "w") as fh:
        json.dump(clean(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dump_diagnostics(out_dir: Path, step: int, update: int,
                      batch: list[PreparedSample], message: str) -> None:
    payload = {
        "step": step,
        "update": update,
        "sample_seeds": [p.seed for p in batch],
        "error": message,
    }
    with open(out_dir / "diagnostics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- the experiment loop -----------------------------------------------------


def run_experiment(config: ExperimentConfig) -> dict:
    """Train through all steps and write result files; returns the summary."""
    validate_config(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.json")

    data_cfg = config.data
    palette = make_palette(data_cfg.num_classes, data_cfg.num_things,
                           channels=IMAGE_CHANNELS)
    geometry = SceneGeometry(height=data_cfg.grid_size, width=data_cfg.grid_size,
                             max_instances=data_cfg.max_instances)
    seed = config.optimization.seed
    train_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    test_seed = int(np.random.SeedSequence([seed, 2]).generate_state(1)[0])
    train_samples = generate_dataset(palette, data_cfg.samples_per_class,
                                     geometry, train_seed)
    test_samples = generate_dataset(palette, data_cfg.test_samples_per_class,
                                    geometry, test_seed)

    ordering = make_ordering([c.class_id for c in palette],
                             config.protocol.ordering_seed)
    tasks = build_protocol(ProtocolSpec(ordering=ordering,
                                        initial=config.protocol.initial,
                                        increment=config.protocol.increment,
                                        overlap_mode=config.protocol.overlap_mode))
    lambda_distill = resolve_lambda_distill(config, len(tasks))
    weights = LossWeights(alpha=config.losses.alpha, gamma=config.losses.gamma,
                          lambda_mask=config.losses.lambda_mask,
                          no_object_weight=config.losses.no_object_weight,
                          lambda_distill=lambda_distill)

    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([seed, 4]))
    params = model.init_params(init_rng, n_queries=config.model.n_queries,
                               dim=config.model.dim, channels=IMAGE_CHANNELS,
                               class_ids=list(tasks[0].new_classes),
                               mask_activation=config.model.mask_activation)
    state = RunState(params=params, old_params=None, reports=[],
                     init_rng=init_rng, shuffle_rng=shuffle_rng)

    for task in tasks:
        step_samples = slice_dataset(train_samples, task,
                                     config.protocol.overlap_mode)
        if task.step > 0:
            state.old_params = state.params.copy()
            state.params = model.expand_classifier(state.params,
                                                   list(task.new_classes),
                                                   state.init_rng)
        prepared = prepare_samples(step_samples, state.old_params, config)
        if not prepared:
            raise IntegrityError("step %d received no training samples" % task.step)

        if task.step == 0:
            n_updates = config.optimization.step0_updates
            lr = config.optimization.lr_step0
        else:
            n_updates = config.optimization.updates_per_class * len(task.new_classes)
            lr = config.optimization.lr_later
        adam = AdamState(state.params)
        sampler = BatchSampler(len(prepared), config.optimization.batch_size,
                               state.shuffle_rng)
        for update in range(n_updates):
            batch = [prepared[i] for i in sampler.next()]
            grads = model.zero_grads(state.params)
            batch_loss = 0.0
            try:
                for prep in batch:
                    loss, sample_grads = sample_loss_grads(
                        state.params, prep, weights, config.losses.distill_mode)
                    batch_loss += loss
                    model.accumulate_grads(grads, sample_grads)
                if not np.isfinite(batch_loss):
                    raise NumericError("non-finite training loss %r" % batch_loss)
            except NumericError as err:
                _dump_diagnostics(out_dir, task.step, update, batch, str(err))
                raise
            adam.step(state.params, grads, lr)

        model.save_checkpoint(state.params, out_dir / ("step_%03d.cmfk" % task.step))
        report, final_stats = evaluate_step(state.params, test_samples, task,
                                            config.model)
        state.reports.append(report)

    summary = metrics.aggregate_continual(state.reports, tasks)
    summary["final_pooled"] = _pooled_groups(final_stats, tasks)
    write_steps_csv(state.reports, out_dir / "steps.csv")
    write_summary_json(summary, out_dir / "summary.json")
    series = {out_dir.name: plots.series_from_reports(state.reports, tasks)}
    plots.plot_curves(series, out_dir / "curves.svg")
    return summary


# -- gradient self-check -----------------------------------------------------


FD_STEP = 1e-6
GRAD_TOLERANCE = 1e-4


def _gradcheck_setup(config: ExperimentConfig, rng: np.random.Generator):
    """A small expanded model plus one labeled sample with history.

    The model is built for two old classes, expanded by one, and
    jittered so distillation terms have nonzero gradients. The frozen
    pre-expansion model provides old predictions and pseudo-labels.
    """
    grid = 8
    palette = make_palette(3, 2, channels=IMAGE_CHANNELS)
    geometry = SceneGeometry(height=grid, width=grid, max_instances=2)
    sample = None
    for _ in range(10):
        scene_seed = int(rng.integers(0, 2 ** 31))
        try:
            sample = generate_scene(scene_seed, palette, {1, 2, 3}, geometry)
            break
        except PlacementError:
            continue
    if sample is None:
        raise PlacementError("could not place a gradcheck scene in 10 tries")

    old_params = model.init_params(rng, n_queries=config.model.n_queries,
                                   dim=config.model.dim, channels=IMAGE_CHANNELS,
                                   class_ids=[1, 2],
                                   mask_activation=config.model.mask_activation)
    params = model.expand_classifier(old_params, [3], rng)
    for tensor in params.tensors.values():
        tensor += rng.normal(0.0, 0.05, size=tensor.shape)

    old_preds, _ = model.forward(old_params, sample.image)
    mined = distill.generate_pseudo_labels(old_preds, sample.segments)
    room = config.model.n_queries - len(sample.segments)
    labels = distill.merge_labels(sample.segments, mined[:max(room, 0)])
    return params, old_params, old_preds, sample.image, labels


def gradcheck(config: ExperimentConfig, probes: int, seed: int = 0) -> dict:
    """Compare analytic and finite-difference gradients per component.

    The assignment and pseudo-labels are frozen at the base point while
    parameters are perturbed; relative error uses max(1, |a|, |fd|) as
    the scale. The frozen model enters every term as a constant, so its
    gradient is structurally zero and reported as such.
    """
    if probes < 1:
        raise ConfigError("probes must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    params, old_params, old_preds, image, labels = _gradcheck_setup(config, rng)
    preds0, _ = model.forward(params, image)
    sigma = objective.match(preds0, labels)
    weights = LossWeights(alpha=config.losses.alpha, gamma=config.losses.gamma,
                          lambda_mask=config.losses.lambda_mask,
                          no_object_weight=config.losses.no_object_weight,
                          lambda_distill=resolve_lambda_distill(config, 3))

    def seg_component(which):
        def value_and_grads(p):
            preds, cache = model.forward(p, image)
            value, d_probs, d_logits = objective.seg_component_grads(
                preds, labels, sigma, weights, which)
            return value, (d_probs, d_logits, cache)
        return value_and_grads

    def distill_component(grad_fn):
        def value_and_grads(p):
            preds, cache = model.forward(p, image)
            value, d_probs = grad_fn(preds, old_preds)
            return value, (d_probs, np.zeros_like(preds.mask_logits), cache)
        return value_and_grads

    def end_to_end(p):
        preds, cache = model.forward(p, image)
        value, d_probs, d_logits = objective.seg_component_grads(
            preds, labels, sigma, weights, "total")
        mode = config.losses.distill_mode
        if mode != "none" and weights.lambda_distill != 0.0:
            grad_fn = distill.kd_loss_grads if mode == "kd" else distill.ad_loss_grads
            extra, d_extra = grad_fn(preds, old_preds)
            value += weights.lambda_distill * extra
            d_probs = d_probs + weights.lambda_distill * d_extra
        return value, (d_probs, d_logits, cache)

    components = {
        "focal": seg_component("focal"),
        "dice": seg_component("dice"),
        "mask_ce": seg_component("mask_ce"),
        "kd": distill_component(distill.kd_loss_grads),
        "adaptive_distill": distill_component(distill.ad_loss_grads),
        "end_to_end": end_to_end,
    }
    lambda_explicit_zero = config.losses.lambda_distill == 0.0

    names = sorted(params.tensors)
    report = {"components": {}, "old_model_grad": 0.0}
    worst = 0.0
    for label, fn in components.items():
        if lambda_explicit_zero and label in ("kd", "adaptive_distill"):
            report["components"][label] = {"inactive": True}
            continue
        value, (d_probs, d_logits, cache) = fn(params)
        grads = model.backward(params, cache, d_probs, d_logits)
        max_err = 0.0
        for _ in range(probes):
            name = names[int(rng.integers(len(names)))]
            idx = int(rng.integers(params.tensors[name].size))
            analytic = float(grads[name].flat[idx])

            def value_at(offset):
                shifted = params.copy()
                shifted.tensors[name].flat[idx] += offset
                return fn(shifted)[0]

            fd = (value_at(FD_STEP) - value_at(-FD_STEP)) / (2.0 * FD_STEP)
            err = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
            max_err = max(max_err, err)
        report["components"][label] = {"max_rel_err": max_err, "probes": probes}
        worst = max(worst, max_err)
    report["passed"] = worst < GRAD_TOLERANCE
    report["max_rel_err"] = worst
    return report


# -- oracle self-checks ------------------------------------------------------


def oracle(subject: str, trials: int, seed: int = 0) -> dict:
    """Cross-check fast implementations against exhaustive references."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if subject == "match":
        return _oracle_match(trials, seed)
    if subject == "pq":
        return _oracle_pq(trials, seed)
    raise ConfigError("oracle subject must be 'match' or 'pq'")


def _oracle_match(trials: int, seed: int) -> dict:
    failures = []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 6, trial]))
        n_outputs = int(rng.integers(1, 8))
        n_labels = int(rng.integers(1, n_outputs + 1))
        cost = -rng.uniform(0.0, 1.0, size=(n_outputs, n_labels))
        if trial % 3 == 0:
            cost = np.round(cost, 1)  # force exact ties regularly
        fast = objective.match_costs(cost, n_outputs)
        best_total, slow = objective.brute_force_match(cost)
        fast_total = sum(cost[i, j] for j, i in enumerate(fast))
        # canonical tie-breaking can land an ulp away from the raw minimum
        tol = objective.MATCH_TIE_TOL * (1.0 + abs(best_total))
        if fast != slow or abs(fast_total - best_total) > tol:
            failures.append({"trial": trial, "fast": list(fast), "slow": list(slow)})
    return {"subject": "match", "trials": trials, "failures": failures,
            "passed": not failures}


def _random_eval_scene(rng: np.random.Generator, side: int = 8,
                       n_classes: int = 3, max_segments: int = 5):
    order = rng.permutation(side * side)
    segments = []
    cursor = 0
    for _ in range(int(rng.integers(0, max_segments + 1))):
        size = int(rng.integers(1, 10))
        if cursor + size > order.size:
            break
        mask = np.zeros(side * side, dtype=bool)
        mask[order[cursor:cursor + size]] = True
        cursor += size
        segments.append(Segment(class_id=int(rng.integers(1, n_classes + 1)),
                                mask=mask.reshape(side, side)))
    return segments


def _oracle_pq(trials: int, seed: int) -> dict:
    failures = []
    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7, trial]))
        preds = _random_eval_scene(rng)
        gts = _random_eval_scene(rng)
        fast = metrics.accumulate_pq(preds, gts, metrics.PqStats())
        slow = metrics.brute_force_pq(preds, gts)
        same = set(fast.per_class) == set(slow.per_class)
        if same:
            for c in fast.per_class:
                f, s = fast.per_class[c], slow.per_class[c]
                if (f.tp, f.fp, f.fn) != (s.tp, s.fp, s.fn) \
                        or abs(f.tp_iou_sum - s.tp_iou_sum) > 1e-12:
                    same = False
        if not same:
            failures.append({"trial": trial})
    return {"subject": "pq", "trials": trials, "failures": failures,
            "passed": not failures}
