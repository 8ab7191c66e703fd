"""Class-incremental task schedules and dataset slicing.

A protocol chunks an ordered list of class ids into an initial task
plus equal-sized increments. Slicing assigns training samples to steps
either disjointly (each sample belongs to exactly one step) or with
overlap (a sample appears at every step that introduces one of its
classes); in both modes annotations are filtered to the classes the
current step introduces, so earlier classes are unlabeled background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .synthdata import SceneSample, filter_annotations


@dataclass(frozen=True)
class TaskSpec:
    """One step: the classes it introduces and everything seen so far."""

    step: int
    new_classes: tuple[int, ...]
    seen_classes: tuple[int, ...]


@dataclass(frozen=True)
class ProtocolSpec:
    ordering: tuple[int, ...]
    initial: int
    increment: int
    overlap_mode: str = "overlap"  # or "disjoint"


def make_ordering(class_ids: list[int], shuffle_seed: int | None = None) -> tuple[int, ...]:
    """Ascending ids by default; a seed applies a deterministic shuffle."""
    ordering = sorted(class_ids)
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        ordering = [ordering[i] for i in rng.permutation(len(ordering))]
    return tuple(ordering)


def build_protocol(spec: ProtocolSpec) -> list[TaskSpec]:
    """Chunk the ordering into tasks; sizes must tile it exactly."""
    total = len(spec.ordering)
    if len(set(spec.ordering)) != total:
        raise ConfigError("class ordering contains duplicates")
    if spec.overlap_mode not in ("overlap", "disjoint"):
        raise ConfigError("overlap_mode must be 'overlap' or 'disjoint', got %r"
                          % (spec.overlap_mode,))
    if not 1 <= spec.initial <= total:
        raise ConfigError("initial task size %d out of range for %d classes"
                          % (spec.initial, total))
    remaining = total - spec.initial
    if remaining == 0:
        if spec.increment < 0:
            raise ConfigError("increment must be non-negative")
        sizes = [spec.initial]
    else:
        if spec.increment < 1:
            raise ConfigError("increment must be positive when classes remain")
        if remaining % spec.increment != 0:
            raise ConfigError(
                "cannot split %d classes as %d + k*%d"
                % (total, spec.initial, spec.increment))
        sizes = [spec.initial] + [spec.increment] * (remaining // spec.increment)

    tasks = []
    offset = 0
    for step, size in enumerate(sizes):
        new = spec.ordering[offset:offset + size]
        offset += size
        tasks.append(TaskSpec(step=step, new_classes=new,
                              seen_classes=spec.ordering[:offset]))
    return tasks


def slice_dataset(samples: list[SceneSample], task: TaskSpec,
                  overlap_mode: str) -> list[SceneSample]:
    """Select and relabel training samples for one step.

    Disjoint mode assigns each sample to the single step that introduces
    its smallest present class; overlap mode includes every sample that
    contains at least one of the step's new classes. Either way the
    returned samples carry annotations only for the new classes.
    """
    new = set(task.new_classes)
    sliced = []
    for sample in samples:
        present = sample.present_classes()
        if not present:
            continue
        if overlap_mode == "disjoint":
            owner = min(present)
            if owner not in new:
                continue
        elif overlap_mode == "overlap":
            if not (present & new):
                continue
        else:
            raise ConfigError("overlap_mode must be 'overlap' or 'disjoint', got %r"
                              % (overlap_mode,))
        sliced.append(filter_annotations(sample, new))
    return sliced
