"""Highlight Likelihood: per-crop probabilities accumulated over the audience."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Cuboid
from .errors import ShapeError, UsageError
from .nn import ModelParams, predict


@dataclass(frozen=True)
class CropScore:
    grid_x: int
    grid_y: int
    t0: int
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise UsageError(f"crop probability must lie in [0, 1], got {self.p}")


@dataclass(frozen=True)
class HlStep:
    time_s: float
    hl_sum: float
    hl_mean: float
    n_crops: int


@dataclass(frozen=True)
class HlTimeline:
    steps: tuple[HlStep, ...]

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class SliceScore:
    slice_start_s: float
    aggregate: float  # sum of per-step hl_mean in the slice (ranking key)
    hl_sum: float  # total probability mass of all crops in the slice
    n_crops: int

    @property
    def hl_mean(self) -> float:
        return self.hl_sum / self.n_crops if self.n_crops else 0.0


Scorer = Callable[[np.ndarray], float]


def score_crops(
    model: ModelParams | Scorer, cuboids: Sequence[Cuboid], threads: int = 1
) -> list[CropScore]:
    """Positive-class probability of every cuboid, in input order.

    ``model`` is either trained parameters (infer-mode softmax output 1) or
    any callable mapping cuboid data to a probability.
    """
    if not cuboids:
        raise UsageError("score_crops needs at least one cuboid")
    if isinstance(model, ModelParams):
        shape = model.input_shape
        for c in cuboids:
            if tuple(c.data.shape) != shape:
                raise ShapeError(f"cuboid shape {tuple(c.data.shape)} != model input {shape}")
        scorer = lambda data: float(predict(model, data)[1])  # noqa: E731
    else:
        scorer = model

    def one(c: Cuboid) -> CropScore:
        return CropScore(c.grid_x, c.grid_y, c.t0, float(scorer(c.data)))

    if threads <= 1:
        return [one(c) for c in cuboids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, cuboids))


def hl_accumulate(scores: Iterable[CropScore], fps: float) -> HlTimeline:
    """Sum and mean of ``p`` per start frame, summed in (grid_y, grid_x) order."""
    groups: dict[int, list[CropScore]] = defaultdict(list)
    for s in scores:
        groups[s.t0].append(s)
    steps = []
    for t0 in sorted(groups):
        members = sorted(groups[t0], key=lambda s: (s.grid_y, s.grid_x))
        total = 0.0
        for s in members:
            total += s.p
        steps.append(HlStep(t0 / fps, total, total / len(members), len(members)))
    return HlTimeline(tuple(steps))


def slice_aggregate(timeline: HlTimeline, slice_s: float = 10.0) -> list[SliceScore]:
    """Bucket steps by ``floor(time / slice_s)``; empty buckets get aggregate 0."""
    if not slice_s > 0:
        raise UsageError(f"slice length must be positive, got {slice_s}")
    if not timeline.steps:
        return []
    buckets: dict[int, list[HlStep]] = defaultdict(list)
    for step in timeline.steps:
        buckets[math.floor(step.time_s / slice_s)].append(step)
    out = []
    for b in range(0, max(buckets) + 1):
        members = buckets.get(b, [])
        agg = 0.0
        mass = 0.0
        for step in members:
            agg += step.hl_mean
            mass += step.hl_sum
        out.append(SliceScore(b * slice_s, agg, mass, sum(s.n_crops for s in members)))
    return out


def rank_slices(slices: Sequence[SliceScore], k: int) -> list[SliceScore]:
    """Top-k slices by aggregate, earlier slices first on ties."""
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    return sorted(slices, key=lambda s: (-s.aggregate, s.slice_start_s))[:k]


def write_timeline_csv(path, slices: Sequence[SliceScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slice_start_s", "hl_sum", "hl_mean", "n_crops", "aggregate"])
        for s in slices:
            w.writerow([repr(float(s.slice_start_s)), repr(s.hl_sum), repr(s.hl_mean), s.n_crops, repr(s.aggregate)])


def write_crops_csv(path, scores: Sequence[CropScore], fps: float, threshold: float = 0.5) -> None:
    """Per-crop dots: start time, grid cell, probability and the binary decision."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t0_s", "grid_x", "grid_y", "p", "decision"])
        for s in sorted(scores, key=lambda s: (s.t0, s.grid_y, s.grid_x)):
            w.writerow([repr(s.t0 / fps), s.grid_x, s.grid_y, repr(s.p), int(s.p >= threshold)])
