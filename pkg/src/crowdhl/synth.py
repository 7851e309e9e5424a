"""Synthetic crowd cuboids for desk-scale end-to-end runs.

Each cuboid is a static pseudo-random "crowd" texture plus per-frame motion:

* calm: independent per-pixel noise of amplitude ``calm_amplitude``;
* excited: the same noise plus a vertically travelling sinusoid of amplitude
  ``excited_amplitude`` whose phase advances every frame (cheering motion).

Draw order from ``SplitMix64(seed)``, per channel then shared:

1. per channel c: orientation ``U(0, pi)``, frequency factor ``U(0.75, 1.25)``,
   phase ``U(0, 2 pi)``, then H*W texture noise values ``U(-1, 1)``;
2. wave wavelength ``U(6, 12)`` px, phase step ``U(0.35 pi, 0.65 pi)`` per
   frame, start phase ``U(0, 2 pi)`` (drawn for both classes);
3. C*H*W*T frame noise values ``U(-1, 1)`` in (c, h, w, t) order.

Dataset seeds: sample k (positives first, then negatives) uses the k-th
output of ``SplitMix64(master_seed)`` as its seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Cuboid, LabeledSample, dataset_bytes
from .errors import UsageError
from .rng import SplitMix64

DEFAULT_DIMS = (1, 32, 32, 10)


@dataclass(frozen=True)
class SynthConfig:
    dims: tuple[int, int, int, int] = DEFAULT_DIMS
    cls: str = "calm"
    seed: int = 0
    calm_amplitude: float = 0.02
    excited_amplitude: float = 0.25
    base_frequency: float = 3.0  # texture cycles across the crop

    def __post_init__(self):
        if self.cls not in ("calm", "excited"):
            raise UsageError(f"class must be 'calm' or 'excited', got {self.cls!r}")
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise UsageError(f"dims must be four positive extents (C, H, W, T), got {self.dims}")
        for amp in (self.calm_amplitude, self.excited_amplitude):
            if not 0.0 <= amp <= 1.0:
                raise UsageError(f"amplitudes must lie in [0, 1], got {amp}")
        if not self.excited_amplitude > self.calm_amplitude:
            raise UsageError("excited amplitude must exceed calm amplitude")


def gen_cuboid(cfg: SynthConfig) -> Cuboid:
    c, h, w, t = cfg.dims
    rng = SplitMix64(cfg.seed)
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]

    texture = np.empty((c, h, w))
    for ch in range(c):
        theta, freq, phase = rng.uniform(3)
        theta *= np.pi
        freq = cfg.base_frequency * (0.75 + 0.5 * freq)
        phase *= 2 * np.pi
        coord = rows * np.cos(theta) + cols * np.sin(theta)
        stripes = np.sin(2 * np.pi * freq * coord / w + phase)
        noise = rng.uniform_range(-1.0, 1.0, h * w).reshape(h, w)
        texture[ch] = 0.5 + 0.15 * stripes + 0.1 * noise

    wavelength = rng.uniform_range(6.0, 12.0, 1)[0]
    step = rng.uniform_range(0.35 * np.pi, 0.65 * np.pi, 1)[0]
    start = rng.uniform_range(0.0, 2 * np.pi, 1)[0]
    jitter = rng.uniform_range(-1.0, 1.0, c * h * w * t).reshape(c, h, w, t)

    cube = texture[..., None] + cfg.calm_amplitude * jitter
    if cfg.cls == "excited":
        frames = np.arange(t, dtype=np.float64)
        wave = np.sin(2 * np.pi * rows[..., None] / wavelength - step * frames[None, None, :] + start)  # (H, 1, T)
        cube = cube + cfg.excited_amplitude * wave[None]
    return Cuboid(np.clip(cube, 0.0, 1.0).astype(np.float32))


def mean_abs_temporal_difference(data: np.ndarray) -> float:
    """Mean |x[..., t+1] - x[..., t]| over a (C, H, W, T) cuboid."""
    return float(np.mean(np.abs(np.diff(data.astype(np.float64), axis=-1))))


def gen_samples(
    n_pos: int,
    n_neg: int,
    seed: int,
    dims: Sequence[int] = DEFAULT_DIMS,
    calm_amplitude: float = 0.02,
    excited_amplitude: float = 0.25,
) -> list[LabeledSample]:
    """Excited cuboids labeled 1 followed by calm cuboids labeled 0."""
    if n_pos < 1 or n_neg < 1:
        raise UsageError(f"need at least one sample per class, got {n_pos} positive / {n_neg} negative")
    master = SplitMix64(seed)
    dims = tuple(int(d) for d in dims)
    out = []
    for k in range(n_pos + n_neg):
        label = 1 if k < n_pos else 0
        cfg = SynthConfig(
            dims=dims,
            cls="excited" if label else "calm",
            seed=master.next_u64(),
            calm_amplitude=calm_amplitude,
            excited_amplitude=excited_amplitude,
        )
        out.append(LabeledSample(gen_cuboid(cfg), label))
    return out


def gen_dataset(n_pos: int, n_neg: int, seed: int, dims: Sequence[int] = DEFAULT_DIMS) -> bytes:
    """CUB1 bytes of :func:`gen_samples`."""
    return dataset_bytes(gen_samples(n_pos, n_neg, seed, dims))
