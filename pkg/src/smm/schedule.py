"""Noise schedule and the three corruption kinds.

Steps are 1-based throughout: ``t`` ranges over ``1..T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, add, batch_scale, mul, scale


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def sigma(self, t):
        """Noise scale at step ``t``; an int gives a float, an array gives an array."""
        self.check_step(t)
        if np.ndim(t) == 0:
            return float(self.sigmas[int(t) - 1])
        return self.sigmas[np.asarray(t) - 1]

    def alpha_bar(self, t):
        self.check_step(t)
        if np.ndim(t) == 0:
            return float(self.alpha_bars[int(t) - 1])
        return self.alpha_bars[np.asarray(t) - 1]

    def check_step(self, t) -> None:
        t_arr = np.asarray(t)
        if t_arr.size == 0 or t_arr.min() < 1 or t_arr.max() > self.T:
            raise ValueError(f"diffusion step {t} outside 1..{self.T}")


def build_schedule(T: int = 10, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = beta_min + (beta_max - beta_min) * np.arange(T, dtype=np.float64) / (T - 1)
    alpha_bars = np.cumprod(1.0 - betas)
    sigmas = np.sqrt(1.0 - alpha_bars)
    for arr in (betas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), betas, alpha_bars, sigmas)


# ----------------------------------------------------------------- corruption


@dataclass(frozen=True)
class ZeroMean:
    pass


@dataclass(frozen=True)
class NonZeroMean:
    pass


@dataclass(frozen=True)
class SpatialDiffusion:
    ratio: float = 0.1
    steps_per_t: int = 1

    def __post_init__(self):
        if not (0.0 < self.ratio <= 0.25):
            raise ValueError(f"spatial ratio must lie in (0, 0.25], got {self.ratio}")
        if self.steps_per_t < 1:
            raise ValueError("steps_per_t must be >= 1")


CorruptionKind = ZeroMean | NonZeroMean | SpatialDiffusion


def init_center_field(height: int, width: int) -> np.ndarray:
    if height < 1 or width < 1:
        raise ValueError(f"field extent must be positive, got {height}x{width}")
    c = np.zeros((height, width), dtype=np.float64)
    c[height // 2, width // 2] = 1.0
    return c


def spatial_field_step(field: np.ndarray, ratio: float) -> np.ndarray:
    """One synchronous update ``c += ratio * sum(neighbour - c)`` on a 4-neighbourhood.

    Neighbours outside the grid contribute no flux, so the total is conserved.
    """
    if not (0.0 < ratio <= 0.25):
        raise ValueError(f"ratio must lie in (0, 0.25], got {ratio}")
    c = np.asarray(field, dtype=np.float64)
    flux = np.zeros_like(c)
    dv = c[1:, :] - c[:-1, :]
    flux[:-1, :] += dv
    flux[1:, :] -= dv
    dh = c[:, 1:] - c[:, :-1]
    flux[:, :-1] += dh
    flux[:, 1:] -= dh
    return c + ratio * flux


@lru_cache(maxsize=64)
def _evolved_field(height: int, width: int, ratio: float, steps: int) -> np.ndarray:
    c = init_center_field(height, width)
    for _ in range(steps):
        c = spatial_field_step(c, ratio)
    c.setflags(write=False)
    return c


def corruption_field(height: int, width: int, t: int, kind: SpatialDiffusion) -> np.ndarray:
    """Centre-seeded field evolved ``t * steps_per_t`` times."""
    return _evolved_field(height, width, float(kind.ratio), int(t) * kind.steps_per_t)


def noise_term(eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    """``eps * sigma_t``; ``t`` may be one step or one step per sample."""
    sigma = schedule.sigma(t)
    if np.ndim(sigma) == 0:
        return scale(eps, sigma)
    return batch_scale(eps, np.asarray(sigma, dtype=eps.data.dtype))


def corrupt(x, eps, t, schedule: NoiseSchedule, kind: CorruptionKind = ZeroMean()) -> Tensor:
    """Noisy version of ``x`` at step ``t``; differentiable in ``x`` and ``eps``.

    ``t`` is a single step or an integer array with one step per sample.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if x.shape != eps.shape:
        raise ValueError(f"corrupt: x {x.shape} and eps {eps.shape} differ in shape")
    if np.ndim(t) and np.shape(t) != (x.shape[0],):
        raise ValueError(f"corrupt: per-sample steps {np.shape(t)} do not match batch {x.shape[0]}")
    if isinstance(kind, ZeroMean):
        return add(x, noise_term(eps, t, schedule))
    if isinstance(kind, NonZeroMean):
        ab = schedule.alpha_bar(t)
        if np.ndim(ab) == 0:
            shrunk = scale(x, np.sqrt(ab))
        else:
            shrunk = batch_scale(x, np.sqrt(ab).astype(x.data.dtype))
        return add(shrunk, noise_term(eps, t, schedule))
    if isinstance(kind, SpatialDiffusion):
        if x.ndim != 4:
            raise ValueError("spatial corruption needs NCHW image batches")
        h, w = x.shape[2], x.shape[3]
        steps = np.atleast_1d(t)
        fields = np.stack([corruption_field(h, w, int(s), kind) for s in steps])[:, None]
        sig = np.atleast_1d(schedule.sigma(t)).reshape(-1, 1, 1, 1)
        return add(x, mul(eps, Tensor((sig * fields).astype(x.data.dtype))))
    raise TypeError(f"unknown corruption kind {kind!r}")
