"""Two-sample distances between point clouds: RBF-kernel MMD and sliced W2."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricRecord:
    name: str
    value: float
    n_a: int
    n_b: int
    seed: int
    bandwidth: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.name} is not finite: {self.value}")


def _flat(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr.reshape(arr.shape[0], -1)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(a, b) -> float:
    """Median pairwise Euclidean distance over the pooled sample."""
    pool = np.concatenate([_flat(a), _flat(b)])
    d = _sqdist(pool, pool)
    iu = np.triu_indices(len(pool), k=1)
    return float(np.sqrt(np.median(d[iu])))


def mmd_rbf(a, b, bandwidth: float | str = "median", biased: bool = False) -> float:
    """Squared MMD with kernel ``exp(-|x - y|^2 / (2 h^2))``.

    The default is the unbiased U-statistic (diagonals dropped), which can dip
    below zero; ``biased=True`` gives the V-statistic, always >= 0.
    """
    a, b = _flat(a), _flat(b)
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise ValueError("mmd_rbf needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    if not h > 0:
        raise ValueError(f"degenerate kernel bandwidth {h}")
    g = -0.5 / (h * h)
    kaa = np.exp(g * _sqdist(a, a))
    kbb = np.exp(g * _sqdist(b, b))
    kab = np.exp(g * _sqdist(a, b))
    if biased:
        return float(kaa.mean() + kbb.mean() - 2.0 * kab.mean())
    saa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    sbb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * kab.mean())


def _w2_1d(u: np.ndarray, v: np.ndarray) -> float:
    u = np.sort(u)
    v = np.sort(v)
    if len(u) != len(v):
        k = max(len(u), len(v))
        q = (np.arange(k) + 0.5) / k
        u = np.quantile(u, q)
        v = np.quantile(v, q)
    return float(np.sqrt(np.mean((u - v) ** 2)))


def sliced_wasserstein(a, b, n_projections: int = 128, seed: int = 0) -> float:
    """Mean 1D 2-Wasserstein distance over random unit directions."""
    a, b = _flat(a), _flat(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sliced_wasserstein needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = a @ dirs.T
    pb = b @ dirs.T
    return float(np.mean([_w2_1d(pa[:, k], pb[:, k]) for k in range(n_projections)]))


def nearest_mode_fractions(samples, centers) -> np.ndarray:
    """Share of ``samples`` whose nearest centre is each entry of ``centers``."""
    s = _flat(samples)
    idx = _sqdist(s, np.asarray(centers, dtype=np.float64)).argmin(axis=1)
    return np.bincount(idx, minlength=len(centers)) / len(s)
