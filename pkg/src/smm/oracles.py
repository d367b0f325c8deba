"""Closed-form references for the score-mismatching objective.

Everything here works on finite-support distributions where the optimal
score net can be written down exactly, so trained networks and training
claims can be checked against numbers that do not come from training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, collect_grads, zero_grads
from .networks import MLPScoreArch, ScoreNet
from .schedule import NoiseSchedule
from .trainer import match_term, mismatch_term

# exp() of anything below this is zero in float64
_LOG_TINY = float(np.log(np.finfo(np.float64).tiny))


class PosteriorUnderflow(ArithmeticError):
    """The query point is too far from every support point to weigh them."""


@dataclass(frozen=True)
class DiscreteDistribution:
    """Finite-support probability mass in one or two dimensions.

    An empty support (zero points, zero mass) stands for "this population is
    absent" and is allowed.
    """

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        sup = np.asarray(self.support, dtype=np.float64)
        if sup.ndim == 1:
            sup = sup[:, None]
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if sup.ndim != 2 or len(sup) != len(probs):
            raise ValueError(f"support {sup.shape} and probs {probs.shape} do not line up")
        if np.any(probs < 0):
            raise ValueError("probabilities must be non-negative")
        if len(probs) and abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        if len(np.unique(sup, axis=0)) != len(sup):
            raise ValueError("support points must be distinct")
        sup.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def delta(cls, point) -> DiscreteDistribution:
        return cls(np.atleast_1d(np.asarray(point, dtype=np.float64))[None, :], np.ones(1))

    @classmethod
    def empty(cls, dim: int = 1) -> DiscreteDistribution:
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def __len__(self) -> int:
        return len(self.probs)

    def canonical(self) -> DiscreteDistribution:
        """Same distribution with support sorted lexicographically."""
        order = np.lexsort(self.support.T[::-1])
        return DiscreteDistribution(self.support[order], self.probs[order])

    def same_as(self, other: DiscreteDistribution) -> bool:
        a, b = self.canonical(), other.canonical()
        return a.support.shape == b.support.shape and np.array_equal(a.support, b.support) and np.array_equal(a.probs, b.probs)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` draws by inverse CDF over the canonical ordering."""
        if len(self) == 0:
            raise ValueError("cannot sample from an empty distribution")
        c = self.canonical()
        cdf = np.cumsum(c.probs)
        idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        return c.support[np.minimum(idx, len(c) - 1)]


def _dims(p_data: DiscreteDistribution, p_g: DiscreteDistribution) -> int:
    if p_data.dim != p_g.dim:
        raise ValueError(f"p_data is {p_data.dim}-D but p_g is {p_g.dim}-D")
    return p_data.dim


def _optimal_batch(p_data, p_g, y: np.ndarray, sigma: float) -> np.ndarray:
    """Optimal prediction at each row of ``y`` (shape (m, d))."""
    if not sigma > 0:
        raise ValueError(f"noise scale must be positive, got {sigma}")
    d = _dims(p_data, p_g)
    y = np.asarray(y, dtype=np.float64).reshape(-1, d)

    def logw(dist):
        if len(dist) == 0:
            return np.full((len(y), 0), -np.inf)
        sq = ((y[:, None, :] - dist.support[None]) ** 2).sum(-1)
        with np.errstate(divide="ignore"):
            return np.log(dist.probs)[None, :] - sq / (2.0 * sigma * sigma)

    lr, lf = logw(p_data), logw(p_g)
    both = np.concatenate([lr, lf], axis=1)
    if both.shape[1] == 0:
        raise ValueError("both populations are empty")
    top = both.max(axis=1)
    if np.any(top < _LOG_TINY):
        bad = int(np.argmax(top < _LOG_TINY))
        raise PosteriorUnderflow(f"posterior weight underflows at x_tilde={y[bad].tolist()} (sigma={sigma})")
    wr = np.exp(lr - top[:, None])
    wf = np.exp(lf - top[:, None])
    total = wr.sum(1) + wf.sum(1)
    if len(p_data) == 0:
        return np.zeros_like(y)
    # real points regress (x_tilde - x)/sigma, fake points regress E[eps3] = 0
    num = (wr[:, :, None] * (y[:, None, :] - p_data.support[None]) / sigma).sum(1)
    return num / total[:, None]


def optimal_score_posterior(p_data, p_g, x_tilde, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """L2-optimal score-net output at ``x_tilde`` for real/fake populations.

    Real point ``x`` contributes the target ``(x_tilde - x)/sigma_t`` with
    weight ``p_data(x) N(x_tilde; x, sigma_t^2)``; fake points contribute the
    mean of an independent noise draw, zero, with weight from ``p_g``.
    """
    sigma = schedule.sigma(t)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    out = _optimal_batch(p_data, p_g, x_tilde.reshape(1, -1), sigma)
    return out[0]


def prop1_objective(s, p_data, p_g, x_tilde, sigma: float) -> float:
    """Posterior-weighted squared error of prediction ``s`` at ``x_tilde``.

    Expected loss over which population and support point produced
    ``x_tilde``, normalised by the total weight. The fake term uses
    ``E|s - eps3|^2 = |s|^2 + d``.
    """
    d = _dims(p_data, p_g)
    s = np.asarray(s, dtype=np.float64).reshape(d)
    x_tilde = np.asarray(x_tilde, dtype=np.float64).reshape(d)
    total = 0.0
    norm = 0.0
    for x, p in zip(p_data.support, p_data.probs):
        w = p * np.exp(-((x_tilde - x) ** 2).sum() / (2 * sigma * sigma))
        total += w * float(((s - (x_tilde - x) / sigma) ** 2).sum())
        norm += w
    for x, p in zip(p_g.support, p_g.probs):
        w = p * np.exp(-((x_tilde - x) ** 2).sum() / (2 * sigma * sigma))
        total += w * (float((s * s).sum()) + d)
        norm += w
    return total / norm


def brute_force_prop1(p_data, p_g, x_tilde, t: int, schedule: NoiseSchedule, span: float = 50.0, rounds: int = 40) -> float:
    """1D minimiser of ``prop1_objective`` by repeated grid refinement.

    Each round evaluates a 41-point grid and zooms to the two cells around
    the best point; no closed form is used.
    """
    if _dims(p_data, p_g) != 1:
        raise ValueError("brute-force search is one-dimensional")
    sigma = schedule.sigma(t)
    lo, hi = -span, span
    best = 0.0
    for _ in range(rounds):
        grid = np.linspace(lo, hi, 41)
        vals = [prop1_objective(g, p_data, p_g, x_tilde, sigma) for g in grid]
        k = int(np.argmin(vals))
        best = float(grid[k])
        step = grid[1] - grid[0]
        lo, hi = best - step, best + step
    return best


def high_posterior_mask(p_data, p_g, grid, sigma: float, rel: float = 1e-4) -> np.ndarray:
    """Grid points whose total (real + fake) density is at least ``rel`` of the maximum."""
    d = _dims(p_data, p_g)
    g = np.asarray(grid, dtype=np.float64).reshape(-1, d)
    dens = np.zeros(len(g))
    for dist in (p_data, p_g):
        for x, p in zip(dist.support, dist.probs):
            dens += p * np.exp(-((g - x) ** 2).sum(1) / (2 * sigma * sigma))
    return dens >= rel * dens.max()


def _predict(S, y: np.ndarray, t: int) -> np.ndarray:
    if isinstance(S, ScoreNet):
        return S(Tensor(y), t, frozen=True).data
    return np.asarray(S(y, t), dtype=np.float64)


def verify_prop1(S, p_data, p_g, t: int, schedule: NoiseSchedule, grid, rel: float = 1e-4) -> float:
    """Largest distance between ``S`` and the optimal prediction over the grid.

    Only grid points with posterior weight at least ``rel`` of the maximum
    are compared. ``S`` is a ``ScoreNet`` or any callable ``(y, t) -> array``.
    """
    d = _dims(p_data, p_g)
    sigma = schedule.sigma(t)
    g = np.asarray(grid, dtype=np.float64).reshape(-1, d)
    g = g[high_posterior_mask(p_data, p_g, g, sigma, rel)]
    ref = _optimal_batch(p_data, p_g, g, sigma)
    got = _predict(S, g, t)
    return float(np.linalg.norm(got - ref, axis=1).max())


def train_score_against(
    p_data: DiscreteDistribution,
    p_g: DiscreteDistribution,
    t: int,
    schedule: NoiseSchedule,
    steps: int = 20000,
    batch: int = 128,
    lr: float = 1e-3,
    hidden: tuple[int, ...] = (64, 64),
    seed: int = 0,
) -> ScoreNet:
    """Fit a score net at a fixed step with the generator replaced by ``p_g``.

    Each iteration takes one Adam step on the real-data term and one on the
    fake-data term, as in full training.
    """
    d = _dims(p_data, p_g)
    S = ScoreNet(MLPScoreArch(dim=d, hidden=hidden), seed=seed)
    state = AdamState.for_params(S.params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11CE]))
    for _ in range(steps):
        x = p_data.sample(batch, rng)
        fake = p_g.sample(batch, rng)
        e1, e2, e3 = (rng.standard_normal((batch, d)) for _ in range(3))
        for loss in (
            lambda: match_term(S, x, e1, t, schedule),
            lambda: mismatch_term(S, fake, e2, e3, t, schedule),
        ):
            zero_grads(S.params.values())
            backward(loss())
            adam_step(S.params, collect_grads(S.params), state)
    zero_grads(S.params.values())
    return S


def noise_cancellation_run(x, steps: int, lr: float, sigma: float, seed: int = 0, noise_offset: float = 0.0) -> np.ndarray:
    """SGD on ``|y - (x + eps*sigma)|^2`` with a fresh ``eps`` every step.

    ``noise_offset`` shifts the noise mean (``eps + offset``) for the biased
    control. ``y`` starts from a standard normal draw.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    y = rng.standard_normal(x.shape)
    for _ in range(steps):
        target = x + (rng.standard_normal(x.shape) + noise_offset) * sigma
        y -= lr * 2.0 * (y - target)
    return y


def noise_cancellation_experiment(x, steps: int, lr: float, sigma: float, seed: int = 0, noise_offset: float = 0.0) -> float:
    """Final ``|y - x|_inf`` after regressing onto noisy copies of ``x``."""
    y = noise_cancellation_run(x, steps, lr, sigma, seed, noise_offset)
    return float(np.max(np.abs(y - np.asarray(x, dtype=np.float64))))


def theorem1_bound_estimate(
    p_data: DiscreteDistribution,
    p_g: DiscreteDistribution,
    t: int,
    schedule: NoiseSchedule,
    mc_samples: int = 10000,
    seed: int = 0,
) -> tuple[float, bool]:
    """Monte-Carlo generator loss under the optimal score net.

    Draws ``x ~ p_g`` and ``eps4``, evaluates ``|S*(x + sigma eps4) - eps4|^2``
    with ``S*`` from ``optimal_score_posterior``. Returns the mean and whether
    ``p_g`` equals ``p_data``. Draws follow the canonical support order, so
    relabelling support points does not change the estimate.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    d = _dims(p_data, p_g)
    sigma = schedule.sigma(t)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E0]))
    x = p_g.sample(mc_samples, rng)
    eps = rng.standard_normal((mc_samples, d))
    pred = _optimal_batch(p_data.canonical(), p_g.canonical(), x + sigma * eps, sigma)
    value = float(((pred - eps) ** 2).sum(1).mean())
    return value, p_data.same_as(p_g)
