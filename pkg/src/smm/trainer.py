"""Score-mismatching training: losses, the three-update step, loop and sampling.

Each step draws ``t``, two latents and up to five noises from independent
named streams, then runs three optimizer applications in order:

1. score net on real data, regressing the injected noise;
2. score net on fake data, regressing an *independent* noise draw;
3. generator, through a frozen score net, regressing its own injected noise.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteError, Tensor, adam_step, backward, collect_grads, zero_grads
from .config import TrainingConfig
from .datasets import epoch_permutation, hflip, load_dataset, sample_synthetic
from .metrics import mmd_rbf, sliced_wasserstein
from .networks import (
    ConvGeneratorArch,
    ConvScoreArch,
    GeneratorNet,
    MLPGeneratorArch,
    MLPScoreArch,
    ScoreNet,
    arch_from_dict,
    arch_to_dict,
    init_params,
)
from .persistence import Checkpoint, MetricsLog, save_checkpoint
from .schedule import CorruptionKind, NoiseSchedule, ZeroMean, build_schedule, corrupt, noise_term

log = logging.getLogger(__name__)

STREAMS = ("z1", "z2", "eps1", "eps2", "eps3", "eps4", "eps5", "t", "flip")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, term: str):
        self.iteration = iteration
        self.term = term
        super().__init__(f"non-finite {term} at iteration {iteration}")


# ---------------------------------------------------------------------- RNG


class RngStreams:
    """Independent generators, one per named draw, seeded from (seed, name)."""

    def __init__(self, seed: int, names=STREAMS):
        self.seed = int(seed)
        self._gens = {}
        for name in names:
            tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")
            self._gens[name] = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, tag])))

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._gens[name]

    def state(self) -> dict:
        return {name: g.bit_generator.state for name, g in self._gens.items()}

    def set_state(self, state: dict) -> None:
        for name, st in state.items():
            self._gens[name].bit_generator.state = st


# ------------------------------------------------------------------- losses


def _as_t(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)


def _batch_sq(pred: Tensor, target) -> Tensor:
    """Batch mean of the per-sample squared L2 distance."""
    diff = pred - target
    return ad.scale(ad.sum_squares(diff), 1.0 / pred.shape[0])


def _score(S, x: Tensor, t: int, frozen: bool) -> Tensor:
    return S(x, t, frozen=frozen)


def match_term(S, x, eps1, t: int, schedule: NoiseSchedule, kind: CorruptionKind = ZeroMean()) -> Tensor:
    x, eps1 = _as_t(x), _as_t(eps1)
    return _batch_sq(_score(S, corrupt(x, eps1, t, schedule, kind), t, False), eps1)


def mismatch_term(S, fake, eps2, eps3, t: int, schedule: NoiseSchedule, kind: CorruptionKind = ZeroMean()) -> Tensor:
    fake = _as_t(fake).detach()
    eps2, eps3 = _as_t(eps2), _as_t(eps3)
    return _batch_sq(_score(S, corrupt(fake, eps2, t, schedule, kind), t, False), eps3)


def generator_term(S, fake: Tensor, eps4, t: int, schedule: NoiseSchedule, kind: CorruptionKind = ZeroMean()) -> Tensor:
    eps4 = _as_t(eps4)
    return _batch_sq(_score(S, corrupt(fake, eps4, t, schedule, kind), t, True), eps4)


def loss_match_true(S, x, eps1, t, schedule, kind: CorruptionKind = ZeroMean()) -> Tensor:
    """Real samples: the score net regresses the noise that was added."""
    return match_term(S, x, eps1, t, schedule, kind)


def loss_mismatch_fake(S, G, z1, eps2, eps3, t, schedule, kind: CorruptionKind = ZeroMean()) -> Tensor:
    """Fake samples: regress ``eps3``, drawn independently of the added ``eps2``.

    The generator output is a constant here; no gradient reaches its weights.
    """
    fake = G(_as_t(z1), frozen=True)
    return mismatch_term(S, fake, eps2, eps3, t, schedule, kind)


def loss_generator(
    S, G, z2, eps4, t, schedule, duplicate_fake: bool = False, eps5=None, kind: CorruptionKind = ZeroMean()
) -> Tensor:
    """Generator objective through a frozen score net.

    With ``duplicate_fake`` the same fake batch is corrupted a second time
    with ``eps5`` and both terms are summed.
    """
    fake = G(_as_t(z2))
    loss = generator_term(S, fake, eps4, t, schedule, kind)
    if duplicate_fake:
        if eps5 is None:
            raise ValueError("duplicate_fake needs eps5")
        loss = loss + generator_term(S, fake, eps5, t, schedule, kind)
    return loss


# variant 2: the score net sees (sample, noise) and predicts the noisy sample


def v2_match_term(S, x, eps1, t, schedule) -> Tensor:
    x, eps1 = _as_t(x), _as_t(eps1)
    noise = noise_term(eps1, t, schedule)
    return _batch_sq(S.paired(x, noise, t), x + noise)


def v2_mismatch_term(S, fake, eps2, eps3, t, schedule) -> Tensor:
    fake = _as_t(fake).detach()
    pred = S.paired(fake, noise_term(_as_t(eps2), t, schedule), t)
    return _batch_sq(pred, fake + noise_term(_as_t(eps3), t, schedule))


def v2_generator_term(S, fake: Tensor, eps4, t, schedule) -> Tensor:
    noise = noise_term(_as_t(eps4), t, schedule)
    return _batch_sq(S.paired(fake, noise, t, frozen=True), fake + noise)


# variant 3: the score net sees (clean, noisy) and predicts the noise


def v3_match_term(S, x, eps1, t, schedule) -> Tensor:
    x, eps1 = _as_t(x), _as_t(eps1)
    return _batch_sq(S.paired(x, corrupt(x, eps1, t, schedule), t), eps1)


def v3_mismatch_term(S, fake, eps2, eps3, t, schedule) -> Tensor:
    fake = _as_t(fake).detach()
    pred = S.paired(fake, corrupt(fake, _as_t(eps2), t, schedule), t)
    return _batch_sq(pred, _as_t(eps3))


def v3_generator_term(S, fake: Tensor, eps4, t, schedule) -> Tensor:
    eps4 = _as_t(eps4)
    return _batch_sq(S.paired(fake, corrupt(fake, eps4, t, schedule), t, frozen=True), eps4)


def variant2_losses(S, G, x, z1, z2, eps1, eps2, eps3, eps4, t, schedule) -> tuple[Tensor, Tensor]:
    score = v2_match_term(S, x, eps1, t, schedule) + v2_mismatch_term(S, G(_as_t(z1), frozen=True), eps2, eps3, t, schedule)
    gen = v2_generator_term(S, G(_as_t(z2)), eps4, t, schedule)
    return score, gen


def variant3_losses(S, G, x, z1, z2, eps1, eps2, eps3, eps4, t, schedule) -> tuple[Tensor, Tensor]:
    score = v3_match_term(S, x, eps1, t, schedule) + v3_mismatch_term(S, G(_as_t(z1), frozen=True), eps2, eps3, t, schedule)
    gen = v3_generator_term(S, G(_as_t(z2)), eps4, t, schedule)
    return score, gen


_TERMS = {
    "original": (match_term, mismatch_term, generator_term),
    "noisy_target": (v2_match_term, v2_mismatch_term, v2_generator_term),
    "paired_input": (v3_match_term, v3_mismatch_term, v3_generator_term),
}


# -------------------------------------------------------------------- state


@dataclass
class LossRecord:
    iteration: int
    loss_match: float
    loss_mismatch: float
    loss_generator: float
    wall_time: float = 0.0


def build_networks(cfg: TrainingConfig, sample_shape: tuple[int, ...]) -> tuple[ScoreNet, GeneratorNet]:
    dtype = np.dtype(cfg.precision)
    paired = cfg.variant != "original"
    if cfg.dataset.is_image:
        c, h, w = sample_shape
        s_arch = ConvScoreArch(in_channels=c, height=h, width=w, paired=paired)
        g_arch = ConvGeneratorArch(latent=cfg.latent, out_channels=c, height=h, width=w)
    else:
        (d,) = sample_shape
        s_arch = MLPScoreArch(dim=d, hidden=(cfg.hidden, cfg.hidden), paired=paired)
        g_arch = MLPGeneratorArch(latent=cfg.latent, dim=d, hidden=(cfg.hidden, cfg.hidden))
    S = ScoreNet(s_arch, init_params(s_arch, cfg.seed * 2 + 1, dtype))
    G = GeneratorNet(g_arch, init_params(g_arch, cfg.seed * 2 + 2, dtype))
    return S, G


class Trainer:
    """Holds networks, optimizer states, RNG streams and the data pool of one run."""

    def __init__(self, config: TrainingConfig, checkpoint: Checkpoint | None = None, data: np.ndarray | None = None):
        self.config = config
        self.dtype = np.dtype(config.precision)
        self.schedule = build_schedule(config.T, config.beta_min, config.beta_max)
        self.kind = config.corruption_kind()
        self.data = self._load_data() if data is None else np.asarray(data, dtype=self.dtype)
        self.sample_shape = tuple(self.data.shape[1:])
        self.rng = RngStreams(config.seed)
        self.iteration = 0
        self.S, self.G = build_networks(config, self.sample_shape)
        betas = dict(lr=config.lr, beta1=config.adam_beta1, beta2=config.adam_beta2)
        self.adam_s = AdamState.for_params(self.S.params, **betas)
        self.adam_g = AdamState.for_params(self.G.params, **betas)
        self._perm: tuple[int, np.ndarray] | None = None
        if checkpoint is not None:
            self.restore(checkpoint)

    def _load_data(self) -> np.ndarray:
        cfg = self.config
        pool = load_dataset(cfg.dataset.to_spec(), cfg.dataset.size, cfg.seed)
        return np.ascontiguousarray(pool, dtype=self.dtype)

    # ---------------------------------------------------------------- data

    def batch(self, iteration: int) -> np.ndarray:
        n = len(self.data)
        b = self.config.batch_size
        if b > n:
            raise ValueError(f"batch_size {b} exceeds dataset size {n}")
        per_epoch = n // b
        epoch, k = divmod(iteration, per_epoch)
        if self._perm is None or self._perm[0] != epoch:
            self._perm = (epoch, epoch_permutation(n, self.config.seed, epoch))
        idx = self._perm[1][k * b : (k + 1) * b]
        x = self.data[idx]
        if self.config.hflip:
            x = hflip(x, self.rng["flip"].random(b) < 0.5)
        return x

    def draw(self, b: int) -> dict:
        """All randomness of one step, each from its own stream."""
        r = self.rng
        shape = (b,) + self.sample_shape
        dt = self.dtype
        if self.config.t_per_sample:
            out = {"t": r["t"].integers(1, self.config.T + 1, size=b)}
        else:
            out = {"t": int(r["t"].integers(1, self.config.T + 1))}
        for name in ("z1", "z2"):
            out[name] = r[name].standard_normal((b, self.G.latent_dim)).astype(dt)
        for name in ("eps1", "eps2", "eps3", "eps4"):
            out[name] = r[name].standard_normal(shape).astype(dt)
        if self.config.duplicate_fake:
            out["eps5"] = r["eps5"].standard_normal(shape).astype(dt)
        return out

    # ---------------------------------------------------------------- step

    def _apply(self, loss: Tensor, params: dict, state: AdamState, term: str) -> float:
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(self.iteration, term)
        zero_grads(params.values())
        backward(loss)
        try:
            adam_step(params, collect_grads(params), state)
        except NonFiniteError:
            raise TrainingDiverged(self.iteration, f"{term} gradient") from None
        zero_grads(params.values())
        return value

    def step(self, batch: np.ndarray | None = None) -> LossRecord:
        cfg = self.config
        t0 = time.perf_counter()
        x = self.batch(self.iteration) if batch is None else np.asarray(batch, dtype=self.dtype)
        d = self.draw(len(x))
        t = d["t"]
        sched, S, G = self.schedule, self.S, self.G
        match_fn, mismatch_fn, gen_fn = _TERMS[cfg.variant]
        extra = (self.kind,) if cfg.variant == "original" else ()
        target = d["eps3"] if cfg.mismatch_target == "eps3" else d["eps2"]

        try:
            if cfg.sum_score_updates:
                lm = match_fn(S, x, d["eps1"], t, sched, *extra)
                fake = G(Tensor(d["z1"]), frozen=True)
                lmm = mismatch_fn(S, fake, d["eps2"], target, t, sched, *extra)
                self._apply(lm + lmm, S.params, self.adam_s, "score loss")
                v_match, v_mismatch = float(lm.data), float(lmm.data)
            else:
                v_match = self._apply(match_fn(S, x, d["eps1"], t, sched, *extra), S.params, self.adam_s, "match loss")
                fake = G(Tensor(d["z1"]), frozen=True)
                lmm = mismatch_fn(S, fake, d["eps2"], target, t, sched, *extra)
                v_mismatch = self._apply(lmm, S.params, self.adam_s, "mismatch loss")

            fake2 = G(Tensor(d["z2"]))
            lg = gen_fn(S, fake2, d["eps4"], t, sched, *extra)
            if cfg.duplicate_fake:
                lg = lg + gen_fn(S, fake2, d["eps5"], t, sched, *extra)
            v_gen = self._apply(lg, G.params, self.adam_g, "generator loss")
        except NonFiniteError as exc:
            raise TrainingDiverged(self.iteration, exc.where) from None

        self.iteration += 1
        wall = time.perf_counter() - t0 if cfg.record_wall_time else 0.0
        return LossRecord(self.iteration, v_match, v_mismatch, v_gen, wall)

    # ------------------------------------------------------------ sampling

    def sample(self, n: int, seed: int) -> np.ndarray:
        return generate(self.G, n, seed, self.dtype)

    def real_eval_samples(self, n: int) -> np.ndarray:
        cfg = self.config
        if cfg.dataset.is_image:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE7A1]))
            return self.data[rng.choice(len(self.data), size=min(n, len(self.data)), replace=False)]
        return sample_synthetic(cfg.dataset.to_spec(), n, cfg.seed + 0x10000)

    def evaluate(self, n: int | None = None) -> tuple[float, float]:
        n = n or self.config.eval_samples
        fake = self.sample(n, seed=(self.config.seed * 1_000_003 + self.iteration) % 2**32)
        real = self.real_eval_samples(n)
        mmd = mmd_rbf(real, fake)
        sw = sliced_wasserstein(real, fake, n_projections=64, seed=self.config.seed)
        return mmd, sw

    # -------------------------------------------------------- checkpointing

    def checkpoint(self) -> Checkpoint:
        def moments(st: AdamState) -> dict:
            out = {f"m/{k}": v.copy() for k, v in st.m.items()}
            out.update({f"v/{k}": v.copy() for k, v in st.v.items()})
            return out

        def hyper(st: AdamState) -> dict:
            return {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps, "step": st.step}

        # the output location is not part of the experiment
        snapshot = self.config.to_dict()
        snapshot["out_dir"] = ""
        return Checkpoint(
            config=snapshot,
            iteration=self.iteration,
            score_arch=arch_to_dict(self.S.arch),
            gen_arch=arch_to_dict(self.G.arch),
            score_params={k: p.data.copy() for k, p in self.S.params.items()},
            gen_params={k: p.data.copy() for k, p in self.G.params.items()},
            adam_score=hyper(self.adam_s),
            adam_gen=hyper(self.adam_g),
            adam_score_moments=moments(self.adam_s),
            adam_gen_moments=moments(self.adam_g),
            rng_state=self.rng.state(),
        )

    def restore(self, ck: Checkpoint) -> None:
        if arch_from_dict(ck.score_arch) != self.S.arch or arch_from_dict(ck.gen_arch) != self.G.arch:
            raise ValueError("checkpoint architecture does not match the configuration")
        for net, params in ((self.S, ck.score_params), (self.G, ck.gen_params)):
            for k, p in net.params.items():
                p.data = params[k].copy()
        for st, hyper, mom in ((self.adam_s, ck.adam_score, ck.adam_score_moments), (self.adam_g, ck.adam_gen, ck.adam_gen_moments)):
            st.lr, st.beta1, st.beta2, st.eps, st.step = hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"], hyper["step"]
            st.m = {k[2:]: v.copy() for k, v in mom.items() if k.startswith("m/")}
            st.v = {k[2:]: v.copy() for k, v in mom.items() if k.startswith("v/")}
        self.rng.set_state(ck.rng_state)
        self.iteration = ck.iteration
        self._perm = None


def generate(G: GeneratorNet, n: int, seed: int, dtype=np.float64) -> np.ndarray:
    """One generator forward for the whole batch; no score net, no iteration."""
    if n < 0:
        raise ValueError("n must be >= 0")
    z = np.random.default_rng(seed).standard_normal((n, G.latent_dim)).astype(dtype)
    if n == 0:
        shape = (G.arch.dim,) if isinstance(G.arch, MLPGeneratorArch) else (G.arch.out_channels, G.arch.height, G.arch.width)
        return np.zeros((0,) + shape, dtype=dtype)
    return G(Tensor(z), frozen=True).data


def generator_from_checkpoint(ck: Checkpoint) -> GeneratorNet:
    arch = arch_from_dict(ck.gen_arch)
    return GeneratorNet(arch, {k: Tensor(v) for k, v in ck.gen_params.items()})


def sample_one_step(ck: Checkpoint, n: int, seed: int) -> np.ndarray:
    G = generator_from_checkpoint(ck)
    dtype = next(iter(ck.gen_params.values())).dtype
    return generate(G, n, seed, dtype)


# --------------------------------------------------------------------- loop


def train_step(trainer: Trainer, batch: np.ndarray | None = None) -> LossRecord:
    return trainer.step(batch)


def train_loop(
    config: TrainingConfig,
    checkpoint: Checkpoint | None = None,
    stop_at: int | None = None,
    checkpoint_path=None,
    metrics_path=None,
    trainer: Trainer | None = None,
) -> tuple[Checkpoint, list[LossRecord]]:
    """Run until ``config.iterations`` (or ``stop_at``), logging and checkpointing.

    Metric rows go to ``metrics_path`` every ``log_every`` iterations, with
    MMD/sliced-W2 columns filled every ``eval_every``. On divergence the last
    checkpoint written to disk is left untouched and the error propagates.
    """
    tr = trainer or Trainer(config, checkpoint)
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    mlog = MetricsLog(metrics_path, keep_until=tr.iteration if checkpoint is not None else None) if metrics_path else None
    records: list[LossRecord] = []
    while tr.iteration < end:
        rec = tr.step()
        records.append(rec)
        it = rec.iteration
        # purely periodic, so a resumed run writes exactly the rows of an uninterrupted one
        logging_now = config.log_every and it % config.log_every == 0
        eval_now = config.eval_every and it % config.eval_every == 0
        if mlog is not None and (logging_now or eval_now):
            row = {
                "iteration": it,
                "loss_match": rec.loss_match,
                "loss_mismatch": rec.loss_mismatch,
                "loss_generator": rec.loss_generator,
                "wall_time_s": rec.wall_time,
                "seed": config.seed,
            }
            if eval_now:
                row["mmd"], row["sliced_wasserstein"] = tr.evaluate()
            mlog.append(row)
        if logging_now:
            log.info("iter %d  match %.4f  mismatch %.4f  gen %.4f", it, rec.loss_match, rec.loss_mismatch, rec.loss_generator)
        if checkpoint_path and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_checkpoint(tr.checkpoint(), checkpoint_path)
    ck = tr.checkpoint()
    if checkpoint_path:
        save_checkpoint(ck, checkpoint_path)
    return ck, records


def default_paths(config: TrainingConfig) -> tuple[Path, Path]:
    out = config.output_dir()
    return out / "checkpoint.smm", out / "metrics.csv"
