import numpy as np
import pytest

from smm import autodiff as ad
from smm.autodiff import AdamState, Tensor, adam_step, backward, collect_grads, finite_diff_gradcheck
from smm.config import DatasetConfig, TrainingConfig
from smm.networks import GeneratorNet, MLPGeneratorArch, MLPScoreArch, ScoreNet
from smm.persistence import checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint
from smm.schedule import build_schedule
from smm.trainer import (
    RngStreams,
    Trainer,
    TrainingDiverged,
    generate,
    loss_generator,
    loss_match_true,
    loss_mismatch_fake,
    sample_one_step,
    train_loop,
    variant2_losses,
    variant3_losses,
)

SCHED = build_schedule(10)


class ConstOracle:
    """Score 'net' that ignores its input and returns a fixed array."""

    def __init__(self, out):
        self.out = np.asarray(out, dtype=np.float64)

    def __call__(self, x, t, frozen=False):
        return Tensor(self.out)


class ZeroScore:
    """S = 0, but still wired to its input so gradients can flow (and vanish)."""

    def __call__(self, x, t, frozen=False):
        return ad.scale(x, 0.0)

    def paired(self, a, b, t, frozen=False):
        return ad.scale(ad.add(a, b), 0.0)


class NoiseRecovery:
    """Exact noise of a sample corrupted from a known clean tensor ``base``."""

    def __init__(self, base):
        self.base = base

    def __call__(self, y, t, frozen=False):
        return ad.scale(ad.sub(y, self.base), 1.0 / SCHED.sigma(t))


def no_grad(grads) -> bool:
    return all(g is None or not g.any() for g in grads.values())


def small_cfg(**kw):
    base = dict(hidden=16, latent_dim=4, iterations=20, log_every=5, eval_every=0, checkpoint_every=0)
    base.update(kw)
    return TrainingConfig(**base)


def normal(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


# ------------------------------------------------------------------- losses


def test_match_oracle_gives_zero():
    e1 = normal(0, 8, 2)
    assert float(loss_match_true(ConstOracle(e1), normal(1, 8, 2), e1, 3, SCHED).data) == 0.0


def test_match_zero_score_is_dimension():
    e1 = normal(2, 10_000, 2)
    val = float(loss_match_true(ZeroScore(), normal(3, 10_000, 2), e1, 5, SCHED).data)
    assert val == pytest.approx(2.0, abs=0.1)
    assert val == pytest.approx((e1**2).sum(1).mean(), abs=1e-12)


def test_match_invariant_to_batch_permutation():
    S = ScoreNet(MLPScoreArch(hidden=(8,)), seed=1)
    x, e = normal(4, 9, 2), normal(5, 9, 2)
    p = np.random.default_rng(6).permutation(9)
    a = float(loss_match_true(S, x, e, 4, SCHED).data)
    b = float(loss_match_true(S, x[p], e[p], 4, SCHED).data)
    assert a == pytest.approx(b, rel=1e-13)


def test_mismatch_zero_score_and_cheating_oracle():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    z1, e2, e3 = normal(7, 10_000, 4), normal(8, 10_000, 2), normal(9, 10_000, 2)
    assert float(loss_mismatch_fake(ZeroScore(), G, z1, e2, e3, 6, SCHED).data) == pytest.approx(2.0, abs=0.1)
    assert float(loss_mismatch_fake(ConstOracle(e3), G, z1, e2, e3, 6, SCHED).data) == 0.0


def test_mismatch_target_is_the_independent_noise():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    z1, e2, e3 = normal(10, 64, 4), normal(11, 64, 2), normal(12, 64, 2)
    with_e3 = float(loss_mismatch_fake(ZeroScore(), G, z1, e2, e3, 6, SCHED).data)
    with_e2 = float(loss_mismatch_fake(ZeroScore(), G, z1, e2, e2, 6, SCHED).data)
    assert with_e3 != with_e2
    assert with_e3 == pytest.approx((e3**2).sum(1).mean(), rel=1e-12)


def test_generator_perfect_oracle_zero_loss_and_gradient():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    z2, e4 = normal(13, 16, 4), normal(14, 16, 2)

    class Exact:
        def __call__(self, y, t, frozen=False):
            # recompute G(z2) on the tape so the oracle is differentiable in theta_G
            return NoiseRecovery(G(Tensor(z2)))(y, t)

    loss = loss_generator(Exact(), G, z2, e4, 4, SCHED)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-20)
    backward(loss)
    grads = collect_grads(G.params)
    assert max(np.abs(g).max() for g in grads.values()) < 1e-9


def test_generator_zero_score_loss_is_d_and_no_gradient():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    z2, e4 = normal(15, 10_000, 4), normal(16, 10_000, 2)
    loss = loss_generator(ZeroScore(), G, z2, e4, 9, SCHED)
    assert float(loss.data) == pytest.approx(2.0, abs=0.1)
    backward(loss)
    norm = np.sqrt(sum((g**2).sum() for g in collect_grads(G.params).values()))
    assert norm < 1e-6


def test_duplicate_with_same_noise_doubles():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    S = ScoreNet(MLPScoreArch(hidden=(8,)), seed=3)
    z2, e4 = normal(17, 12, 4), normal(18, 12, 2)
    single = float(loss_generator(S, G, z2, e4, 2, SCHED).data)
    double = float(loss_generator(S, G, z2, e4, 2, SCHED, duplicate_fake=True, eps5=e4).data)
    assert double == 2 * single


def test_duplicate_needs_eps5():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)))
    with pytest.raises(ValueError):
        loss_generator(ZeroScore(), G, normal(0, 2, 4), normal(1, 2, 2), 2, SCHED, duplicate_fake=True)


def test_stop_gradients_are_exact():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    S = ScoreNet(MLPScoreArch(hidden=(8,)), seed=3)
    z, e2, e3 = normal(19, 8, 4), normal(20, 8, 2), normal(21, 8, 2)
    backward(loss_mismatch_fake(S, G, z, e2, e3, 5, SCHED))
    assert no_grad(collect_grads(G.params))
    assert not no_grad(collect_grads(S.params))
    ad.zero_grads(S.params.values())
    backward(loss_generator(S, G, z, e2, 5, SCHED))
    assert no_grad(collect_grads(S.params))
    assert not no_grad(collect_grads(G.params))


def test_loss_gradients_pass_gradcheck():
    S = ScoreNet(MLPScoreArch(hidden=(6,)), seed=3)
    G = GeneratorNet(MLPGeneratorArch(latent=3, hidden=(5,)), seed=4)
    x, z, e = normal(22, 4, 2), normal(23, 4, 3), normal(24, 4, 2)
    w0 = S.params["l0.w"].data.copy()

    def match(w):
        S.params["l0.w"] = w
        return loss_match_true(S, x, e, 7, SCHED)

    assert finite_diff_gradcheck(match, w0) < 1e-4
    S.params["l0.w"] = Tensor(w0, requires_grad=True)
    g0 = G.params["out.w"].data.copy()

    def gen(w):
        G.params["out.w"] = w
        return loss_generator(S, G, z, e, 7, SCHED, duplicate_fake=True, eps5=normal(25, 4, 2))

    assert finite_diff_gradcheck(gen, g0) < 1e-4


# ------------------------------------------------------------------ variants


class V2Oracle:
    def paired(self, a, b, t, frozen=False):
        return ad.add(a, b)


class V3Oracle:
    def paired(self, a, b, t, frozen=False):
        return ad.scale(ad.sub(b, a), 1.0 / SCHED.sigma(t))


@pytest.mark.parametrize("fn,oracle", [(variant2_losses, V2Oracle()), (variant3_losses, V3Oracle())])
def test_variant_oracles_give_zero(fn, oracle):
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    x, z1, z2 = normal(30, 6, 2), normal(31, 6, 4), normal(32, 6, 4)
    e1, e2, e4 = normal(33, 6, 2), normal(34, 6, 2), normal(35, 6, 2)
    # the fake-term target is only predictable when it equals the injected noise
    score, gen = fn(oracle, G, x, z1, z2, e1, e2, e2, e4, 8, SCHED)
    assert float(score.data) == pytest.approx(0.0, abs=1e-20)
    assert float(gen.data) == pytest.approx(0.0, abs=1e-20)


def test_variant2_zero_noise_is_reconstruction():
    S = ScoreNet(MLPScoreArch(hidden=(8,), paired=True), seed=3)
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    x, z1 = normal(36, 5, 2), normal(37, 5, 4)
    zero = np.zeros((5, 2))
    score, _ = variant2_losses(S, G, x, z1, z1, zero, zero, zero, zero, 4, SCHED)
    fake = G(Tensor(z1)).data
    rec = lambda a: ((S.paired(Tensor(a), Tensor(zero), 4).data - a) ** 2).sum(1).mean()
    assert float(score.data) == pytest.approx(rec(x) + rec(fake), rel=1e-12)


def test_variant3_zero_score_is_two_d():
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(8,)), seed=0)
    n = 10_000
    args = [normal(40 + k, n, 4 if k in (1, 2) else 2) for k in range(7)]
    score, gen = variant3_losses(ZeroScore(), G, *args, 5, SCHED)
    assert float(score.data) == pytest.approx(4.0, abs=0.15)
    assert float(gen.data) == pytest.approx(2.0, abs=0.1)


@pytest.mark.parametrize("fn", [variant2_losses, variant3_losses])
def test_variant_gradients(fn):
    S = ScoreNet(MLPScoreArch(hidden=(5,), paired=True), seed=3)
    G = GeneratorNet(MLPGeneratorArch(latent=3, hidden=(4,)), seed=4)
    x, z1, z2 = normal(50, 3, 2), normal(51, 3, 3), normal(52, 3, 3)
    eps = [normal(53 + k, 3, 2) for k in range(4)]
    s0 = S.params["out.w"].data.copy()

    def score_loss(w):
        S.params["out.w"] = w
        return fn(S, G, x, z1, z2, *eps, 6, SCHED)[0]

    assert finite_diff_gradcheck(score_loss, s0) < 1e-4
    S.params["out.w"] = Tensor(s0, requires_grad=True)
    g0 = G.params["l0.w"].data.copy()

    def gen_loss(w):
        G.params["l0.w"] = w
        return fn(S, G, x, z1, z2, *eps, 6, SCHED)[1]

    assert finite_diff_gradcheck(gen_loss, g0) < 1e-4


def test_variant_score_loss_leaves_generator_alone():
    S = ScoreNet(MLPScoreArch(hidden=(5,), paired=True), seed=3)
    G = GeneratorNet(MLPGeneratorArch(latent=3, hidden=(4,)), seed=4)
    args = [normal(60, 3, 2), normal(61, 3, 3), normal(62, 3, 3)] + [normal(63 + k, 3, 2) for k in range(4)]
    score, gen = variant3_losses(S, G, *args, 6, SCHED)
    backward(score)
    assert no_grad(collect_grads(G.params))
    ad.zero_grads(S.params.values())
    backward(gen)
    assert no_grad(collect_grads(S.params))


# ---------------------------------------------------------------- streams


def test_streams_are_uncorrelated():
    tr = Trainer(small_cfg(latent_dim=8), data=np.zeros((64, 2)))
    z1 = np.empty((10_000, 8))
    z2 = np.empty((10_000, 8))
    for i in range(10_000):
        d = tr.draw(1)
        z1[i], z2[i] = d["z1"][0], d["z2"][0]
    for k in range(8):
        assert abs(np.corrcoef(z1[:, k], z2[:, k])[0, 1]) < 0.05
    assert not np.array_equal(z1, z2)


def test_stream_seeding_is_by_name():
    a, b = RngStreams(3), RngStreams(3)
    assert a["eps1"].random() == b["eps1"].random()
    assert RngStreams(3)["eps1"].random() != RngStreams(3)["eps2"].random()
    assert RngStreams(3)["z1"].random() != RngStreams(4)["z1"].random()


def test_t_draws_are_integer_steps():
    tr = Trainer(small_cfg(T=4), data=np.zeros((64, 2)))
    ts = {tr.draw(2)["t"] for _ in range(300)}
    assert ts == {1, 2, 3, 4}
    tr = Trainer(small_cfg(T=4, t_per_sample=True), data=np.zeros((64, 2)))
    t = tr.draw(50)["t"]
    assert t.shape == (50,) and t.min() >= 1 and t.max() <= 4


# ------------------------------------------------------------------- steps


def test_one_step_moves_both_networks():
    tr = Trainer(small_cfg())
    s0 = {k: p.data.copy() for k, p in tr.S.params.items()}
    g0 = {k: p.data.copy() for k, p in tr.G.params.items()}
    rec = tr.step()
    assert rec.iteration == 1
    assert sum(np.linalg.norm(p.data - s0[k]) for k, p in tr.S.params.items()) > 0
    assert sum(np.linalg.norm(p.data - g0[k]) for k, p in tr.G.params.items()) > 0
    assert tr.adam_s.step == 2 and tr.adam_g.step == 1


def test_summed_score_update_is_one_application():
    tr = Trainer(small_cfg(sum_score_updates=True))
    tr.step()
    assert tr.adam_s.step == 1 and tr.adam_g.step == 1


def test_two_point_match_loss_decreases():
    data = np.repeat(np.array([[-0.5], [0.5]]), 256, axis=0)
    tr = Trainer(small_cfg(hidden=32), data=data)
    losses = [tr.step().loss_match for _ in range(200)]
    assert np.mean(losses[-30:]) < np.mean(losses[:10])


def test_same_seed_same_records():
    a = [Trainer(small_cfg()).step() for _ in range(1)]
    tr1, tr2 = Trainer(small_cfg()), Trainer(small_cfg())
    r1 = [tr1.step() for _ in range(5)]
    r2 = [tr2.step() for _ in range(5)]
    assert r1 == r2 and a[0] == r1[0]


@pytest.mark.parametrize("extra", [{}, {"variant": "noisy_target"}, {"variant": "paired_input", "duplicate_fake": True}])
def test_each_configuration_trains(extra):
    tr = Trainer(small_cfg(**extra))
    for _ in range(3):
        rec = tr.step()
    assert all(np.isfinite([rec.loss_match, rec.loss_mismatch, rec.loss_generator]))


def test_nan_aborts_with_iteration():
    tr = Trainer(small_cfg())
    tr.step()
    with pytest.raises(TrainingDiverged) as info:
        tr.step(np.full((32, 2), np.nan))
    assert info.value.iteration == 1 and "1" in str(info.value)


def test_nan_keeps_last_good_checkpoint(tmp_path):
    cfg = small_cfg(iterations=10, checkpoint_every=5)
    path = tmp_path / "ck.smm"
    tr = Trainer(cfg)
    train_loop(cfg, stop_at=5, checkpoint_path=path, trainer=tr)
    tr.G.params["out.w"].data[...] = np.nan
    with pytest.raises(TrainingDiverged):
        train_loop(cfg, checkpoint_path=path, trainer=tr)
    assert load_checkpoint(path).iteration == 5


# -------------------------------------------------------------------- loop


def test_zero_iterations(tmp_path):
    cfg = small_cfg(iterations=0)
    ck, recs = train_loop(cfg, checkpoint_path=tmp_path / "c.smm", metrics_path=tmp_path / "m.csv")
    assert ck.iteration == 0 and recs == []
    assert (tmp_path / "m.csv").read_text().count("\n") == 1  # header only
    fresh = Trainer(cfg).checkpoint()
    assert ck == fresh


def test_resume_is_bitwise(tmp_path):
    cfg = small_cfg(iterations=12, eval_every=6, eval_samples=64)
    _, full = train_loop(cfg)
    ck, first = train_loop(cfg, stop_at=5)
    ck = checkpoint_from_bytes(checkpoint_to_bytes(ck))
    _, rest = train_loop(cfg, checkpoint=ck)
    assert first + rest == full


def test_resume_across_epochs():
    cfg = small_cfg(iterations=9, batch_size=8, dataset=DatasetConfig(size=24))
    _, full = train_loop(cfg)
    ck, a = train_loop(cfg, stop_at=4)
    _, b = train_loop(cfg, checkpoint=ck)
    assert a + b == full


def test_metrics_log_rows(tmp_path):
    cfg = small_cfg(iterations=10, eval_every=10, eval_samples=64)
    train_loop(cfg, metrics_path=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert len(lines) == 3  # header, iteration 5, iteration 10 (with metrics)
    assert lines[-1].split(",")[0] == "10"


# ----------------------------------------------------------------- sampling


def test_sampling_is_one_generator_forward():
    tr = Trainer(small_cfg())
    tr.S.calls = tr.G.calls = 0
    out = generate(tr.G, 50, seed=1)
    assert tr.G.calls == 1 and tr.S.calls == 0
    assert out.shape == (50, 2) and np.all(np.abs(out) < 1)


def test_sample_from_checkpoint_is_seeded():
    ck = Trainer(small_cfg()).checkpoint()
    a, b = sample_one_step(ck, 20, 3), sample_one_step(ck, 20, 3)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, sample_one_step(ck, 20, 4))
    assert sample_one_step(ck, 0, 0).shape == (0, 2)


# --------------------------------------------------- degenerate convergence


@pytest.mark.parametrize("t", [1, 10])
def test_generator_converges_to_single_point_against_oracle(t):
    # fixed t per run: the loss is |G - x|^2 / sigma_t^2, and mixing scales
    # that differ by 1e3 makes constant-lr Adam overshoot intermittently
    target = np.array([0.3, -0.6])
    G = GeneratorNet(MLPGeneratorArch(latent=4, hidden=(32, 32)), seed=0)
    state = AdamState.for_params(G.params, lr=0.0025)
    rng = np.random.default_rng(0)
    oracle = NoiseRecovery(Tensor(np.broadcast_to(target, (32, 2)).copy()))
    for _ in range(2500):
        loss = loss_generator(oracle, G, rng.standard_normal((32, 4)), rng.standard_normal((32, 2)), t, SCHED)
        ad.zero_grads(G.params.values())
        backward(loss)
        adam_step(G.params, collect_grads(G.params), state)
    out = generate(G, 256, seed=9)
    assert np.abs(out - target).max() < 0.05
