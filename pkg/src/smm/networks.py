"""Time-conditioned score networks and one-step generators.

Two families: MLPs for 2D point data and small conv stacks for 28x28
images. Parameters live in a flat ``dict[str, Tensor]`` so the optimizer
and checkpoint code can treat every network the same way.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

TIME_DIM = 16
# keeps generator output strictly inside (-1, 1) even where tanh rounds to 1
OUT_SCALE = 1.0 - 1e-6


def time_embedding(t, dim: int = TIME_DIM, batch: int | None = None) -> np.ndarray:
    """Sinusoidal features of the diffusion step, shape ``(batch, dim)``."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if batch is not None and t_arr.size == 1:
        t_arr = np.full(batch, t_arr[0])
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t_arr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# -------------------------------------------------------------- descriptors


@dataclass(frozen=True)
class MLPScoreArch:
    dim: int = 2
    hidden: tuple[int, ...] = (128, 128)
    paired: bool = False
    time_dim: int = TIME_DIM
    kind: str = "mlp_score"


@dataclass(frozen=True)
class MLPGeneratorArch:
    latent: int = 64
    dim: int = 2
    hidden: tuple[int, ...] = (128, 128)
    kind: str = "mlp_generator"


@dataclass(frozen=True)
class ConvScoreArch:
    in_channels: int = 1
    height: int = 28
    width: int = 28
    channels: tuple[int, ...] = (16, 32, 32)
    paired: bool = False
    time_dim: int = TIME_DIM
    kind: str = "conv_score"


@dataclass(frozen=True)
class ConvGeneratorArch:
    latent: int = 128
    out_channels: int = 1
    height: int = 28
    width: int = 28
    channels: tuple[int, ...] = (32, 32, 16)
    kind: str = "conv_generator"


Arch = MLPScoreArch | MLPGeneratorArch | ConvScoreArch | ConvGeneratorArch
_ARCHS = {cls.kind: cls for cls in (MLPScoreArch, MLPGeneratorArch, ConvScoreArch, ConvGeneratorArch)}


def arch_to_dict(arch: Arch) -> dict:
    return asdict(arch)


def arch_from_dict(d: dict) -> Arch:
    d = dict(d)
    cls = _ARCHS[d.pop("kind")]
    for key in ("hidden", "channels"):
        if key in d:
            d[key] = tuple(d[key])
    return cls(**d)


def _param_shapes(arch: Arch) -> dict[str, tuple[int, ...]]:
    """Ordered parameter shapes; biases end in ``.b`` and start at zero."""
    shapes: dict[str, tuple[int, ...]] = {}
    if isinstance(arch, MLPScoreArch):
        widths = (arch.dim * (2 if arch.paired else 1),) + tuple(arch.hidden)
        for i in range(len(arch.hidden)):
            shapes[f"l{i}.w"] = (widths[i], widths[i + 1])
            shapes[f"l{i}.b"] = (widths[i + 1],)
            shapes[f"l{i}.temb"] = (arch.time_dim, widths[i + 1])
        shapes["out.w"] = (widths[-1], arch.dim)
        shapes["out.b"] = (arch.dim,)
    elif isinstance(arch, MLPGeneratorArch):
        widths = (arch.latent,) + tuple(arch.hidden)
        for i in range(len(arch.hidden)):
            shapes[f"l{i}.w"] = (widths[i], widths[i + 1])
            shapes[f"l{i}.b"] = (widths[i + 1],)
        shapes["out.w"] = (widths[-1], arch.dim)
        shapes["out.b"] = (arch.dim,)
    elif isinstance(arch, ConvScoreArch):
        chans = (arch.in_channels * (2 if arch.paired else 1),) + tuple(arch.channels)
        for i in range(len(arch.channels)):
            shapes[f"c{i}.w"] = (chans[i + 1], chans[i], 3, 3)
            shapes[f"c{i}.b"] = (chans[i + 1],)
            shapes[f"c{i}.temb"] = (arch.time_dim, chans[i + 1])
        shapes["out.w"] = (arch.in_channels, chans[-1], 3, 3)
        shapes["out.b"] = (arch.in_channels,)
    elif isinstance(arch, ConvGeneratorArch):
        if arch.height % 4 or arch.width % 4 or len(arch.channels) != 3:
            raise ValueError("conv generator needs extents divisible by 4 and three channel widths")
        c0, c1, c2 = arch.channels
        base = c0 * (arch.height // 4) * (arch.width // 4)
        shapes["fc.w"] = (arch.latent, base)
        shapes["fc.b"] = (base,)
        shapes["c0.w"] = (c1, c0, 3, 3)
        shapes["c0.b"] = (c1,)
        shapes["c1.w"] = (c2, c1, 3, 3)
        shapes["c1.b"] = (c2,)
        shapes["out.w"] = (arch.out_channels, c2, 3, 3)
        shapes["out.b"] = (arch.out_channels,)
    else:
        raise TypeError(f"unknown architecture {arch!r}")
    for name, shape in shapes.items():
        if any(int(s) < 1 for s in shape):
            raise ValueError(f"parameter {name} has a zero-width extent {shape}")
    return shapes


def init_params(arch: Arch, seed: int, dtype=np.float64) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases, reproducible from ``seed``."""
    shapes = _param_shapes(arch)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def _view(params: dict[str, Tensor], frozen: bool) -> dict[str, Tensor]:
    # frozen: same values, no gradient path back to the parameters
    return {k: Tensor(p.data) for k, p in params.items()} if frozen else params


class ScoreNet:
    """Predicts an epsilon-shaped output from a noisy sample and step ``t``."""

    def __init__(self, arch: MLPScoreArch | ConvScoreArch, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.arch = arch
        self.params = params if params is not None else init_params(arch, seed)
        self.calls = 0

    @property
    def sample_shape(self) -> tuple[int, ...]:
        if isinstance(self.arch, MLPScoreArch):
            return (self.arch.dim,)
        return (self.arch.in_channels, self.arch.height, self.arch.width)

    def _check(self, x: Tensor, op: str) -> None:
        if x.shape[1:] != self.sample_shape:
            raise ShapeError(op, x.shape, (None,) + self.sample_shape)

    def __call__(self, x_tilde: Tensor, t, frozen: bool = False) -> Tensor:
        if self.arch.paired:
            raise TypeError("paired score net: call .paired(a, b, t)")
        self._check(x_tilde, "score_forward")
        return self._forward(x_tilde, t, frozen)

    def paired(self, a: Tensor, b: Tensor, t, frozen: bool = False) -> Tensor:
        if not self.arch.paired:
            raise TypeError("score net was not built for paired input")
        if a.shape != b.shape:
            raise ShapeError("score_forward_paired", a.shape, b.shape)
        self._check(a, "score_forward_paired")
        return self._forward(ad.concat([a, b], axis=1), t, frozen)

    def _forward(self, x: Tensor, t, frozen: bool) -> Tensor:
        self.calls += 1
        p = _view(self.params, frozen)
        emb = Tensor(time_embedding(t, self.arch.time_dim, batch=x.shape[0]).astype(x.data.dtype))
        if isinstance(self.arch, MLPScoreArch):
            h = x
            for i in range(len(self.arch.hidden)):
                h = ad.leaky_relu(h @ p[f"l{i}.w"] + p[f"l{i}.b"] + emb @ p[f"l{i}.temb"])
            return h @ p["out.w"] + p["out.b"]
        h = x
        for i, c in enumerate(self.arch.channels):
            tb = ad.reshape(emb @ p[f"c{i}.temb"], (x.shape[0], c, 1, 1))
            bias = ad.reshape(p[f"c{i}.b"], (1, c, 1, 1))
            h = ad.leaky_relu(ad.conv2d(h, p[f"c{i}.w"]) + bias + tb)
        out_b = ad.reshape(p["out.b"], (1, self.arch.in_channels, 1, 1))
        return ad.conv2d(h, p["out.w"]) + out_b


class GeneratorNet:
    """Maps a latent batch to samples in (-1, 1) with a single forward pass."""

    def __init__(self, arch: MLPGeneratorArch | ConvGeneratorArch, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.arch = arch
        self.params = params if params is not None else init_params(arch, seed)
        self.calls = 0

    @property
    def latent_dim(self) -> int:
        return self.arch.latent

    def __call__(self, z: Tensor, frozen: bool = False) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.arch.latent:
            raise ShapeError("generator_forward", z.shape, (None, self.arch.latent))
        self.calls += 1
        p = _view(self.params, frozen)
        if isinstance(self.arch, MLPGeneratorArch):
            h = z
            for i in range(len(self.arch.hidden)):
                h = ad.leaky_relu(h @ p[f"l{i}.w"] + p[f"l{i}.b"])
            return ad.scale(ad.tanh(h @ p["out.w"] + p["out.b"]), OUT_SCALE)
        a = self.arch
        c0, c1, c2 = a.channels
        n = z.shape[0]
        h = ad.leaky_relu(z @ p["fc.w"] + p["fc.b"])
        h = ad.upsample2x(ad.reshape(h, (n, c0, a.height // 4, a.width // 4)))
        h = ad.leaky_relu(ad.conv2d(h, p["c0.w"]) + ad.reshape(p["c0.b"], (1, c1, 1, 1)))
        h = ad.upsample2x(h)
        h = ad.leaky_relu(ad.conv2d(h, p["c1.w"]) + ad.reshape(p["c1.b"], (1, c2, 1, 1)))
        out = ad.conv2d(h, p["out.w"]) + ad.reshape(p["out.b"], (1, a.out_channels, 1, 1))
        return ad.scale(ad.tanh(out), OUT_SCALE)


def score_forward(net: ScoreNet, x_tilde: Tensor, t, frozen: bool = False) -> Tensor:
    return net(x_tilde, t, frozen=frozen)


def score_forward_paired(net: ScoreNet, a: Tensor, b: Tensor, t, frozen: bool = False) -> Tensor:
    return net.paired(a, b, t, frozen=frozen)


def generator_forward(net: GeneratorNet, z: Tensor, frozen: bool = False) -> Tensor:
    return net(z, frozen=frozen)
