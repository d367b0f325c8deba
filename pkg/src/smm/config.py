"""Experiment configuration: the ``TrainingConfig`` record and its text format.

The file format is one ``key = value`` per line; ``#`` starts a comment.
Keys are flat, dataset options use a ``dataset.`` prefix::

    variant = original          # original | noisy_target | paired_input
    corruption = zero_mean      # zero_mean | nonzero_mean | spatial
    T = 10
    lr = 0.0025
    dataset.kind = gauss8       # gauss8 | two_moons | swiss_roll | mnist

Omitted keys take the defaults below.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datasets import DatasetSpec, Gauss8, Mnist, SwissRoll2D, TwoMoons
from .schedule import CorruptionKind, NonZeroMean, SpatialDiffusion, ZeroMean

VARIANTS = ("original", "noisy_target", "paired_input")
CORRUPTIONS = ("zero_mean", "nonzero_mean", "spatial")
DATASETS = ("gauss8", "two_moons", "swiss_roll", "mnist")
OUTPUT_DIR_ENV = "SMM_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "gauss8"
    radius: float = 2.0
    std: float = 0.1
    noise: float = 0.05
    size: int = 50000
    path: str = "data/mnist"
    digits: tuple[int, ...] | None = None
    limit: int | None = None

    def to_spec(self) -> DatasetSpec:
        if self.kind == "gauss8":
            return Gauss8(self.radius, self.std)
        if self.kind == "two_moons":
            return TwoMoons(self.noise)
        if self.kind == "swiss_roll":
            return SwissRoll2D(self.noise)
        return Mnist(self.path, self.digits, self.limit)

    @property
    def is_image(self) -> bool:
        return self.kind == "mnist"


@dataclass
class TrainingConfig:
    variant: str = "original"
    corruption: str = "zero_mean"
    spatial_ratio: float = 0.1
    T: int = 10
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lr: float = 0.0025
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 32
    t_per_sample: bool = False
    duplicate_fake: bool = False
    hflip: bool = False
    iterations: int = 20000
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    latent_dim: int | None = None
    hidden: int = 128
    precision: str = "float64"
    sum_score_updates: bool = False
    # test-only ablation: "eps2" regresses fake samples onto their own noise
    mismatch_target: str = "eps3"
    log_every: int = 100
    eval_every: int = 1000
    eval_samples: int = 1024
    checkpoint_every: int = 1000
    record_wall_time: bool = False
    out_dir: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def latent(self) -> int:
        if self.latent_dim is not None:
            return self.latent_dim
        return 128 if self.dataset.is_image else 64

    def corruption_kind(self) -> CorruptionKind:
        if self.corruption == "zero_mean":
            return ZeroMean()
        if self.corruption == "nonzero_mean":
            return NonZeroMean()
        return SpatialDiffusion(self.spatial_ratio)

    def output_dir(self) -> Path:
        return Path(self.out_dir or os.environ.get(OUTPUT_DIR_ENV, "runs"))

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}")
        need(self.corruption in CORRUPTIONS, f"corruption must be one of {CORRUPTIONS}, got {self.corruption!r}")
        need(self.T >= 1, f"T must be >= 1, got {self.T}")
        need(0 < self.beta_min <= self.beta_max < 1, "need 0 < beta_min <= beta_max < 1")
        need(self.lr > 0, "lr must be positive")
        need(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "Adam betas must lie in [0, 1)")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.iterations >= 0, "iterations must be >= 0")
        need(self.hidden >= 1, "hidden must be >= 1")
        need(self.latent_dim is None or self.latent_dim >= 1, "latent_dim must be >= 1")
        need(0 < self.spatial_ratio <= 0.25, "spatial_ratio must lie in (0, 0.25]")
        need(self.precision in ("float32", "float64"), "precision must be float32 or float64")
        need(self.mismatch_target in ("eps3", "eps2"), "mismatch_target must be eps3 or eps2")
        for key in ("log_every", "eval_every", "checkpoint_every", "eval_samples"):
            need(getattr(self, key) >= 0, f"{key} must be >= 0")
        ds = self.dataset
        need(ds.kind in DATASETS, f"dataset.kind must be one of {DATASETS}, got {ds.kind!r}")
        need(ds.radius > 0 and ds.std >= 0 and ds.noise >= 0, "dataset radius/std/noise out of range")
        need(ds.size >= 1, "dataset.size must be >= 1")
        if self.corruption == "spatial":
            need(ds.is_image, "spatial corruption needs image data")
        if self.hflip:
            need(ds.is_image, "hflip needs image data")
        if self.variant != "original":
            need(self.corruption == "zero_mean", "variants 2 and 3 are defined for zero-mean corruption only")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["dataset"]["digits"] is not None:
            d["dataset"]["digits"] = list(d["dataset"]["digits"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        d = dict(d)
        ds = dict(d.pop("dataset", {}))
        if ds.get("digits") is not None:
            ds["digits"] = tuple(ds["digits"])
        return cls(dataset=DatasetConfig(**ds), **d)

    def replace(self, **overrides) -> TrainingConfig:
        return apply_overrides(self, overrides)


# ---------------------------------------------------------------- text format

_TOP = {f.name: f for f in fields(TrainingConfig) if f.name != "dataset"}
_DS = {f.name: f for f in fields(DatasetConfig)}


def _coerce(key: str, typ, raw: str):
    text = raw.strip()
    t = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    try:
        if t == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
        if t == "str":
            return text
        if t == "int | None":
            return None if text.lower() in ("", "none") else int(text)
        if t == "tuple[int, ...] | None":
            if text.lower() in ("", "none", "all"):
                return None
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {t}") from None
    raise ConfigError(f"{key}: unsupported type {t}")


def apply_overrides(cfg: TrainingConfig, overrides: dict) -> TrainingConfig:
    """New config with flat-key overrides applied (string values are parsed)."""
    top = {}
    ds = {}
    for key, value in overrides.items():
        if key.startswith("dataset."):
            name = key[len("dataset.") :]
            if name not in _DS:
                raise ConfigError(f"unknown config key {key!r}")
            ds[name] = _coerce(key, _DS[name].type, value) if isinstance(value, str) else value
        else:
            if key not in _TOP:
                raise ConfigError(f"unknown config key {key!r}")
            top[key] = _coerce(key, _TOP[key].type, value) if isinstance(value, str) else value
    new_ds = dataclasses.replace(cfg.dataset, **ds)
    current = {f: getattr(cfg, f) for f in _TOP}
    current.update(top)
    return TrainingConfig(dataset=new_ds, **current)


def parse_config_text(text: str) -> TrainingConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    base = TrainingConfig()
    return apply_overrides(base, pairs)


def parse_config(path) -> TrainingConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def format_config(cfg: TrainingConfig) -> str:
    """Render ``cfg`` back to the text format (round-trips through ``parse_config_text``)."""
    lines = []
    for name in _TOP:
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    for name in _DS:
        lines.append(f"dataset.{name} = {_fmt(getattr(cfg.dataset, name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)
