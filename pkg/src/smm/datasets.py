"""Synthetic 2D distributions, an MNIST IDX reader, and flip augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
# open-interval guard for synthetic draws whose tails would reach +-1
_EDGE = 1.0 - 1e-6


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Gauss8:
    radius: float = 2.0
    std: float = 0.1

    def __post_init__(self):
        if self.std < 0 or self.radius <= 0:
            raise ValueError("Gauss8 needs radius > 0 and std >= 0")

    @property
    def scale(self) -> float:
        # 4 std of headroom; the floor keeps std=0 centres off the boundary
        return 1.0 / max(self.radius + 4.0 * self.std, 1.001 * self.radius)

    def centers(self) -> np.ndarray:
        """The 8 mode centres after rescaling into (-1, 1)."""
        ang = 2 * np.pi * np.arange(8) / 8
        return self.radius * self.scale * np.stack([np.cos(ang), np.sin(ang)], axis=1)


@dataclass(frozen=True)
class TwoMoons:
    noise: float = 0.05

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass(frozen=True)
class SwissRoll2D:
    noise: float = 0.05

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass(frozen=True)
class Mnist:
    path: str = "data/mnist"
    digits: tuple[int, ...] | None = None
    limit: int | None = None


DatasetSpec = Gauss8 | TwoMoons | SwissRoll2D | Mnist


def sample_synthetic(spec: DatasetSpec, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. points in (-1, 1)^2, shape ``(n, 2)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    if isinstance(spec, Gauss8):
        k = rng.integers(0, 8, size=n)
        pts = spec.centers()[k] + spec.std * spec.scale * rng.standard_normal((n, 2))
    elif isinstance(spec, TwoMoons):
        upper = rng.random(n) < 0.5
        th = np.pi * rng.random(n)
        x = np.where(upper, np.cos(th), 1.0 - np.cos(th))
        y = np.where(upper, np.sin(th), 0.5 - np.sin(th))
        pts = np.stack([x, y], axis=1) + spec.noise * rng.standard_normal((n, 2))
        # raw moons span x in [-1, 2], y in [-0.5, 1]
        pts = (pts - np.array([0.5, 0.25])) / (1.5 + 4 * spec.noise + 0.1)
    elif isinstance(spec, SwissRoll2D):
        th = 1.5 * np.pi * (1 + 2 * rng.random(n))
        pts = np.stack([th * np.cos(th), th * np.sin(th)], axis=1) / (4.5 * np.pi)
        pts = pts * 0.9 + spec.noise * rng.standard_normal((n, 2))
    else:
        raise TypeError(f"{spec!r} is not a synthetic dataset")
    return np.clip(pts, -_EDGE, _EDGE)


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    want = int(np.prod(dims))
    body = raw[head:]
    if len(body) < want:
        raise IdxFormatError(f"{path}: truncated payload, header promises {want} bytes, found {len(body)}")
    if len(body) > want:
        raise IdxFormatError(f"{path}: count mismatch, {len(body) - want} trailing bytes")
    return dims, body


def load_mnist_idx(images_path, labels_path=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Read an IDX image file (and optionally its label file); plain or gzipped."""
    images_path = Path(images_path)
    dims, body = _read_idx(images_path, IMAGE_MAGIC)
    images = np.frombuffer(body, dtype=np.uint8).reshape(dims)
    labels = None
    if labels_path is not None:
        (count,), lbody = _read_idx(Path(labels_path), LABEL_MAGIC)
        if count != dims[0]:
            raise IdxFormatError(f"count mismatch: {dims[0]} images vs {count} labels")
        labels = np.frombuffer(lbody, dtype=np.uint8).copy()
    return images.copy(), labels


def _find(directory: Path, stem: str) -> Path | None:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    return None


def load_mnist(spec: Mnist) -> np.ndarray:
    """Images as an NCHW float array in [-1, 1], filtered and truncated per ``spec``."""
    root = Path(spec.path)
    img = _find(root, "train-images-idx3-ubyte")
    if img is None:
        raise FileNotFoundError(f"no train-images-idx3-ubyte[.gz] under {root}")
    lab = _find(root, "train-labels-idx1-ubyte")
    images, labels = load_mnist_idx(img, lab)
    if spec.digits is not None:
        if labels is None:
            raise FileNotFoundError(f"digit filter needs train-labels-idx1-ubyte under {root}")
        images = images[np.isin(labels, spec.digits)]
    if spec.limit is not None:
        images = images[: spec.limit]
    return normalize_to_unit_range(images)[:, None, :, :]


def normalize_to_unit_range(x) -> np.ndarray:
    """Map byte intensities [0, 255] onto [-1, 1] via ``v / 127.5 - 1``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.isfinite(arr).all()):
        raise ValueError("pixel values must lie in [0, 255]")
    return arr / 127.5 - 1.0


def hflip(x: np.ndarray, mask) -> np.ndarray:
    """Mirror the samples selected by ``mask`` along the width axis."""
    x = np.asarray(x)
    if x.ndim < 3:
        raise ValueError(f"hflip needs image batches (N, [C,] H, W), got shape {x.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ValueError(f"mask shape {mask.shape} does not match batch {x.shape[0]}")
    out = x.copy()
    out[mask] = x[mask][..., ::-1]
    return out


def load_dataset(spec: DatasetSpec, n: int, seed: int) -> np.ndarray:
    """Training pool for ``spec``: ``n`` synthetic draws, or the MNIST images."""
    if isinstance(spec, Mnist):
        return load_mnist(spec)
    return sample_synthetic(spec, n, seed)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """Visit order for one epoch; a pure function of ``(seed, epoch)``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0x5A0F]))
    return rng.permutation(n)
