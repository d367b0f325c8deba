"""Binary checkpoints and the CSV metrics log.

Checkpoint layout (all integers little-endian)::

    b"SMMCKPT\\0"  magic
    u32            format version
    u32            section count
    per section:   u16 name length, name (utf-8), u64 payload length, payload
    u32            CRC32 of every preceding byte

Sections are ``meta`` (sorted-key JSON) and ``arrays`` (u32 count, then per
array: u16 name length, name, u8 dtype code, u8 ndim, u32 dims, raw bytes).
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SMMCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    iteration: int
    score_arch: dict
    gen_arch: dict
    score_params: dict[str, np.ndarray]
    gen_params: dict[str, np.ndarray]
    adam_score: dict
    adam_gen: dict
    adam_score_moments: dict[str, np.ndarray] = field(default_factory=dict)
    adam_gen_moments: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def meta(self) -> dict:
        return {
            "version": self.version,
            "config": self.config,
            "iteration": self.iteration,
            "score_arch": self.score_arch,
            "gen_arch": self.gen_arch,
            "adam_score": self.adam_score,
            "adam_gen": self.adam_gen,
            "rng_state": self.rng_state,
        }

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, group in (
            ("score/", self.score_params),
            ("gen/", self.gen_params),
            ("adam_score/", self.adam_score_moments),
            ("adam_gen/", self.adam_gen_moments),
        ):
            for name, arr in group.items():
                out[prefix + name] = arr
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if _canonical(self.meta()) != _canonical(other.meta()):
            return False
        a, b = self.arrays(), other.arrays()
        if list(a) != list(b):
            return False
        return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"array {name}: unsupported dtype {arr.dtype}")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_arrays(payload: bytes) -> dict[str, np.ndarray]:
    r = _Reader(payload)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"array {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return out


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    sections = [("meta", _canonical(ck.meta()).encode()), ("arrays", _pack_arrays(ck.arrays()))]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", ck.version, len(sections)))
    for name, payload in sections:
        key = name.encode()
        buf.write(struct.pack("<H", len(key)) + key)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 12:
        raise CheckpointTruncatedError(f"checkpoint truncated ({len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, nsec = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    sections = {}
    for _ in range(nsec):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode(errors="replace")
        (plen,) = r.unpack("<Q")
        sections[name] = r.take(plen)
    if r.pos != len(body):
        raise CheckpointTruncatedError("checkpoint length does not match its sections")
    meta = json.loads(sections["meta"])
    arrays = _unpack_arrays(sections["arrays"])
    groups: dict[str, dict[str, np.ndarray]] = {"score": {}, "gen": {}, "adam_score": {}, "adam_gen": {}}
    for key, arr in arrays.items():
        prefix, name = key.split("/", 1)
        groups[prefix][name] = arr
    return Checkpoint(
        config=meta["config"],
        iteration=meta["iteration"],
        score_arch=meta["score_arch"],
        gen_arch=meta["gen_arch"],
        score_params=groups["score"],
        gen_params=groups["gen"],
        adam_score=meta["adam_score"],
        adam_gen=meta["adam_gen"],
        adam_score_moments=groups["adam_score"],
        adam_gen_moments=groups["adam_gen"],
        rng_state=meta["rng_state"],
        version=version,
    )


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_to_bytes(ck))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())


# ---------------------------------------------------------------- metrics log

METRIC_COLUMNS = (
    "iteration",
    "loss_match",
    "loss_mismatch",
    "loss_generator",
    "mmd",
    "sliced_wasserstein",
    "wall_time_s",
    "seed",
)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError(f"metrics log cells must be finite, got {v}")
        return repr(v)
    return str(v)


class MetricsLog:
    """Append-only CSV with the fixed ``METRIC_COLUMNS`` header.

    Opening an existing log keeps rows up to ``keep_until`` (an iteration) and
    drops the rest, which is what a resumed run wants.
    """

    def __init__(self, path, keep_until: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        rows = read_metrics(self.path) if self.path.exists() and keep_until is not None else []
        kept = [r for r in rows if keep_until is not None and int(r["iteration"]) <= keep_until]
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_COLUMNS)
            for r in kept:
                w.writerow([r[c] for c in METRIC_COLUMNS])

    def append(self, row: dict) -> None:
        unknown = set(row) - set(METRIC_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metrics columns {sorted(unknown)}")
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_cell(row.get(c)) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return list(reader)
