"""Command-line entry points: ``smm train``, ``smm sample``, ``smm eval``.

Precedence for training options, lowest first: built-in defaults, the
``--config`` file, ``--set key=value`` pairs, then the dedicated flags
(``--iterations``, ``--seed``, ``--out-dir``). The output directory falls
back to ``$SMM_OUTPUT_DIR`` and then ``./runs``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainingConfig, apply_overrides, parse_config
from .datasets import load_dataset, sample_synthetic
from .metrics import MetricRecord, median_bandwidth, mmd_rbf, sliced_wasserstein
from .persistence import CheckpointError, load_checkpoint
from .trainer import TrainingDiverged, default_paths, sample_one_step, train_loop

log = logging.getLogger("smm")


def _pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_config(args) -> TrainingConfig:
    cfg = parse_config(args.config) if args.config else TrainingConfig()
    overrides = _pairs(args.set)
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return apply_overrides(cfg, overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = build_config(args)
    ck_path, metrics_path = default_paths(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and TrainingConfig.from_dict(resume.config).replace(iterations=cfg.iterations, out_dir=cfg.out_dir) != cfg:
        log.warning("resuming with a configuration that differs from the checkpoint's")
    ck, records = train_loop(cfg, checkpoint=resume, checkpoint_path=ck_path, metrics_path=metrics_path)
    print(f"trained to iteration {ck.iteration}; checkpoint {ck_path}; metrics {metrics_path}")
    return 0


def write_points_csv(samples: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        if len(samples) == 0:
            return
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(samples.shape[1])])
        for row in samples:
            w.writerow([repr(float(v)) for v in row])


def read_points_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return np.zeros((0, 0))
    body = rows[1:] if not _numeric(rows[0]) else rows
    return np.array([[float(v) for v in r] for r in body], dtype=np.float64)


def _numeric(row) -> bool:
    try:
        [float(v) for v in row]
    except ValueError:
        return False
    return True


def image_grid(images: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile ``(n, 1, h, w)`` images in [-1, 1] into one uint8 array."""
    n, _, h, w = images.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad), dtype=np.uint8)
    pix = np.clip(np.rint((images[:, 0] + 1.0) * 127.5), 0, 255).astype(np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y : y + h, x : x + w] = pix[k]
    return grid


def write_pgm(gray: np.ndarray, path: Path) -> None:
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    samples = sample_one_step(ck, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.n == 0:
        out.write_bytes(b"")
    elif samples.ndim == 2:
        write_points_csv(samples, out)
    else:
        write_pgm(image_grid(samples), out)
    print(f"wrote {args.n} samples to {out}")
    return 0


def real_samples(cfg: TrainingConfig, n: int, seed: int) -> np.ndarray:
    if cfg.dataset.is_image:
        pool = load_dataset(cfg.dataset.to_spec(), None, seed)
        if n > len(pool):
            raise ValueError(f"asked for {n} real images, dataset has {len(pool)}")
        return pool[np.random.default_rng(seed).choice(len(pool), size=n, replace=False)]
    return sample_synthetic(cfg.dataset.to_spec(), n, seed)


def evaluate_checkpoint(ck, n: int, seed: int, real: np.ndarray | None = None, overrides=None) -> list[MetricRecord]:
    if n < 2:
        raise ValueError("evaluation needs n >= 2")
    fake = sample_one_step(ck, n, seed)
    if real is None:
        cfg = TrainingConfig.from_dict(ck.config)
        if overrides:
            cfg = apply_overrides(cfg, overrides)
        real = real_samples(cfg, n, seed + 1)
    a = real.reshape(len(real), -1)
    b = fake.reshape(len(fake), -1)
    h = median_bandwidth(a, b)
    return [
        MetricRecord("mmd", mmd_rbf(a, b, bandwidth=h), len(a), len(b), seed, h),
        MetricRecord("sliced_wasserstein", sliced_wasserstein(a, b, seed=seed), len(a), len(b), seed),
    ]


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    real = read_points_csv(args.real) if args.real else None
    records = evaluate_checkpoint(ck, args.n, args.seed, real, _pairs(args.set))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["metric", "value", "n_real", "n_fake", "seed", "bandwidth"])
    for r in records:
        w.writerow([r.name, repr(r.value), r.n_a, r.n_b, r.seed, "" if r.bandwidth is None else repr(r.bandwidth)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smm", description="Score-mismatching one-step generator")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train score net and generator")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", help="where checkpoint.smm and metrics.csv go")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples with one generator forward")
    s.add_argument("checkpoint")
    s.add_argument("-n", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV for point data, PGM grid for images")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="MMD and sliced W2 against real data")
    e.add_argument("checkpoint")
    e.add_argument("-n", type=int, default=2048)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--real", help="CSV of real points (default: draw from the checkpoint's dataset)")
    e.add_argument("--set", action="append", metavar="KEY=VALUE", help="override dataset keys, e.g. dataset.kind=two_moons")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
