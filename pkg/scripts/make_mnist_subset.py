"""Write a 5000-digit MNIST subset as gzipped IDX files.

The digits come from the ``mnist_5k.csv.gz`` table bundled inside the
mlxtend wheel (784 pixel columns followed by the label). Usage::

    pip download --no-deps mlxtend -d /tmp/wh
    python scripts/make_mnist_subset.py /tmp/wh/mlxtend-*.whl data/mnist
"""

import gzip
import io
import struct
import sys
import zipfile
from pathlib import Path

import numpy as np


def main(wheel: str, out_dir: str) -> None:
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28)
    labels = table[:, -1].astype(np.uint8)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(images)
    # mtime=0 keeps the archives byte-stable
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, n, 28, 28) + images.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, n) + labels.tobytes())
    print(f"wrote {n} digits to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
