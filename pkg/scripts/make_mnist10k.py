"""Convert the 10,000-digit MNIST subset shipped in the npm ``mnist`` package to IDX.

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    python scripts/make_mnist10k.py package/src/digits data/mnist10k

The npm package stores pixels as ``round(byte / 255, 3)``; the byte value is
recovered exactly by ``round(v * 255)``.
"""
import gzip
import json
import struct
import sys
from pathlib import Path

import numpy as np


def main(src: str, dst: str) -> None:
    images, labels = [], []
    for digit in range(10):
        data = np.asarray(json.loads(Path(src, f"{digit}.json").read_text())["data"])
        data = data.reshape(-1, 28, 28)
        images.append(np.rint(data * 255).astype(np.uint8))
        labels.append(np.full(len(data), digit, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    # interleave digits so any prefix is class balanced
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]

    out = Path(dst)
    out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.tobytes())
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
