"""Convert the digits bundled with the `mnist` npm package into gzipped IDX files.

Usage: python3 scripts/mnist_from_npm.py <path-to-npm-package> data/mnist

The npm package stores 10,000 MNIST training digits as per-class JSON arrays of
floats rounded to three decimals. Values are mapped back to bytes with
round(v * 255) and the examples are shuffled with a fixed seed so that any
file-order prefix is class balanced.
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def main():
    src, dst = sys.argv[1], sys.argv[2]
    xs, ys = [], []
    for digit in range(10):
        with open(os.path.join(src, "src", "digits", f"{digit}.json")) as f:
            data = np.asarray(json.load(f)["data"], dtype=np.float64)
        n = data.size // 784
        xs.append(data.reshape(n, 784))
        ys.extend([digit] * n)
    x = np.round(np.concatenate(xs) * 255).astype(np.uint8)
    y = np.asarray(ys, dtype=np.uint8)
    order = np.random.RandomState(20190601).permutation(len(y))
    x, y = x[order], y[order]
    os.makedirs(dst, exist_ok=True)
    with gzip.GzipFile(os.path.join(dst, "mnist10k-images-idx3-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, len(y), 28, 28))
        f.write(x.tobytes())
    with gzip.GzipFile(os.path.join(dst, "mnist10k-labels-idx1-ubyte.gz"), "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, len(y)))
        f.write(y.tobytes())


if __name__ == "__main__":
    main()
