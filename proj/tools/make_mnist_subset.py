#!/usr/bin/env python3
"""Write a small MNIST subset as IDX files.

The 5,000-digit sample shipped inside the mlxtend wheel (500 per class,
sorted by label) is split into a class-balanced train/test pair and
interleaved with a fixed permutation.

    pip download --no-deps mlxtend -d /tmp/wheels
    python3 tools/make_mnist_subset.py /tmp/wheels/mlxtend-*.whl data/mnist-subset
"""
import argparse
import gzip
import io
import pathlib
import struct
import zipfile

import numpy as np


def write_idx_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, images.shape[0], 28, 28))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("wheel")
    ap.add_argument("out")
    ap.add_argument("--train-per-class", type=int, default=200)
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=20211)
    args = ap.parse_args()

    raw = zipfile.ZipFile(args.wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(int)

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        train_idx.extend(idx[: args.train_per_class])
        test_idx.extend(idx[args.train_per_class : args.train_per_class + args.test_per_class])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", pixels[train_idx])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[train_idx])
    write_idx_images(out / "t10k-images-idx3-ubyte", pixels[test_idx])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[test_idx])


if __name__ == "__main__":
    main()
