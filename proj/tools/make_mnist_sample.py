#!/usr/bin/env python3
"""Write a small MNIST excerpt as IDX files with the canonical MNIST names.

Source: the 5,000-image MNIST excerpt bundled with mlxtend
(mlxtend/data/data/mnist_5k.csv.gz, 784 pixel columns + label column).
The excerpt is split per class into 400 training and 100 test images
(4,000 / 1,000 total), keeping the original order inside each class.

    pip install mlxtend
    python3 tools/make_mnist_sample.py data/mnist-sample
"""
import gzip
import os
import struct
import sys

import numpy as np


def find_csv():
    import mlxtend.data
    return os.path.join(os.path.dirname(mlxtend.data.__file__), "data", "mnist_5k.csv.gz")


def write_images(path, images):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 2051, images.shape[0], 28, 28))
        fh.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 2049, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/mnist-sample"
    csv = sys.argv[2] if len(sys.argv) > 2 else find_csv()
    table = np.loadtxt(gzip.open(csv), delimiter=",")
    pixels, labels = table[:, :-1], table[:, -1].astype(int)
    train_idx, test_idx = [], []
    for k in range(10):
        idx = np.flatnonzero(labels == k)
        test_idx.extend(idx[:100])
        train_idx.extend(idx[100:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    os.makedirs(out, exist_ok=True)
    write_images(os.path.join(out, "train-images-idx3-ubyte"), pixels[train_idx])
    write_labels(os.path.join(out, "train-labels-idx1-ubyte"), labels[train_idx])
    write_images(os.path.join(out, "t10k-images-idx3-ubyte"), pixels[test_idx])
    write_labels(os.path.join(out, "t10k-labels-idx1-ubyte"), labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} test images to {out}")


if __name__ == "__main__":
    main()
