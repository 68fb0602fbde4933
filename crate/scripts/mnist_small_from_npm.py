#!/usr/bin/env python3
"""Convert the digits bundled in the npm `mnist` package (MIT, 10,000 MNIST
digits stored as JSON floats in [0,1]) into gzipped IDX files.

usage: npm pack mnist && tar xzf mnist-*.tgz
       python3 scripts/mnist_small_from_npm.py package/src/digits data/mnist-small
"""
import gzip
import json
import os
import struct
import sys


def main(src, dst):
    images = bytearray()
    labels = bytearray()
    count = 0
    for digit in range(10):
        with open(os.path.join(src, f"{digit}.json")) as fh:
            flat = json.load(fh)["data"]
        assert len(flat) % 784 == 0
        for i in range(len(flat) // 784):
            px = flat[i * 784:(i + 1) * 784]
            images.extend(min(255, max(0, round(v * 255))) for v in px)
            labels.append(digit)
            count += 1
    os.makedirs(dst, exist_ok=True)
    with gzip.GzipFile(os.path.join(dst, "images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 0x803, count, 28, 28))
        fh.write(images)
    with gzip.GzipFile(os.path.join(dst, "labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 0x801, count))
        fh.write(labels)
    print(f"wrote {count} examples to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
