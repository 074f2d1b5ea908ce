#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package into gzipped IDX files.

The npm package ships 10,000 MNIST digits as normalized floats rounded to three
decimals. Pixels are mapped back to bytes with round(v * 255). A seeded shuffle
splits them into a train file (8,000 images) and a t10k file (2,000 images).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/prepare_mnist.py package/src/digits data/mnist
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_COUNT = 8000


def write_idx(out_dir, prefix, items):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(items), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(items)))
    for label, pixels in items:
        images.extend(pixels)
        labels.append(label)
    with gzip.GzipFile(out_dir / f"{prefix}-images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(bytes(images))
    with gzip.GzipFile(out_dir / f"{prefix}-labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(bytes(labels))


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []
    for digit in range(10):
        flat = json.load(open(digits_dir / f"{digit}.json"))["data"]
        assert len(flat) % 784 == 0
        for start in range(0, len(flat), 784):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[start:start + 784])
            items.append((digit, px))
    random.Random(20240101).shuffle(items)
    write_idx(out_dir, "train", items[:TRAIN_COUNT])
    write_idx(out_dir, "t10k", items[TRAIN_COUNT:])
    print(f"wrote {TRAIN_COUNT} train / {len(items) - TRAIN_COUNT} t10k images to {out_dir}")


if __name__ == "__main__":
    main()
