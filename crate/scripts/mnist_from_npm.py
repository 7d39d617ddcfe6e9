#!/usr/bin/env python3
"""Convert the digits bundled with the npm `mnist` package into IDX files.

The package ships 10,000 MNIST digits as JSON (pixel intensities divided by
255 and rounded to three decimals). This script restores the byte values,
shuffles with a fixed seed and writes a train/test split in the standard IDX
layout so the regular loaders can read it.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path

TRAIN_COUNT = 8000


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    src = Path(sys.argv[1])
    dst = Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    records = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(0, len(data), 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[i : i + 784]]
            records.append((pixels, digit))
    random.Random(20240917).shuffle(records)
    train, test = records[:TRAIN_COUNT], records[TRAIN_COUNT:]
    write_images(dst / "train-images-idx3-ubyte", [r[0] for r in train])
    write_labels(dst / "train-labels-idx1-ubyte", [r[1] for r in train])
    write_images(dst / "t10k-images-idx3-ubyte", [r[0] for r in test])
    write_labels(dst / "t10k-labels-idx1-ubyte", [r[1] for r in test])
    print(f"wrote {len(train)} train / {len(test)} test records to {dst}")


if __name__ == "__main__":
    main()
