#!/usr/bin/env python3
"""Convert a CSV of 28x28 digits (784 pixel columns, label last) into the
four MNIST IDX files, split per class into train and test."""

import argparse
import gzip
import random
import struct
from collections import defaultdict
from pathlib import Path


def write_images(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(rows), 28, 28))
        for pixels, _ in rows:
            f.write(bytes(pixels))


def write_labels(path, rows):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(rows)))
        f.write(bytes(label for _, label in rows))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv", type=Path, help="input .csv or .csv.gz")
    ap.add_argument("out", type=Path, help="output directory")
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    opener = gzip.open if args.csv.suffix == ".gz" else open
    by_class = defaultdict(list)
    with opener(args.csv, "rt") as f:
        for line in f:
            values = [int(float(v)) for v in line.strip().split(",")]
            if len(values) != 785:
                raise SystemExit(f"expected 785 columns, got {len(values)}")
            by_class[values[-1]].append((values[:-1], values[-1]))

    rng = random.Random(args.seed)
    train, test = [], []
    for label in sorted(by_class):
        rows = by_class[label]
        rng.shuffle(rows)
        cut = round(len(rows) * args.test_fraction)
        test += rows[:cut]
        train += rows[cut:]
    rng.shuffle(train)
    rng.shuffle(test)

    args.out.mkdir(parents=True, exist_ok=True)
    write_images(args.out / "train-images-idx3-ubyte", train)
    write_labels(args.out / "train-labels-idx1-ubyte", train)
    write_images(args.out / "t10k-images-idx3-ubyte", test)
    write_labels(args.out / "t10k-labels-idx1-ubyte", test)
    print(f"{len(train)} train / {len(test)} test images written to {args.out}")


if __name__ == "__main__":
    main()
