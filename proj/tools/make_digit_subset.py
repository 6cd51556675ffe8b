#!/usr/bin/env python3
"""Write a stratified train/test digit subset as IDX files.

The source is the 5000-image MNIST sample shipped inside the mlxtend wheel
(mlxtend/data/data/mnist_5k.csv.gz: 784 pixel columns then the label, 500
images per class). Pass either that csv.gz or the wheel itself.

    python3 tools/make_digit_subset.py --source mlxtend-0.24.0-py3-none-any.whl
"""

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def load_rows(source: Path) -> np.ndarray:
    if source.suffix == ".whl":
        with zipfile.ZipFile(source) as z:
            raw = z.read(MEMBER)
    else:
        raw = source.read_bytes()
    text = gzip.decompress(raw).decode()
    return np.loadtxt(io.StringIO(text), delimiter=",", dtype=np.int64)


def write_images(path: Path, images: np.ndarray) -> None:
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--source", type=Path, required=True)
    ap.add_argument("--out", type=Path, default=Path("data/digits"))
    ap.add_argument("--train", type=int, default=2000)
    ap.add_argument("--test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rows = load_rows(args.source)
    pixels, labels = rows[:, :784], rows[:, 784]
    classes = np.unique(labels)
    per_train, per_test = args.train // len(classes), args.test // len(classes)

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < per_train + per_test:
            raise SystemExit(f"class {c} has only {len(idx)} images")
        train_idx.extend(idx[:per_train])
        test_idx.extend(idx[per_train:per_train + per_test])
    train_idx = rng.permutation(train_idx)
    test_idx = rng.permutation(test_idx)

    args.out.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", train_idx), ("t10k", test_idx)):
        write_images(args.out / f"{name}-images-idx3-ubyte", pixels[idx].reshape(-1, 28, 28))
        write_labels(args.out / f"{name}-labels-idx1-ubyte", labels[idx])
        print(f"{name}: {len(idx)} images")


if __name__ == "__main__":
    main()
