#!/usr/bin/env python3
"""Build MNIST IDX files from a locally available MNIST subset.

Sources understood:
  * the ``digits/`` directory of the npm ``mnist`` package
    (``{0..9}.json``, each ``{"data": [...]}`` of 784-pixel rows in [0, 1]);
  * mlxtend's ``mnist_5k.csv.gz`` (label, then 784 bytes per row).

Writes ``train-*`` and ``t10k-*`` gzip IDX files; the split is a fixed
per-class prefix/suffix so it is reproducible.

    python tools/build_mnist_idx.py path/to/mnist/src/digits data/mnist
"""

import argparse
import gzip
import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from sgewc.data import write_idx_images, write_idx_labels  # noqa: E402


def read_npm_digits(directory: Path):
    images, labels = [], []
    for digit in range(10):
        flat = np.asarray(json.loads((directory / f"{digit}.json").read_text())["data"], dtype=np.float64)
        px = np.rint(flat.reshape(-1, 784) * 255.0).clip(0, 255).astype(np.uint8)
        images.append(px)
        labels.append(np.full(len(px), digit, dtype=np.uint8))
    return images, labels


def read_mlxtend_csv(path: Path):
    arr = np.loadtxt(gzip.open(path, "rt"), delimiter=",", dtype=np.int64)
    lab, px = arr[:, 0], arr[:, 1:].astype(np.uint8)
    return [px[lab == d] for d in range(10)], [lab[lab == d].astype(np.uint8) for d in range(10)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--test-fraction", type=float, default=0.2)
    args = ap.parse_args()

    if args.source.is_dir():
        images, labels = read_npm_digits(args.source)
    else:
        images, labels = read_mlxtend_csv(args.source)

    tr_x, tr_y, te_x, te_y = [], [], [], []
    for px, lab in zip(images, labels):
        n_test = int(round(len(px) * args.test_fraction))
        tr_x.append(px[: len(px) - n_test])
        tr_y.append(lab[: len(px) - n_test])
        te_x.append(px[len(px) - n_test :])
        te_y.append(lab[len(px) - n_test :])

    rng = np.random.default_rng(0)
    args.out.mkdir(parents=True, exist_ok=True)
    for prefix, xs, ys in (("train", tr_x, tr_y), ("t10k", te_x, te_y)):
        x, y = np.vstack(xs), np.concatenate(ys)
        perm = rng.permutation(len(y))
        write_idx_images(args.out / f"{prefix}-images-idx3-ubyte.gz", x[perm])
        write_idx_labels(args.out / f"{prefix}-labels-idx1-ubyte.gz", y[perm])
        print(f"{prefix}: {len(y)} examples, per class {np.bincount(y, minlength=10).tolist()}")


if __name__ == "__main__":
    main()
