"""MNIST IDX ingestion, class filtering and synthetic 2-D Gaussian mixture tasks."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .nets import one_hot_batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _read_idx(path, magic: int, ndim: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < n:
        raise IdxTruncatedError(f"{path}: payload has {len(payload)} bytes, header promises {n}")
    return dims, np.frombuffer(payload, dtype=np.uint8, count=n)


def load_idx_images(path) -> np.ndarray:
    """Images as a float64 array [N x rows*cols] scaled to [0, 1]."""
    (n, rows, cols), px = _read_idx(path, IDX_IMAGES_MAGIC, 3)
    return px.reshape(n, rows * cols).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    (n,), lab = _read_idx(path, IDX_LABELS_MAGIC, 1)
    return lab.astype(np.int64)


def write_idx_images(path, images: np.ndarray, rows: int = 28, cols: int = 28) -> None:
    """``images`` are uint8 [N x rows*cols]; gzip if the name ends in .gz."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, rows * cols)
    raw = struct.pack(">IIII", IDX_IMAGES_MAGIC, len(images), rows, cols) + images.tobytes()
    _write(path, raw)


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    _write(path, struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def _write(path, raw: bytes) -> None:
    path = Path(path)
    path.write_bytes(gzip.compress(raw, mtime=0) if path.suffix == ".gz" else raw)


class Dataset:
    """Immutable (x, class_id) collection with a read-audit counter.

    ``reads`` counts examples handed out through ``take``/``minibatches``;
    the trainer uses it to prove completed tasks are never revisited.
    """

    def __init__(self, x: np.ndarray, labels: np.ndarray, name: str = ""):
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if x.ndim != 2 or len(x) != len(labels):
            raise ValueError(f"dataset needs x [N x d] and N labels, got {x.shape} and {labels.shape}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValueError("dataset values must lie in [0, 1]")
        x.flags.writeable = False
        labels.flags.writeable = False
        self.x = x
        self.labels = labels
        self.name = name
        self.reads = 0

    @property
    def data_dim(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def take(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.reads += len(idx)
        return self.x[idx], self.labels[idx]

    def counts(self) -> dict[int, int]:
        vals, cnt = np.unique(self.labels, return_counts=True)
        return dict(zip(vals.tolist(), cnt.tolist()))


def load_mnist(directory, split: str = "train") -> Dataset:
    """Load ``{split}-images-idx3-ubyte[.gz]`` / ``{split}-labels-idx1-ubyte[.gz]``."""
    prefix = {"train": "train", "test": "t10k", "t10k": "t10k"}[split]
    d = Path(directory)

    def find(stem):
        for cand in (d / stem, d / f"{stem}.gz"):
            if cand.exists():
                return cand
        raise FileNotFoundError(f"{stem}[.gz] not found in {d}")

    x = load_idx_images(find(f"{prefix}-images-idx3-ubyte"))
    y = load_idx_labels(find(f"{prefix}-labels-idx1-ubyte"))
    if len(x) != len(y):
        raise IdxCountMismatchError(f"{d}: {len(x)} images but {len(y)} labels")
    return Dataset(x, y, name=f"mnist-{split}")


def filter_classes(ds: Dataset, classes) -> Dataset:
    keep = np.isin(ds.labels, np.asarray(sorted(set(int(c) for c in classes)), dtype=np.int64))
    return Dataset(ds.x[keep], ds.labels[keep], name=f"{ds.name}{sorted(set(classes))}")


def concat_datasets(parts: list[Dataset], name: str = "") -> Dataset:
    return Dataset(np.vstack([p.x for p in parts]), np.concatenate([p.labels for p in parts]), name=name)


# ---------------------------------------------------------------------------
# synthetic mixtures


@dataclass(frozen=True)
class SyntheticTaskSpec:
    means: tuple[tuple[float, float], ...]
    sigma: float = 0.3
    n_per_class: int = 2000
    # half-width of the squash window, in multiples of sigma past the outermost mean
    margin_sigmas: float = 4.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if len(set(map(tuple, self.means))) != len(self.means):
            raise ValueError("class means must be pairwise distinct")

    def squash_bounds(self) -> tuple[np.ndarray, float]:
        """Offset and scale of the global affine map into [0, 1]^2 (same scale on both axes)."""
        mu = np.asarray(self.means, dtype=np.float64)
        lo = mu.min(axis=0) - self.margin_sigmas * self.sigma
        hi = mu.max(axis=0) + self.margin_sigmas * self.sigma
        width = float((hi - lo).max())
        center = (lo + hi) / 2.0
        return center - width / 2.0, width

    def squash(self, pts: np.ndarray) -> np.ndarray:
        lo, width = self.squash_bounds()
        return (np.asarray(pts) - lo) / width

    def unsquash(self, pts: np.ndarray) -> np.ndarray:
        lo, width = self.squash_bounds()
        return np.asarray(pts) * width + lo


def make_synthetic(spec: SyntheticTaskSpec, rng: np.random.Generator, classes=None) -> Dataset:
    classes = range(len(spec.means)) if classes is None else classes
    xs, ys = [], []
    for c in classes:
        pts = rng.normal(spec.means[c], spec.sigma, size=(spec.n_per_class, 2))
        xs.append(spec.squash(pts))
        ys.append(np.full(spec.n_per_class, c))
    # draws beyond margin_sigmas are rare; clip keeps the [0,1] invariant
    x = np.clip(np.vstack(xs), 0.0, 1.0)
    return Dataset(x, np.concatenate(ys), name="synthetic")


# ---------------------------------------------------------------------------
# batching


def minibatches(ds: Dataset, batch: int, rng: np.random.Generator, K: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """One shuffled epoch of ``(x, onehot_y, labels)``; the last short batch is kept."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    order = rng.permutation(len(ds))
    for start in range(0, len(order), batch):
        x, labels = ds.take(order[start : start + batch])
        yield x, one_hot_batch(labels, K), labels
