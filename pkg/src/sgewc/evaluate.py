"""Retention metrics, fixed-z drift traces, sample grids and the auxiliary MNIST classifier."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, SyntheticTaskSpec
from .nets import CondGan, Mlp, MlpSpec, generate, one_hot_batch, sample_noise
from .optim import Adam
from .tensor import Tensor

REPORT_HEADER = ["lambda", "seed", "regime", "class", "metric", "value"]


# ---------------------------------------------------------------------------
# retention metrics


@dataclass
class RetentionEntry:
    class_id: int
    metric: str
    value: float
    trained: bool = True


@dataclass
class RetentionReport:
    regime: str
    lam: float
    seed: int
    entries: list[RetentionEntry] = field(default_factory=list)
    confusion: dict[int, list[float]] = field(default_factory=dict)

    def value(self, class_id: int, metric: str) -> float:
        for e in self.entries:
            if e.class_id == class_id and e.metric == metric:
                return e.value
        raise KeyError((class_id, metric))

    def to_json(self) -> str:
        d = asdict(self)
        d["confusion"] = {str(k): v for k, v in self.confusion.items()}
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RetentionReport":
        d = json.loads(text)
        entries = [RetentionEntry(**e) for e in d.pop("entries")]
        confusion = {int(k): v for k, v in d.pop("confusion", {}).items()}
        return cls(entries=entries, confusion=confusion, **d)


def moment_gaps(samples: np.ndarray, mean, sigma: float) -> tuple[float, float]:
    """(||sample mean - mean||, |mean per-axis sample std - sigma|)."""
    mean_gap = float(np.linalg.norm(samples.mean(axis=0) - np.asarray(mean, dtype=np.float64)))
    std_gap = float(abs(samples.std(axis=0).mean() - sigma))
    return mean_gap, std_gap


def retention_metrics_synthetic(
    gan: CondGan, spec: SyntheticTaskSpec, classes: Iterable[int], n_gen: int, rng: np.random.Generator
) -> list[RetentionEntry]:
    out = []
    for c in classes:
        z = sample_noise(rng, n_gen, gan.z_dim)
        pts = spec.unsquash(generate(gan, z, np.full(n_gen, c)))
        mean_gap, std_gap = moment_gaps(pts, spec.means[c], spec.sigma)
        out += [RetentionEntry(int(c), "mean_gap", mean_gap), RetentionEntry(int(c), "std_gap", std_gap)]
    return out


class MnistClassifier:
    """784-128-10 ReLU MLP trained with softmax cross-entropy."""

    def __init__(self, rng: np.random.Generator, hidden: int = 128, n_classes: int = 10):
        self.net = Mlp.init(MlpSpec(784, (hidden,), n_classes, "relu", "linear"), rng, prefix="C.")
        self.n_classes = n_classes

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net(Tensor(x)).data

    def predict(self, x: np.ndarray, batch: int = 1000) -> np.ndarray:
        return np.concatenate([self.logits(x[i : i + batch]).argmax(axis=1) for i in range(0, len(x), batch)])

    def accuracy(self, ds: Dataset) -> float:
        return float((self.predict(ds.x) == ds.labels).mean())

    def per_class_accuracy(self, ds: Dataset) -> dict[int, float]:
        pred = self.predict(ds.x)
        return {c: float((pred[ds.labels == c] == c).mean()) for c in ds.classes()}

    def fit(self, ds: Dataset, epochs: int = 15, batch: int = 64, lr: float = 1e-3, rng=None,
            shift_augment: bool = True) -> "MnistClassifier":
        rng = rng if rng is not None else np.random.default_rng(0)
        opt = Adam(self.net.params, lr=lr, beta1=0.9, beta2=0.999)
        params = self.net.params.tensors()
        for _ in range(epochs):
            order = rng.permutation(len(ds))
            for s in range(0, len(order), batch):
                x, y = ds.x[order[s : s + batch]], ds.labels[order[s : s + batch]]
                if shift_augment:
                    x = _random_shift(x, rng)
                self.net.params.zero_grad()
                T.backward(T.softmax_cross_entropy(self.net(Tensor(x)), y), params)
                opt.step()
        return self

    def save(self, path) -> None:
        np.savez(path, **{n: t.data for n, t in self.net.params})

    @classmethod
    def load(cls, path) -> "MnistClassifier":
        arrs = np.load(path)
        clf = cls(np.random.default_rng(0), hidden=arrs["C.l0.W"].shape[1], n_classes=arrs["C.l1.W"].shape[1])
        for n, t in clf.net.params:
            t.data = arrs[n].astype(np.float64)
        return clf


def _random_shift(x: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    """Translate each image by up to ``max_shift`` pixels (zero fill)."""
    n = len(x)
    pad = np.pad(x.reshape(n, 28, 28), ((0, 0), (max_shift, max_shift), (max_shift, max_shift)))
    dy, dx = rng.integers(0, 2 * max_shift + 1, size=(2, n))
    rows = dy[:, None] + np.arange(28)[None, :]
    cols = dx[:, None] + np.arange(28)[None, :]
    out = pad[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    return out.reshape(n, 784)


def train_classifier(train: Dataset, seed: int = 0, epochs: int = 40) -> MnistClassifier:
    rng = np.random.default_rng(seed)
    return MnistClassifier(rng).fit(train, epochs=epochs, rng=rng)


def retention_metrics_mnist(
    gan: CondGan, classifier: MnistClassifier, classes: Iterable[int], n_gen: int, rng: np.random.Generator,
    trained_classes: Sequence[int] | None = None,
) -> tuple[list[RetentionEntry], dict[int, list[float]]]:
    """Fraction of G(., c) samples the classifier labels c, plus the confusion row."""
    entries, confusion = [], {}
    for c in classes:
        z = sample_noise(rng, n_gen, gan.z_dim)
        pred = classifier.predict(generate(gan, z, np.full(n_gen, c)))
        row = np.bincount(pred, minlength=classifier.n_classes) / n_gen
        trained = trained_classes is None or c in trained_classes
        entries.append(RetentionEntry(int(c), "accuracy", float(row[c]), trained))
        confusion[int(c)] = row.tolist()
    return entries, confusion


# ---------------------------------------------------------------------------
# drift traces


@dataclass
class DriftTrace:
    class_id: int
    z: np.ndarray
    steps: list[int] = field(default_factory=list)
    images: list[np.ndarray] = field(default_factory=list)
    distances: list[float] = field(default_factory=list)

    @property
    def final(self) -> float:
        return self.distances[-1]


class DriftRecorder:
    """Step hook recording G(z, class) at a fixed z during one task.

    Distances are raw L2 in output space from the sample at the session's
    first recorded step (step 0).
    """

    def __init__(self, z: np.ndarray, class_id: int, task_index: int, cadence: int = 50):
        self.trace = DriftTrace(class_id, np.asarray(z, dtype=np.float64).reshape(1, -1))
        self.task_index = task_index
        self.cadence = cadence
        self._last_step = None
        self._last_gan = None

    def __call__(self, task_index: int, step: int, epoch: int, gan: CondGan) -> None:
        if task_index != self.task_index:
            return
        self._last_step, self._last_gan = step, gan
        if step % self.cadence == 0:
            self._record(step, gan)

    def _record(self, step: int, gan: CondGan) -> None:
        img = generate(gan, self.trace.z, [self.trace.class_id])[0].copy()
        ref = self.trace.images[0] if self.trace.images else img
        self.trace.steps.append(step)
        self.trace.images.append(img)
        self.trace.distances.append(float(np.linalg.norm(img - ref)))

    def finish(self) -> DriftTrace:
        """Record the last seen step if the cadence skipped it."""
        if self._last_gan is not None and (not self.trace.steps or self.trace.steps[-1] != self._last_step):
            self._record(self._last_step, self._last_gan)
        return self.trace


def drift_trace(train_fn, z: np.ndarray, class_id: int, task_index: int, cadence: int = 50) -> DriftTrace:
    """Run ``train_fn(hooks)`` with a drift recorder attached and return its trace."""
    rec = DriftRecorder(z, class_id, task_index, cadence)
    train_fn([rec])
    return rec.finish()


# ---------------------------------------------------------------------------
# images


def quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def sample_grid(gan: CondGan, classes: Sequence[int], n_rows: int, rng: np.random.Generator,
                side: int = 28) -> np.ndarray:
    """uint8 grid: one column per class, one row per shared z."""
    if gan.spec.data_dim != side * side:
        raise ValueError(f"sample_grid needs square image outputs, data_dim={gan.spec.data_dim}")
    one_hot_batch(list(classes), gan.K)  # capacity check
    z = sample_noise(rng, n_rows, gan.z_dim)
    grid = np.zeros((n_rows * side, len(classes) * side), dtype=np.uint8)
    for j, c in enumerate(classes):
        imgs = quantize(generate(gan, z, np.full(n_rows, c)))
        for i in range(n_rows):
            grid[i * side : (i + 1) * side, j * side : (j + 1) * side] = imgs[i].reshape(side, side)
    return grid


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_png(path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="L").save(path)


def saliency_image(maps: dict[int, np.ndarray], side: int = 28) -> np.ndarray:
    return np.hstack([quantize(maps[c]).reshape(side, side) for c in sorted(maps)])


def border_center_means(img: np.ndarray, side: int = 28, border: int = 4, center: int = 20) -> tuple[float, float]:
    im = np.asarray(img, dtype=np.float64).reshape(side, side)
    mask = np.zeros((side, side), dtype=bool)
    mask[:border, :] = mask[-border:, :] = mask[:, :border] = mask[:, -border:] = True
    lo = (side - center) // 2
    return float(im[mask].mean()), float(im[lo : lo + center, lo : lo + center].mean())


# ---------------------------------------------------------------------------
# reports


def report_rows(report: RetentionReport, metric: str) -> list[list]:
    return [
        [report.lam, report.seed, report.regime, e.class_id, e.metric, e.value]
        for e in report.entries
        if e.metric == metric
    ]


def write_report_csv(path, reports: Sequence[RetentionReport], metric: str) -> int:
    rows = [r for rep in reports for r in report_rows(rep, metric)]
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        w.writerows(rows)
    return len(rows)
