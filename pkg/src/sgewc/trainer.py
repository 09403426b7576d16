"""Sequential task training under the naive, ewc and replay regimes."""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, SyntheticTaskSpec, concat_datasets, filter_classes, load_mnist, make_synthetic, minibatches
from .nets import (
    CondGan,
    GanSpec,
    disc_forward,
    gen_forward,
    generate,
    init_cond_gan,
    load_checkpoint,
    sample_noise,
    save_checkpoint,
)
from .objectives import ConsolidationRecord, augmented_gen_loss, consolidation_record, disc_loss
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

REGIMES = ("naive", "ewc", "replay")

# Sub-stream tags mixed into per-task seeds so each consumer draws independently.
_FISHER_STREAM = 1
_REPLAY_STREAM = 2


@dataclass(frozen=True)
class TaskSpec:
    class_ids: tuple[int, ...]
    source: str = "synthetic"
    epochs: int = 20
    batch_size: int = 64
    # fixed iteration budget; overrides epochs when set
    steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if not self.class_ids:
            raise ValueError("a task needs at least one class")
        if self.source not in ("synthetic", "mnist"):
            raise ValueError(f"unknown task source {self.source!r}")


@dataclass
class RunConfig:
    tasks: list[TaskSpec]
    regime: str = "ewc"
    lam: float = 1000.0
    fisher_samples: int = 2048
    fisher_workers: int = 1
    init_seed: int = 0
    data_seed: int = 0
    noise_seed: int = 0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    z_dim: int = 64
    hidden: int = 128
    K: int = 10
    d_steps: int = 1
    log_every: int = 50
    out_dir: str | None = None
    mnist_dir: str = "data/mnist"
    synthetic: SyntheticTaskSpec | None = None
    replay_per_class: int | None = None
    checkpoint_every_task: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not self.tasks:
            raise ValueError("config has no tasks")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        sources = {t.source for t in self.tasks}
        if len(sources) != 1:
            raise ValueError(f"all tasks must share one data source, got {sorted(sources)}")
        for t in self.tasks:
            if max(t.class_ids) >= self.K or min(t.class_ids) < 0:
                raise ValueError(f"task classes {t.class_ids} exceed conditional capacity K={self.K}")
        if self.source == "synthetic":
            if self.synthetic is None:
                raise ValueError("synthetic tasks need synthetic means")
            if max(max(t.class_ids) for t in self.tasks) >= len(self.synthetic.means):
                raise ValueError("task class without a synthetic mean")

    @property
    def source(self) -> str:
        return self.tasks[0].source

    @property
    def data_dim(self) -> int:
        return 784 if self.source == "mnist" else 2

    def gan_spec(self) -> GanSpec:
        return GanSpec(z_dim=self.z_dim, data_dim=self.data_dim, hidden=self.hidden, K=self.K)

    def with_(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tasks"] = [dataclasses.asdict(t) for t in self.tasks]
        return d


# ---------------------------------------------------------------------------
# config files


def _parse_tasks(text: str) -> list[tuple[int, ...]]:
    return [tuple(int(c) for c in chunk.split(",") if c.strip()) for chunk in text.split(";") if chunk.strip()]


def _parse_means(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for chunk in text.split(";"):
        if chunk.strip():
            a, b = (float(v) for v in chunk.split(","))
            out.append((a, b))
    return tuple(out)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines with ``#`` comments, as a dict."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",), interpolation=None)
    cp.read_string("[run]\n" + path.read_text())
    return dict(cp["run"])


def load_config(path, **overrides) -> RunConfig:
    """Read a config file into a RunConfig; ``overrides`` use field names and win over the file."""
    return config_from_mapping(read_config_file(path), base_dir=Path(path).parent, **overrides)


def config_from_mapping(kv: dict, base_dir=None, **overrides) -> RunConfig:
    kv = {k.strip().lower(): str(v).strip() for k, v in kv.items()}
    known = {
        "source", "tasks", "epochs", "steps", "batch_size", "regime", "lambda", "fisher_samples",
        "fisher_workers", "seed", "init_seed", "data_seed", "noise_seed", "lr", "lr_g", "lr_d", "beta1",
        "beta2", "adam_eps", "z_dim", "hidden", "k", "d_steps", "log_every", "out", "mnist_dir",
        "synthetic_means", "synthetic_sigma", "synthetic_n", "synthetic_margin", "replay_per_class",
    }
    unknown = set(kv) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "tasks" not in kv:
        raise ValueError("config must define tasks")
    source = kv.get("source", "synthetic")
    steps = int(kv["steps"]) if kv.get("steps") else None
    if steps is None and source == "synthetic" and not kv.get("epochs"):
        steps = 200
    tasks = [
        TaskSpec(classes, source, int(kv.get("epochs", 20)), int(kv.get("batch_size", 64)), steps)
        for classes in _parse_tasks(kv["tasks"])
    ]
    seed = int(kv.get("seed", 0))
    args: dict = dict(tasks=tasks)
    simple = {
        "regime": ("regime", str), "lambda": ("lam", float), "fisher_samples": ("fisher_samples", int),
        "fisher_workers": ("fisher_workers", int), "lr_g": ("lr_g", float), "lr_d": ("lr_d", float),
        "beta1": ("beta1", float), "beta2": ("beta2", float), "adam_eps": ("adam_eps", float),
        "z_dim": ("z_dim", int), "hidden": ("hidden", int), "k": ("K", int), "d_steps": ("d_steps", int),
        "log_every": ("log_every", int), "out": ("out_dir", str), "mnist_dir": ("mnist_dir", str),
        "replay_per_class": ("replay_per_class", int),
    }
    if "lr" in kv:
        args["lr_g"] = args["lr_d"] = float(kv["lr"])
    for key, (name, typ) in simple.items():
        if kv.get(key):
            args[name] = typ(kv[key])
    for name in ("init_seed", "data_seed", "noise_seed"):
        args[name] = int(kv[name]) if kv.get(name) else seed
    if "seed" in overrides:
        s = overrides.pop("seed")
        if s is not None:
            args.update(init_seed=s, data_seed=s, noise_seed=s)
    if source == "synthetic":
        means = _parse_means(kv.get("synthetic_means", "-1,0;1,0"))
        args["synthetic"] = SyntheticTaskSpec(
            means, float(kv.get("synthetic_sigma", 0.3)), int(kv.get("synthetic_n", 2000)),
            float(kv.get("synthetic_margin", 4.0)),
        )
    if base_dir is not None and "mnist_dir" in args and not os.path.isabs(args["mnist_dir"]):
        cand = Path(base_dir) / args["mnist_dir"]
        if cand.exists():
            args["mnist_dir"] = str(cand)
    args.update({k: v for k, v in overrides.items() if v is not None})
    if args.get("regime") == "naive" and ("lambda" in kv or overrides.get("lam") is not None):
        warnings.warn("lambda is ignored under the naive regime", stacklevel=2)
    return RunConfig(**args)


# ---------------------------------------------------------------------------
# run log


@dataclass
class TaskSummary:
    task_index: int
    class_ids: tuple[int, ...]
    steps: int
    examples_trained: int
    examples_regenerated: int
    dataset_size: int
    wall_s: float
    cross_task_reads: int = 0
    final: dict = field(default_factory=dict)


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    tasks: list[TaskSummary] = field(default_factory=list)

    def extend(self, other: "RunLog") -> None:
        self.steps.extend(other.steps)
        self.tasks.extend(other.tasks)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec) + "\n")

    def cumulative_steps(self) -> list[int]:
        return [int(v) for v in np.cumsum([t.steps for t in self.tasks])]


StepHook = Callable[[int, int, int, CondGan], None]


# ---------------------------------------------------------------------------
# training


def task_rng(seed: int, task_index: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(task_index), *stream])


def task_dataset(config: RunConfig, task_index: int, task: TaskSpec, mnist: Dataset | None = None) -> Dataset:
    if task.source == "mnist":
        base = mnist if mnist is not None else load_mnist(config.mnist_dir, "train")
        ds = filter_classes(base, task.class_ids)
    else:
        ds = make_synthetic(config.synthetic, task_rng(config.data_seed, task_index, 7), classes=task.class_ids)
    ds.name = f"task{task_index}:{list(task.class_ids)}"
    return ds


def _steps_for(task: TaskSpec, n_examples: int, n_new: int) -> int:
    if task.steps is not None:
        # fixed budget is per new-data pass; replay scales it with the enlarged set
        return int(math.ceil(task.steps * n_examples / n_new))
    return task.epochs * int(math.ceil(n_examples / task.batch_size))


def train_task(
    gan: CondGan,
    task_index: int,
    task: TaskSpec,
    dataset: Dataset,
    records: Sequence[ConsolidationRecord],
    config: RunConfig,
    hooks: Sequence[StepHook] = (),
    n_new: int | None = None,
) -> RunLog:
    """Alternate D and G updates over ``dataset`` for one task.

    Both optimizers start fresh. Under ``ewc`` the generator loss carries the
    penalty of every record; other regimes ignore ``records``.
    """
    if config.regime == "naive" and records:
        warnings.warn("records passed to a naive-regime task are ignored", stacklevel=2)
    active = list(records) if config.regime == "ewc" else []
    G, D = gan.generator.params, gan.discriminator.params
    opt_g = Adam(G, config.lr_g, config.beta1, config.beta2, config.adam_eps)
    opt_d = Adam(D, config.lr_d, config.beta1, config.beta2, config.adam_eps)
    data_rng = task_rng(config.data_seed, task_index)
    noise_rng = task_rng(config.noise_seed, task_index)
    total_steps = _steps_for(task, len(dataset), n_new or len(dataset))
    out = RunLog()
    t0 = time.perf_counter()
    step = epoch = trained = 0
    for hook in hooks:
        hook(task_index, 0, 0, gan)
    while step < total_steps:
        for x, y, _ in minibatches(dataset, task.batch_size, data_rng, gan.K):
            if step >= total_steps:
                break
            xt, yt = Tensor(x), Tensor(y)
            for _ in range(config.d_steps):
                z = Tensor(sample_noise(noise_rng, len(x), gan.z_dim))
                D.zero_grad()
                d_loss = disc_loss(disc_forward(gan, xt, yt), disc_forward(gan, gen_forward(gan, z, yt), yt))
                T.backward(d_loss, D.tensors())
                opt_d.step()
            z = Tensor(sample_noise(noise_rng, len(x), gan.z_dim))
            G.zero_grad()
            d_fake = disc_forward(gan, gen_forward(gan, z, yt), yt)
            g_total, penalty = augmented_gen_loss(d_fake, G, active, config.lam)
            g_val, pen_val = g_total.item(), penalty.item()
            T.backward(g_total, G.tensors())
            opt_g.step()
            step += 1
            trained += len(x)
            if step % config.log_every == 0 or step == total_steps or step == 1:
                out.steps.append(
                    dict(task=task_index, epoch=epoch, step=step, d_loss=d_loss.item(),
                         g_loss=g_val - pen_val, penalty=pen_val,
                         wall_ms=round(1000 * (time.perf_counter() - t0), 3))
                )
            for hook in hooks:
                hook(task_index, step, epoch, gan)
        epoch += 1
    out.tasks.append(
        TaskSummary(task_index, task.class_ids, step, trained, 0, len(dataset), time.perf_counter() - t0)
    )
    return out


def consolidate(gan: CondGan, task_index: int, task: TaskSpec, config: RunConfig) -> ConsolidationRecord:
    rng = task_rng(config.noise_seed, task_index, _FISHER_STREAM)
    return consolidation_record(gan, task_index, task.class_ids, config.fisher_samples, rng,
                                workers=config.fisher_workers)


def regenerate(gan: CondGan, per_class: dict[int, int], rng: np.random.Generator) -> Dataset:
    """Samples from the current generator for each class, to be labelled real."""
    xs, ys = [], []
    for c, n in sorted(per_class.items()):
        z = sample_noise(rng, n, gan.z_dim)
        xs.append(generate(gan, z, np.full(n, c)))
        ys.append(np.full(n, c))
    return Dataset(np.clip(np.vstack(xs), 0.0, 1.0), np.concatenate(ys), name="regenerated")


@dataclass
class RunResult:
    gan: CondGan
    records: list[ConsolidationRecord]
    log: RunLog
    task_classes: list[tuple[int, ...]]
    checkpoints: list[Path]


def run_sequence(
    config: RunConfig,
    hooks: Sequence[StepHook] = (),
    resume_from=None,
    stop_after: int | None = None,
) -> RunResult:
    """Train the configured tasks in order.

    ``resume_from`` is a checkpoint path; completed tasks recorded there are
    skipped. ``stop_after`` ends the run after that many tasks in total.
    Under ``ewc`` every task is followed by consolidation; under ``replay``
    each task trains on its data plus regenerated samples of every earlier
    class.
    """
    spec = config.gan_spec()
    records: list[ConsolidationRecord] = []
    task_classes: list[tuple[int, ...]] = []
    if resume_from is not None:
        ck = load_checkpoint(resume_from, spec)
        gan, task_classes = ck.gan, list(ck.task_classes)
        records = ck.records if config.regime == "ewc" else []
        expected = [t.class_ids for t in config.tasks[: len(task_classes)]]
        if [tuple(c) for c in task_classes] != expected:
            raise ValueError(f"checkpoint tasks {task_classes} do not match config prefix {expected}")
    else:
        gan = init_cond_gan(spec, np.random.default_rng(config.init_seed))
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    mnist = load_mnist(config.mnist_dir, "train") if config.source == "mnist" else None

    result = RunResult(gan, records, RunLog(), task_classes, [])
    class_counts: dict[int, int] = {}
    for t in range(len(task_classes)):
        class_counts.update(task_dataset(config, t, config.tasks[t], mnist).counts())
    finished: list[tuple[Dataset, int]] = []
    last = len(config.tasks) if stop_after is None else min(stop_after, len(config.tasks))
    for t in range(len(task_classes), last):
        task = config.tasks[t]
        ds = task_dataset(config, t, task, mnist)
        n_new = len(ds)
        regenerated = 0
        if config.regime == "replay" and class_counts:
            want = {c: (config.replay_per_class or n) for c, n in class_counts.items() if c not in task.class_ids}
            if want:
                regen = regenerate(gan, want, task_rng(config.noise_seed, t, _REPLAY_STREAM))
                regenerated = len(regen)
                ds = concat_datasets([ds, regen], name=f"{ds.name}+replay")
        log.info("task %d classes=%s regime=%s examples=%d", t, task.class_ids, config.regime, len(ds))
        try:
            seg = train_task(gan, t, task, ds, records, config, hooks, n_new=n_new)
        except Exception:
            if out_dir:
                save_checkpoint(out_dir / "partial.ckpt", gan, records, task_classes)
            raise
        seg.tasks[-1].examples_regenerated = regenerated
        seg.tasks[-1].cross_task_reads = sum(d.reads - r for d, r in finished)
        if config.regime == "ewc":
            records.append(consolidate(gan, t, task, config))
        task_classes.append(task.class_ids)
        class_counts.update(filter_classes(ds, task.class_ids).counts())
        finished.append((ds, ds.reads))
        result.log.extend(seg)
        if out_dir and config.checkpoint_every_task:
            path = out_dir / f"task{t}.ckpt"
            save_checkpoint(path, gan, records, task_classes)
            result.checkpoints.append(path)
    if out_dir:
        result.log.write_jsonl(out_dir / "runlog.jsonl")
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, default=str))
    return result


def replay_baseline(config: RunConfig, **kw) -> RunResult:
    return run_sequence(config.with_(regime="replay"), **kw)
