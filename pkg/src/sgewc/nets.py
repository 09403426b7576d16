"""Conditional MLP generator/discriminator, parameter stores and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


class CapacityError(ValueError):
    """A class id does not fit the declared conditional capacity K."""


class CheckpointFormatError(ValueError):
    pass


class CheckpointTruncatedError(CheckpointFormatError):
    pass


class CheckpointDimensionError(CheckpointFormatError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all MLP dims must be >= 1, got {dims}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)


class ParameterStore:
    """Ordered, fixed-layout collection of named trainable tensors."""

    def __init__(self, entries: list[tuple[str, Tensor]]):
        names = [n for n, _ in entries]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        self._entries = {n: t for n, t in entries}

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def numel(self) -> int:
        return sum(t.size for t in self._entries.values())

    def offsets(self) -> dict[str, slice]:
        out, start = {}, 0
        for n, t in self._entries.items():
            out[n] = slice(start, start + t.size)
            start += t.size
        return out

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.zero_grad()

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._entries.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate(
            [(t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1) for t in self._entries.values()]
        )

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.numel(),):
            raise CheckpointDimensionError(f"flat vector has {vec.size} elements, store holds {self.numel()}")
        for name, sl in self.offsets().items():
            t = self._entries[name]
            t.data = vec[sl].reshape(t.shape).copy()


class Mlp:
    def __init__(self, spec: MlpSpec, params: ParameterStore):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator, prefix: str = "") -> "Mlp":
        entries = []
        for i, (din, dout) in enumerate(spec.layer_dims):
            W = rng.normal(0.0, INIT_STD, size=(din, dout))
            entries.append((f"{prefix}l{i}.W", Tensor(W, requires_grad=True)))
            entries.append((f"{prefix}l{i}.b", Tensor(np.zeros((1, dout)), requires_grad=True)))
        return cls(spec, ParameterStore(entries))

    def __call__(self, x: Tensor) -> Tensor:
        ts = self.params.tensors()
        n_layers = len(self.spec.layer_dims)
        h = x
        for i in range(n_layers):
            h = T.add(T.matmul(h, ts[2 * i]), ts[2 * i + 1])
            act = self.spec.hidden_activation if i < n_layers - 1 else self.spec.output_activation
            h = _activate(h, act)
        return h


def _activate(h: Tensor, name: str) -> Tensor:
    if name == "relu":
        return T.relu(h)
    if name == "sigmoid":
        return T.sigmoid(h)
    if name == "linear":
        return h
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class GanSpec:
    z_dim: int = 64
    data_dim: int = 784
    hidden: int = 128
    K: int = 10

    def __post_init__(self):
        if self.z_dim < 1 or self.K < 1 or self.data_dim < 1 or self.hidden < 1:
            raise ValueError(f"invalid GAN dims: {self}")

    def generator_spec(self) -> MlpSpec:
        return MlpSpec(self.z_dim + self.K, (self.hidden,), self.data_dim)

    def discriminator_spec(self) -> MlpSpec:
        return MlpSpec(self.data_dim + self.K, (self.hidden,), 1)


@dataclass
class CondGan:
    spec: GanSpec
    generator: Mlp
    discriminator: Mlp

    @property
    def z_dim(self) -> int:
        return self.spec.z_dim

    @property
    def K(self) -> int:
        return self.spec.K


def init_cond_gan(spec: GanSpec, rng: np.random.Generator) -> CondGan:
    g = Mlp.init(spec.generator_spec(), rng, prefix="G.")
    d = Mlp.init(spec.discriminator_spec(), rng, prefix="D.")
    return CondGan(spec, g, d)


def _check_batch(a: Tensor, b: Tensor, a_dim: int, b_dim: int, what: str) -> None:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise T.ShapeError(f"{what}: inputs must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise T.ShapeError(f"{what}: batch sizes differ ({a.shape[0]} vs {b.shape[0]})")
    if a.shape[1] != a_dim or b.shape[1] != b_dim:
        raise T.ShapeError(f"{what}: expected widths ({a_dim}, {b_dim}), got ({a.shape[1]}, {b.shape[1]})")


def gen_forward(gan: CondGan, z: Tensor, y: Tensor) -> Tensor:
    _check_batch(z, y, gan.spec.z_dim, gan.spec.K, "gen_forward")
    return gan.generator(T.concat_cols(z, y))


def disc_forward(gan: CondGan, x: Tensor, y: Tensor) -> Tensor:
    _check_batch(x, y, gan.spec.data_dim, gan.spec.K, "disc_forward")
    return gan.discriminator(T.concat_cols(x, y))


def one_hot(class_id: int, K: int) -> np.ndarray:
    if not 0 <= class_id < K:
        raise CapacityError(f"class id {class_id} outside conditional capacity K={K}")
    row = np.zeros((1, K))
    row[0, class_id] = 1.0
    return row


def one_hot_batch(class_ids, K: int) -> np.ndarray:
    ids = np.asarray(class_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= K):
        raise CapacityError(f"class ids {sorted(set(ids.tolist()))} exceed conditional capacity K={K}")
    out = np.zeros((ids.size, K))
    out[np.arange(ids.size), ids] = 1.0
    return out


def sample_noise(rng: np.random.Generator, n: int, z_dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, z_dim))


def generate(gan: CondGan, z: np.ndarray, class_ids) -> np.ndarray:
    """Graph-free sampling helper: G(z, onehot(class_ids)) as a plain array."""
    y = one_hot_batch(class_ids, gan.K)
    return gen_forward(gan, Tensor(z), Tensor(y)).data


def snapshot(params: ParameterStore) -> np.ndarray:
    vec = params.flat().copy()
    vec.flags.writeable = False
    return vec


# ---------------------------------------------------------------------------
# checkpoint I/O

MAGIC = b"SGEWC01\0"
KIND_PARAM, KIND_FISHER, KIND_SNAPSHOT = 0, 1, 2


@dataclass
class Checkpoint:
    gan: CondGan
    records: list = field(default_factory=list)
    task_classes: list[tuple[int, ...]] = field(default_factory=list)


def save_checkpoint(path, gan: CondGan, records=(), task_classes=None) -> None:
    """Write parameters, consolidation records and completed task class sets.

    ``task_classes`` lists the class ids of every completed task in order; it
    defaults to the class sets carried by ``records``.
    """
    records = list(records)
    if task_classes is None:
        task_classes = [tuple(r.class_ids) for r in records]
    entries: list[tuple[str, int, int, np.ndarray]] = []
    for store in (gan.generator.params, gan.discriminator.params):
        for name, t in store:
            entries.append((name, KIND_PARAM, 0, t.data.reshape(-1)))
    for r in records:
        # sample_count rides in the entry name so the record round-trips whole
        entries.append((f"fisher:{r.sample_count}", KIND_FISHER, r.task_index, r.fisher_diag))
        entries.append(("snapshot", KIND_SNAPSHOT, r.task_index, r.theta_star))

    buf = bytearray(MAGIC)
    buf += struct.pack("<I", len(entries))
    for name, kind, task, values in entries:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb)) + nb
        buf += struct.pack("<BII", kind, task, values.size)
        buf += np.ascontiguousarray(values, dtype="<f8").tobytes()
    buf += struct.pack("<I", len(task_classes))
    for classes in task_classes:
        buf += struct.pack("<H", len(classes))
        buf += struct.pack(f"<{len(classes)}H", *classes)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, spec: GanSpec) -> Checkpoint:
    """Read a checkpoint written for a GAN of shape ``spec``."""
    from .objectives import ConsolidationRecord

    rd = _Reader(Path(path).read_bytes())
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not an SGEWC01 checkpoint")
    gan = init_cond_gan(spec, np.random.default_rng(0))
    stores = {n: t for s in (gan.generator.params, gan.discriminator.params) for n, t in s}
    n_g = gan.generator.params.numel()
    fisher: dict[int, tuple[int, np.ndarray]] = {}
    snaps: dict[int, np.ndarray] = {}
    seen_params = set()
    (count,) = rd.unpack("<I")
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode("utf-8")
        kind, task, n = rd.unpack("<BII")
        values = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64)
        if kind == KIND_PARAM:
            if name not in stores:
                raise CheckpointDimensionError(f"{path}: parameter {name!r} not present in {spec}")
            t = stores[name]
            if n != t.size:
                raise CheckpointDimensionError(
                    f"{path}: parameter {name!r} has {n} elements, {spec} expects {t.size}"
                )
            t.data = values.reshape(t.shape)
            seen_params.add(name)
        elif kind in (KIND_FISHER, KIND_SNAPSHOT):
            if n != n_g:
                raise CheckpointDimensionError(
                    f"{path}: record vector has {n} elements, generator of {spec} has {n_g}"
                )
            if kind == KIND_FISHER:
                sample_count = int(name.split(":", 1)[1]) if ":" in name else 0
                fisher[task] = (sample_count, values)
            else:
                snaps[task] = values
        else:
            raise CheckpointFormatError(f"{path}: unknown entry kind {kind}")
    missing = set(stores) - seen_params
    if missing:
        raise CheckpointDimensionError(f"{path}: missing parameters {sorted(missing)}")
    (n_tasks,) = rd.unpack("<I")
    task_classes = []
    for _ in range(n_tasks):
        (m,) = rd.unpack("<H")
        task_classes.append(tuple(rd.unpack(f"<{m}H")) if m else ())
    if rd.pos != len(rd.data):
        raise CheckpointFormatError(f"{path}: {len(rd.data) - rd.pos} trailing bytes")
    for classes in task_classes:
        if any(c >= spec.K for c in classes):
            raise CheckpointDimensionError(f"{path}: task classes {classes} exceed K={spec.K}")
    if set(fisher) != set(snaps):
        raise CheckpointFormatError(f"{path}: fisher/snapshot entries do not pair up")
    records = []
    for task in sorted(fisher):
        if task >= len(task_classes):
            raise CheckpointFormatError(f"{path}: record for task {task} but only {len(task_classes)} tasks")
        sample_count, F = fisher[task]
        snap = snaps[task]
        snap.flags.writeable = False
        records.append(
            ConsolidationRecord(
                task_index=task,
                class_ids=tuple(task_classes[task]),
                theta_star=snap,
                fisher_diag=F,
                sample_count=sample_count,
            )
        )
    return Checkpoint(gan, records, task_classes)
