"""GAN losses, diagonal empirical Fisher estimation and the EWC penalty."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nets import CondGan, ParameterStore, disc_forward, gen_forward, one_hot_batch, sample_noise, snapshot
from .tensor import Tensor


@dataclass
class ConsolidationRecord:
    """Post-task anchor for the generator: snapshot plus Fisher diagonal."""

    task_index: int
    class_ids: tuple[int, ...]
    theta_star: np.ndarray
    fisher_diag: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if self.theta_star.shape != self.fisher_diag.shape:
            raise ValueError(
                f"theta_star {self.theta_star.shape} and fisher_diag {self.fisher_diag.shape} differ in length"
            )
        if np.any(self.fisher_diag < 0):
            raise ValueError("fisher_diag must be nonnegative")


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not lam >= 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return lam


def disc_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean(log D(x,y)) - mean(log(1 - D(G(z,y),y)))."""
    if d_real.shape != d_fake.shape:
        raise T.ShapeError(f"disc_loss batch mismatch: {d_real.shape} vs {d_fake.shape}")
    real_term = T.mean_all(T.log(d_real))
    fake_term = T.mean_all(T.log(T.sub(Tensor(np.ones(d_fake.shape)), d_fake)))
    return T.neg(T.add(real_term, fake_term))


def gen_loss_nonsat(d_fake: Tensor) -> Tensor:
    if d_fake.size == 0:
        raise T.ShapeError("gen_loss_nonsat on an empty batch")
    return T.neg(T.mean_all(T.log(d_fake)))


def ewc_penalty(params: ParameterStore, records: Sequence[ConsolidationRecord], lam: float) -> Tensor:
    """sum_r sum_i lam/2 * F_ri * (theta_i - theta*_ri)^2, differentiable in ``params``."""
    lam = _check_lambda(lam)
    n = params.numel()
    for r in records:
        if r.theta_star.size != n or r.fisher_diag.size != n:
            raise ValueError(
                f"record for task {r.task_index} has length {r.theta_star.size}, generator has {n} parameters"
            )
    if not records:
        return Tensor(0.0)
    offsets = params.offsets()
    total = None
    for r in records:
        for name, t in params:
            sl = offsets[name]
            diff = T.sub(t, Tensor(r.theta_star[sl].reshape(t.shape)))
            term = T.sum_all(T.mul(Tensor(r.fisher_diag[sl].reshape(t.shape)), T.square(diff)))
            total = term if total is None else T.add(total, term)
    return T.scale(total, lam / 2.0)


def augmented_gen_loss(
    d_fake: Tensor, params: ParameterStore, records: Sequence[ConsolidationRecord], lam: float
) -> tuple[Tensor, Tensor]:
    """Non-saturating generator loss plus the EWC penalty.

    Returns ``(total, penalty)``. Without records ``total`` is the plain
    generator loss object itself.
    """
    base = gen_loss_nonsat(d_fake)
    if not records:
        return base, Tensor(0.0)
    penalty = ewc_penalty(params, records, lam)
    return T.add(base, penalty), penalty


def log_d_of_g(gan: CondGan, z: np.ndarray, y: np.ndarray) -> Tensor:
    """Mean over the batch of log D(G(z,y),y)."""
    zt, yt = Tensor(z), Tensor(y)
    return T.mean_all(T.log(disc_forward(gan, gen_forward(gan, zt, yt), yt)))


def _fisher_shard(gan: CondGan, z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    params = gan.generator.params.tensors()
    acc = [np.zeros_like(p.data) for p in params]
    for i in range(len(labels)):
        y = one_hot_batch(labels[i : i + 1], gan.K)
        grads = T.grad(log_d_of_g(gan, z[i : i + 1], y), params)
        for a, g in zip(acc, grads):
            a += g * g
    return np.concatenate([a.reshape(-1) for a in acc])


def estimate_fisher_diag(
    gan: CondGan,
    class_ids,
    n_samples: int,
    rng: np.random.Generator,
    workers: int = 1,
) -> np.ndarray:
    """Diagonal empirical Fisher of log D(G(z,y),y) over the generator parameters.

    Each of ``n_samples`` draws gets its own backward pass; the squared
    per-sample gradients are averaged. y is uniform over ``class_ids`` and z
    follows the training prior. All draws are taken from ``rng`` up front, so
    sharding over ``workers`` threads only changes the summation order.
    """
    class_ids = sorted(set(int(c) for c in class_ids))
    if not class_ids:
        raise ValueError("estimate_fisher_diag needs at least one class")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    z = sample_noise(rng, n_samples, gan.z_dim)
    labels = rng.choice(np.array(class_ids), size=n_samples)
    if workers <= 1:
        total = _fisher_shard(gan, z, labels)
    else:
        bounds = np.linspace(0, n_samples, workers + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(
                pool.map(
                    lambda ab: _fisher_shard(gan, z[ab[0] : ab[1]], labels[ab[0] : ab[1]]),
                    zip(bounds[:-1], bounds[1:]),
                )
            )
        total = np.sum(parts, axis=0)
    return total / n_samples


def consolidation_record(
    gan: CondGan, task_index: int, class_ids, n_samples: int, rng: np.random.Generator, workers: int = 1
) -> ConsolidationRecord:
    fisher = estimate_fisher_diag(gan, class_ids, n_samples, rng, workers=workers)
    return ConsolidationRecord(
        task_index=task_index,
        class_ids=tuple(sorted(set(int(c) for c in class_ids))),
        theta_star=snapshot(gan.generator.params),
        fisher_diag=fisher,
        sample_count=n_samples,
    )


def fisher_pixel_saliency(record: ConsolidationRecord, gan: CondGan, class_id: int) -> np.ndarray:
    """Per-pixel mean Fisher over the output-layer weights and bias feeding each pixel.

    ``record`` must come from an estimate with y fixed to ``class_id``.
    Result is scaled to [0, 1] by its maximum (all zeros stay zeros).
    """
    if int(class_id) not in record.class_ids:
        raise ValueError(f"class {class_id} not in record classes {record.class_ids}")
    params = gan.generator.params
    names = params.names()
    w_name, b_name = names[-2], names[-1]
    offsets = params.offsets()
    W_shape = params[w_name].shape
    F_W = record.fisher_diag[offsets[w_name]].reshape(W_shape)
    F_b = record.fisher_diag[offsets[b_name]].reshape(1, W_shape[1])
    per_pixel = np.vstack([F_W, F_b]).mean(axis=0)
    peak = per_pixel.max()
    return per_pixel / peak if peak > 0 else per_pixel


def saliency_maps(gan: CondGan, classes, n_samples: int, rng: np.random.Generator, workers: int = 1):
    """Fisher saliency image per class, each from its own y-fixed estimate."""
    out = {}
    for c in classes:
        rec = consolidation_record(gan, -1, [c], n_samples, rng, workers=workers)
        out[int(c)] = fisher_pixel_saliency(rec, gan, c)
    return out
