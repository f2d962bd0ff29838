"""MixUp and class-balanced sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

# lambdas are snapped to this grid so that lam and 1 - lam are both exact in float32
_LAM_GRID = float(2 ** 24)


@dataclass
class LabeledBatch:
    x224: np.ndarray   # [B, 224, 224, 3]
    x320: np.ndarray   # [B, 320, 320, 3]
    y: np.ndarray      # [B, K] probability rows
    magnification: list

    def __post_init__(self):
        B = self.y.shape[0]
        if B < 1 or self.x224.shape[0] != B or self.x320.shape[0] != B:
            raise ValueError("batch tensors disagree on batch size")
        if np.any(np.abs(self.y.sum(axis=1, dtype=np.float64) - 1.0) > 1e-5):
            raise ValueError("label rows must sum to 1")

    def __len__(self) -> int:
        return self.y.shape[0]


def one_hot(labels: Sequence[int], n_classes: int = 3) -> np.ndarray:
    y = np.zeros((len(labels), n_classes), dtype=np.float32)
    y[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return y


def gamma_mt(shape: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Gamma(shape, 1) variates by Marsaglia-Tsang; shapes below 1 use the U^(1/a) boost."""
    if shape <= 0:
        raise ValueError("gamma shape must be positive")
    boost = shape < 1.0
    a = shape + 1.0 if boost else shape
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(size, dtype=np.float64)
    todo = np.arange(size)
    while todo.size:
        n = todo.size
        x = rng.standard_normal(n)
        u = rng.random(n)
        v = (1.0 + c * x) ** 3
        ok = v > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            accept = ok & (np.log(u) < 0.5 * x * x + d - d * v + d * np.log(np.where(ok, v, 1.0)))
        out[todo[accept]] = d * v[accept]
        todo = todo[~accept]
    if boost:
        out *= rng.random(size) ** (1.0 / shape)
    return out


def beta_sample(alpha: float, rng: np.random.Generator, size: int | None = None):
    """Symmetric Beta(alpha, alpha) from two gamma draws; scalar when ``size`` is None."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = 1 if size is None else int(size)
    x = gamma_mt(alpha, rng, n)
    y = gamma_mt(alpha, rng, n)
    tot = x + y
    # both gammas can underflow to 0 for tiny alpha; the distribution is symmetric
    lam = np.where(tot > 0, x / np.where(tot > 0, tot, 1.0), 0.5)
    lam = np.clip(lam, 0.0, 1.0)
    return float(lam[0]) if size is None else lam


def mixup(batch: LabeledBatch, alpha: float, rng: np.random.Generator,
          lam: np.ndarray | float | None = None, perm: np.ndarray | None = None) -> LabeledBatch:
    """Mix each sample with a permutation partner; one lambda per pair, shared by both scales and labels.

    Batches with fewer than two samples come back unchanged. ``lam``/``perm``
    override the random draws.
    """
    B = len(batch)
    if B < 2:
        return batch
    if perm is None:
        perm = rng.permutation(B)
    if lam is None:
        lam = beta_sample(alpha, rng, size=B)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    lam = np.round(lam * _LAM_GRID) / _LAM_GRID
    a = lam.astype(np.float32)
    b = (1.0 - lam).astype(np.float32)

    def mix(x):
        shape = (B,) + (1,) * (x.ndim - 1)
        return a.reshape(shape) * x + b.reshape(shape) * x[perm]

    return replace(batch, x224=mix(batch.x224), x320=mix(batch.x320), y=mix(batch.y),
                   magnification=list(batch.magnification))


def class_balanced_indices(labels: Sequence[int], n_draws: int, rng: np.random.Generator,
                           classes: Sequence[int] = (0, 1, 2)) -> np.ndarray:
    """Draw with replacement, each sample weighted by 1/count(its class).

    Every class in ``classes`` must occur in ``labels``; each then receives an
    expected share of ``1/len(classes)`` of the draws.
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = {}
    for c in classes:
        n = int(np.sum(labels == c))
        if n == 0:
            raise ValueError(f"class {c} has no samples")
        counts[c] = n
    if np.any(~np.isin(labels, list(classes))):
        raise ValueError("labels contain classes outside the balanced set")
    w = np.array([1.0 / counts[int(l)] for l in labels])
    w /= w.sum()
    return rng.choice(labels.size, size=n_draws, replace=True, p=w)
