"""Small in-memory datasets and run builders shared by the federation tests."""

from __future__ import annotations

import numpy as np

from fedpath.data import Splits, TrainingData
from fedpath.federation import FederatedRun, FederationConfig
from fedpath.model import COARSE_SIZE, FINE_SIZE, ModelConfig

MAGS = ("4x", "10x", "20x", "40x")


def tiny_data(n_per_class: int = 8, seed: int = 0) -> TrainingData:
    """Class-dependent colour blobs at both stream sizes, enough signal to learn a little."""
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1, 2], n_per_class)
    tints = np.array([[200, 120, 170], [170, 110, 190], [130, 80, 170]], float)

    def images(size):
        base = tints[labels][:, None, None, :] + rng.normal(scale=25, size=(labels.size, size, size, 3))
        return np.clip(np.rint(base), 0, 255).astype(np.uint8)

    mags = [MAGS[i % 4] for i in range(labels.size)]
    return TrainingData(images(FINE_SIZE), images(COARSE_SIZE), labels, mags)


def tiny_splits(data: TrainingData, n_val_per_class: int = 1, n_test_per_class: int = 1) -> Splits:
    train, val, test = [], [], []
    for c in range(3):
        idx = np.flatnonzero(data.labels == c)
        val += idx[:n_val_per_class].tolist()
        test += idx[n_val_per_class:n_val_per_class + n_test_per_class].tolist()
        train += idx[n_val_per_class + n_test_per_class:].tolist()
    return Splits(*(np.array(sorted(x), dtype=np.int64) for x in (train, val, test)))


def tiny_cfg(**overrides) -> FederationConfig:
    base = dict(n_clients=2, rounds=2, local_epochs=1, batch_size=4, eval_batch_size=8, dirichlet_alpha=5.0,
                seed=3, lr=1e-3)
    base.update(overrides)
    return FederationConfig(**base)


def tiny_run(run_dir, data=None, splits=None, config_hash="test", **overrides) -> FederatedRun:
    data = data if data is not None else tiny_data()
    splits = splits if splits is not None else tiny_splits(data)
    return FederatedRun(tiny_cfg(**overrides), ModelConfig(), data, splits, run_dir, config_hash)
