"""Loading preprocessed patches into dual-scale training arrays, and splitting."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import LabeledBatch, one_hot
from .imaging import (JitterRanges, PatchRecord, jitter_float_, read_png, resize_bilinear,
                      standardize_float_)
from .model import COARSE_SIZE, FINE_SIZE

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class ManifestError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


def load_manifest(path) -> list[PatchRecord]:
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(PatchRecord.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(path, n, str(exc)) from None
    return records


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def group_key(source_id: str) -> str:
    """Views of one specimen (``<specimen>@<mag>``) are kept in the same split."""
    return source_id.split("@", 1)[0]


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def as_dict(self) -> dict:
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)


def split_dataset(records: list[PatchRecord], seed: int, ratios=(0.70, 0.15, 0.15)) -> Splits:
    """Stratified by grade, grouped by specimen; deterministic per seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    groups: dict[str, list[int]] = {}
    grade_of: dict[str, int] = {}
    for i, r in enumerate(records):
        key = group_key(r.source_id)
        groups.setdefault(key, []).append(i)
        if grade_of.setdefault(key, int(r.label)) != int(r.label):
            raise ValueError(f"specimen {key!r} has views with different grades")
    rng = np.random.default_rng([seed, 0x5EED])
    parts = {"train": [], "val": [], "test": []}
    for grade in sorted(set(grade_of.values())):
        keys = sorted(k for k, g in grade_of.items() if g == grade)
        keys = [keys[i] for i in rng.permutation(len(keys))]
        n = len(keys)
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        n_train = n - n_val - n_test
        for name, chunk in (("train", keys[:n_train]), ("val", keys[n_train:n_train + n_val]),
                            ("test", keys[n_train + n_val:])):
            for k in chunk:
                parts[name].extend(groups[k])
    return Splits(*(np.array(sorted(parts[p]), dtype=np.int64) for p in ("train", "val", "test")))


class TrainingData:
    """uint8 images already resized to both stream sizes, plus labels and tags."""

    def __init__(self, u224: np.ndarray, u320: np.ndarray, labels, magnifications, ids=None):
        self.u224 = u224
        self.u320 = u320
        self.labels = np.asarray(labels, dtype=np.int64)
        self.magnifications = list(magnifications)
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.labels))]
        n = len(self.labels)
        if u224.shape[0] != n or u320.shape[0] != n or len(self.magnifications) != n:
            raise ValueError("training arrays disagree on sample count")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_images(cls, images, labels, magnifications, ids=None) -> "TrainingData":
        u224 = np.stack([resize_bilinear(im, FINE_SIZE, FINE_SIZE) for im in images]) if len(images) else \
            np.zeros((0, FINE_SIZE, FINE_SIZE, 3), np.uint8)
        u320 = np.stack([resize_bilinear(im, COARSE_SIZE, COARSE_SIZE) for im in images]) if len(images) else \
            np.zeros((0, COARSE_SIZE, COARSE_SIZE, 3), np.uint8)
        return cls(u224, u320, labels, magnifications, ids)

    @classmethod
    def from_processed(cls, root, jobs: int = 1):
        """Load ``<root>/manifest.jsonl`` and ``<root>/patches/<patch_id>.png``."""
        root = Path(root)
        records = load_manifest(root / MANIFEST_NAME)
        n = len(records)
        u224 = np.empty((n, FINE_SIZE, FINE_SIZE, 3), np.uint8)
        u320 = np.empty((n, COARSE_SIZE, COARSE_SIZE, 3), np.uint8)

        def load(i):
            img = read_png(root / "patches" / f"{records[i].patch_id}.png")
            u224[i] = resize_bilinear(img, FINE_SIZE, FINE_SIZE)
            u320[i] = resize_bilinear(img, COARSE_SIZE, COARSE_SIZE)

        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                list(pool.map(load, range(n)))
        else:
            for i in range(n):
                load(i)
        data = cls(u224, u320, [int(r.label) for r in records], [r.magnification for r in records],
                   [r.patch_id for r in records])
        return data, records

    def batch(self, idx, rng: np.random.Generator | None = None,
              jitter: JitterRanges | None = None) -> LabeledBatch:
        """Standardized float batch; with ``rng`` and ``jitter`` each sample gets one colour draw for both scales.

        Jitter is applied in float without re-quantizing to 8 bits.
        """
        idx = np.asarray(idx, dtype=np.int64)
        x224 = self.u224[idx].astype(np.float32)
        x320 = self.u320[idx].astype(np.float32)
        if rng is not None and jitter is not None:
            factors = np.array([jitter.draw(rng) for _ in range(len(idx))]).reshape(-1, 4)
            jitter_float_(x224, factors)
            jitter_float_(x320, factors)
        return LabeledBatch(standardize_float_(x224), standardize_float_(x320), one_hot(self.labels[idx]),
                            [self.magnifications[i] for i in idx])
