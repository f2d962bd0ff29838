"""Federated training simulator: partitioning, FedProx local training, FedAvg, rounds, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .augment import class_balanced_indices, mixup
from .data import Splits, TrainingData
from .imaging import JitterRanges
from .metrics import MetricsReport, evaluate_predictions
from .model import DualStreamModel, ModelConfig, build_model
from .nn import AdamState, ParamVector, adam_step

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


class ClientFailure(RuntimeError):
    def __init__(self, client_id: int, round_idx: int, cause: str):
        super().__init__(f"client {client_id} failed in round {round_idx}: {cause}")
        self.client_id = client_id
        self.round_idx = round_idx
        self.cause = cause


class AggregationError(RuntimeError):
    """No client produced a usable update."""


class DataError(ValueError):
    """The dataset cannot support the requested run (e.g. a grade missing from training)."""


class CheckpointMismatch(RuntimeError):
    """An existing checkpoint belongs to a different configuration."""


@dataclass
class FederationConfig:
    n_clients: int = 4
    rounds: int = 10
    local_epochs: int = 3
    mu: float = 0.01
    lr: float = 3e-4
    weight_decay: float = 1e-4
    batch_size: int = 2  # small shards need many Adam steps per round
    dirichlet_alpha: float = 0.5
    seed: int = 0
    mode: str = "federated"
    mixup_alpha: float = 0.2
    color_jitter: bool = True
    eval_weights: str = "best"
    eval_batch_size: int = 32

    def validate(self) -> None:
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.mode not in ("federated", "centralized"):
            raise ValueError(f"mode must be 'federated' or 'centralized', got {self.mode!r}")
        if self.eval_weights not in ("best", "final"):
            raise ValueError("eval_weights must be 'best' or 'final'")
        if self.mixup_alpha < 0:
            raise ValueError("mixup_alpha must be >= 0")


# ---------------------------------------------------------------------------
# seeding


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def client_seed(seed: int, client_id: int, round_idx: int) -> int:
    return (int(seed) ^ splitmix64(((client_id & 0xFFFFFFFF) << 32) | (round_idx & 0xFFFFFFFF))) & MASK64


# ---------------------------------------------------------------------------
# partitioning


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    class_counts: list

    @property
    def n(self) -> int:
        return int(self.indices.size)


def _shard(client_id: int, indices, labels: np.ndarray, n_classes: int = 3) -> ClientShard:
    idx = np.array(sorted(int(i) for i in indices), dtype=np.int64)
    counts = np.bincount(labels[idx], minlength=n_classes).tolist() if idx.size else [0] * n_classes
    return ClientShard(client_id, idx, counts)


def partition_dirichlet(samples: Sequence[int], labels: Sequence[int], n_clients: int,
                        dirichlet_alpha: float, seed: int, max_retries: int = 100) -> list[ClientShard]:
    """Label-skewed split: each class is divided among clients by Dirichlet(alpha) proportions.

    ``samples`` are dataset indices and ``labels`` the matching grades. Retries
    until every client holds at least one sample.
    """
    samples = np.asarray(samples, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if samples.shape != labels.shape:
        raise ValueError("samples and labels differ in length")
    lab_full = np.zeros(int(samples.max()) + 1 if samples.size else 0, dtype=np.int64)
    lab_full[samples] = labels
    if n_clients == 1:
        return [_shard(0, samples, lab_full)]
    classes = sorted(set(labels.tolist()))
    rng = np.random.default_rng([int(seed) & MASK64, 0xD1C4])
    for _ in range(max_retries):
        assigned: list[list[int]] = [[] for _ in range(n_clients)]
        for c in classes:
            members = np.sort(samples[labels == c])
            members = members[rng.permutation(members.size)]
            props = rng.dirichlet(np.full(n_clients, dirichlet_alpha))
            cuts = (np.cumsum(props) * members.size).astype(np.int64)[:-1]
            for k, part in enumerate(np.split(members, cuts)):
                assigned[k].extend(part.tolist())
        if all(assigned):
            return [_shard(k, a, lab_full) for k, a in enumerate(assigned)]
    raise DataError(f"could not give every client a sample after {max_retries} Dirichlet draws")


# ---------------------------------------------------------------------------
# local training and aggregation


@dataclass
class LocalResult:
    client_id: int
    params: ParamVector
    n_k: int
    train_loss: float
    step_losses: list = field(default_factory=list)


def proximal_penalty(w: ParamVector, anchor: ParamVector, mu: float) -> float:
    return 0.5 * mu * nn.param_l2_dist(w, anchor) ** 2


def proximal_grad(w: ParamVector, anchor: ParamVector, mu: float) -> np.ndarray:
    """Gradient of ``mu/2 * ||w - anchor||^2``."""
    return np.float32(mu) * (w.data - anchor.data)


def local_train(shard: ClientShard, data: TrainingData, global_params: ParamVector,
                cfg: FederationConfig, model_cfg: ModelConfig, rng: np.random.Generator,
                round_idx: int = 0, jitter: JitterRanges | None = None) -> LocalResult:
    """FedProx local update starting from (and anchored at) ``global_params``."""
    model = DualStreamModel(model_cfg, global_params.copy())
    anchor = global_params
    state = AdamState.for_params(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    labels = data.labels[shard.indices]
    classes = sorted(set(labels.tolist()))
    jitter = (jitter or JitterRanges()) if cfg.color_jitter else None
    n_k = shard.n
    losses: list[float] = []
    try:
        for _ in range(cfg.local_epochs):
            order = class_balanced_indices(labels, n_k, rng, classes=classes)
            for start in range(0, n_k, cfg.batch_size):
                idx = shard.indices[order[start:start + cfg.batch_size]]
                batch = data.batch(idx, rng=rng, jitter=jitter)
                if cfg.mixup_alpha > 0:
                    batch = mixup(batch, cfg.mixup_alpha, rng)
                logits, cache = model.forward(batch.x224, batch.x320, train=True, rng=rng)
                loss, grad_logits = nn.softmax_xent(logits, batch.y)
                grads = model.backward(cache, grad_logits)
                if cfg.mu:
                    grads.data += proximal_grad(model.params, anchor, cfg.mu)
                adam_step(model.params, grads, state)
                losses.append(loss)
    except (nn.NonFiniteError, FloatingPointError) as exc:
        raise ClientFailure(shard.client_id, round_idx, str(exc)) from exc
    if not np.all(np.isfinite(model.params.data)):
        raise ClientFailure(shard.client_id, round_idx, "non-finite parameters after local training")
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return LocalResult(shard.client_id, model.params, n_k, mean_loss, losses)


def fedavg_aggregate(results: Sequence[tuple[ParamVector, int]]) -> ParamVector:
    """Sample-count weighted mean of client parameters, accumulated in float64."""
    if not results:
        raise AggregationError("no client results to aggregate")
    first = results[0][0]
    total = 0
    for params, n_k in results:
        first.check_congruent(params)
        if n_k <= 0:
            raise ValueError("client sample counts must be positive")
        total += int(n_k)
    terms = np.stack([(int(n_k) / total) * params.data.astype(np.float64) for params, n_k in results])
    # sorting each coordinate's terms fixes the summation order, so client order cannot change a bit
    terms.sort(axis=0)
    return ParamVector(first.layout, terms.sum(axis=0).astype(np.float32))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class RoundCheckpoint:
    round: int
    global_params: ParamVector
    per_client_n: list
    val_metrics: dict | None
    config_hash: str
    rng_states: list
    wall_time: float
    train_loss_mean: float = float("nan")
    failed_clients: list = field(default_factory=list)

    def header(self) -> dict:
        return {
            "round": self.round, "config_hash": self.config_hash, "per_client_n": self.per_client_n,
            "rng_states": [str(s) for s in self.rng_states], "val_metrics": self.val_metrics,
            "wall_time": self.wall_time,
            "train_loss_mean": None if not np.isfinite(self.train_loss_mean) else self.train_loss_mean,
            "failed_clients": self.failed_clients,
        }


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def checkpoint_name(round_idx: int) -> str:
    return f"ckpt_round_{round_idx}.bin"


def save_checkpoint(run_dir, ckpt: RoundCheckpoint) -> Path:
    """``<header json>\\n<FPSW1 payload>``, then point ``latest`` at it."""
    run_dir = Path(run_dir)
    path = run_dir / checkpoint_name(ckpt.round)
    head = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    _atomic_write(path, head + b"\n" + ckpt.global_params.to_bytes())
    _atomic_write(run_dir / "latest", (path.name + "\n").encode())
    return path


def load_checkpoint(path) -> RoundCheckpoint:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    head = json.loads(blob[:nl])
    params = ParamVector.from_bytes(blob[nl + 1:])
    loss = head.get("train_loss_mean")
    return RoundCheckpoint(head["round"], params, head["per_client_n"], head["val_metrics"],
                           head["config_hash"], [int(s) for s in head["rng_states"]], head["wall_time"],
                           float("nan") if loss is None else loss, head.get("failed_clients", []))


def latest_checkpoint(run_dir) -> Path | None:
    marker = Path(run_dir) / "latest"
    if not marker.exists():
        return None
    path = Path(run_dir) / marker.read_text().strip()
    return path if path.exists() else None


# ---------------------------------------------------------------------------
# evaluation


def predict(model_cfg: ModelConfig, params: ParamVector, data: TrainingData, indices,
            batch_size: int = 32) -> np.ndarray:
    model = DualStreamModel(model_cfg, params)
    indices = np.asarray(indices, dtype=np.int64)
    preds = np.empty(indices.size, dtype=np.int64)
    for s in range(0, indices.size, batch_size):
        batch = data.batch(indices[s:s + batch_size])
        logits, _ = model.forward(batch.x224, batch.x320, train=False)
        preds[s:s + batch_size] = np.argmax(logits, axis=1)
    return preds


def evaluate(model_cfg: ModelConfig, params: ParamVector, data: TrainingData, indices,
             batch_size: int = 32) -> MetricsReport | None:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return None
    preds = predict(model_cfg, params, data, indices, batch_size)
    return evaluate_predictions(data.labels[indices], preds, [data.magnifications[i] for i in indices])


# ---------------------------------------------------------------------------
# rounds


HISTORY_COLUMNS = ("round", "train_loss_mean", "val_accuracy", "val_macro_f1", "wall_time_s", "best_round")


@dataclass
class FederatedRun:
    """Everything a run needs besides the evolving global parameters."""
    cfg: FederationConfig
    model_cfg: ModelConfig
    data: TrainingData
    splits: Splits
    run_dir: Path
    config_hash: str
    jobs: int = 1
    jitter: JitterRanges = field(default_factory=JitterRanges)
    train_fn: Callable = local_train
    on_round: Callable | None = None

    def __post_init__(self):
        self.cfg.validate()
        self.run_dir = Path(self.run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def shards(self) -> list[ClientShard]:
        train = self.splits.train
        labels = self.data.labels[train]
        if set(labels.tolist()) != {0, 1, 2}:
            missing = sorted({0, 1, 2} - set(labels.tolist()))
            raise DataError(f"training split is missing grade(s) {missing}")
        if self.cfg.mode == "centralized":
            return [_shard(0, train, self.data.labels)]
        return partition_dirichlet(train, labels, self.cfg.n_clients, self.cfg.dirichlet_alpha, self.cfg.seed)

    def round_cfg(self) -> FederationConfig:
        if self.cfg.mode == "centralized":
            return FederationConfig(**{**asdict(self.cfg), "mu": 0.0})
        return self.cfg


def run_round(run: FederatedRun, round_idx: int, global_params: ParamVector,
              shards: Sequence[ClientShard]) -> tuple[ParamVector, RoundCheckpoint]:
    """Train every client from ``global_params``, aggregate survivors, validate, checkpoint."""
    t0 = time.perf_counter()
    cfg = run.round_cfg()
    seeds = [client_seed(cfg.seed, s.client_id, round_idx) for s in shards]

    def work(i):
        shard = shards[i]
        rng = np.random.default_rng(seeds[i])
        try:
            return run.train_fn(shard, run.data, global_params, cfg, run.model_cfg, rng, round_idx, run.jitter)
        except ClientFailure as exc:
            return exc
        except Exception as exc:  # any client-side crash is treated as a dropped client
            return ClientFailure(shard.client_id, round_idx, repr(exc))

    if run.jobs > 1 and len(shards) > 1:
        with ThreadPoolExecutor(min(run.jobs, len(shards))) as pool:
            outcomes = list(pool.map(work, range(len(shards))))
    else:
        outcomes = [work(i) for i in range(len(shards))]

    ok = sorted((o for o in outcomes if isinstance(o, LocalResult)), key=lambda r: r.client_id)
    failed = [o for o in outcomes if isinstance(o, ClientFailure)]
    for f in failed:
        log.warning("round %d: dropping client %d (%s)", round_idx, f.client_id, f.cause)
    if not ok:
        raise AggregationError(f"all {len(shards)} clients failed in round {round_idx}")
    new_global = fedavg_aggregate([(r.params, r.n_k) for r in ok])
    val = evaluate(run.model_cfg, new_global, run.data, run.splits.val, cfg.eval_batch_size)
    finite = [r.train_loss for r in ok if np.isfinite(r.train_loss)]
    ckpt = RoundCheckpoint(
        round=round_idx, global_params=new_global,
        per_client_n=[r.n_k if isinstance(r, LocalResult) else 0 for r in outcomes],
        val_metrics=val.to_dict() if val else None, config_hash=run.config_hash,
        rng_states=seeds, wall_time=time.perf_counter() - t0,
        train_loss_mean=float(np.mean(finite)) if finite else float("nan"),
        failed_clients=sorted(f.client_id for f in failed),
    )
    save_checkpoint(run.run_dir, ckpt)
    return new_global, ckpt


def _history_row(ckpt: RoundCheckpoint, best_round: int) -> dict:
    vm = ckpt.val_metrics or {}
    return {
        "round": ckpt.round,
        "train_loss_mean": ckpt.train_loss_mean,
        "val_accuracy": vm.get("accuracy", float("nan")),
        "val_macro_f1": vm.get("macro_f1", float("nan")),
        "wall_time_s": ckpt.wall_time,
        "best_round": best_round,
    }


def write_history(run_dir, rows: list[dict]) -> None:
    path = Path(run_dir) / "history.csv"
    tmp = path.with_name("history.csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            w.writerow([r["round"]] + [f"{r[c]:.6f}" if isinstance(r[c], float) else r[c]
                                       for c in HISTORY_COLUMNS[1:]])
    os.replace(tmp, path)


def read_history(run_dir) -> list[dict]:
    with open(Path(run_dir) / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("round", "best_round") else float(v)) for k, v in r.items()})
    return out


def _best_round(checkpoints: list[RoundCheckpoint]) -> int:
    best, best_acc = checkpoints[0].round, -1.0
    for c in checkpoints:
        acc = (c.val_metrics or {}).get("accuracy", -1.0)
        if acc > best_acc:
            best, best_acc = c.round, acc
    return best


@dataclass
class RunResult:
    report: dict
    final_params: ParamVector
    checkpoints: list
    already_complete: bool = False
    interrupted: bool = False


def run_federation(run: FederatedRun, resume: bool = True, stop_after: int | None = None) -> RunResult:
    """Run (or resume) all rounds, then test with the best-validation (or final) weights."""
    cfg = run.cfg
    shards = run.shards()
    checkpoints: list[RoundCheckpoint] = []
    start = 1
    latest = latest_checkpoint(run.run_dir) if resume else None
    if latest is not None:
        last = load_checkpoint(latest)
        if last.config_hash != run.config_hash:
            raise CheckpointMismatch(
                f"checkpoint {latest} has config hash {last.config_hash}, current config is {run.config_hash}; "
                "refusing to resume (use a fresh run directory or --no-resume)")
        checkpoints = [load_checkpoint(run.run_dir / checkpoint_name(r)) for r in range(last.round + 1)]
        params = last.global_params
        start = last.round + 1
        report_path = run.run_dir / "report.json"
        if last.round >= cfg.rounds and report_path.exists():
            log.info("run %s already complete (%d rounds)", run.run_dir.name, last.round)
            return RunResult(json.loads(report_path.read_text()), params, checkpoints, already_complete=True)
        log.info("resuming %s after round %d", run.run_dir.name, last.round)
    else:
        t0 = time.perf_counter()
        params = build_model(run.model_cfg, seed=cfg.seed).params
        val = evaluate(run.model_cfg, params, run.data, run.splits.val, cfg.eval_batch_size)
        init = RoundCheckpoint(0, params, [s.n for s in shards], val.to_dict() if val else None,
                               run.config_hash, [cfg.seed], time.perf_counter() - t0)
        save_checkpoint(run.run_dir, init)
        checkpoints = [init]

    def history_rows():
        rows = []
        for i, c in enumerate(checkpoints):
            rows.append(_history_row(c, _best_round(checkpoints[:i + 1])))
        return rows

    for r in range(start, cfg.rounds + 1):
        params, ckpt = run_round(run, r, params, shards)
        checkpoints.append(ckpt)
        write_history(run.run_dir, history_rows())
        vm = ckpt.val_metrics or {}
        log.info("round %d/%d  loss %.4f  val_acc %.4f  (%.1fs)", r, cfg.rounds, ckpt.train_loss_mean,
                 vm.get("accuracy", float("nan")), ckpt.wall_time)
        if run.on_round is not None:
            run.on_round(ckpt)
        if stop_after is not None and r >= stop_after and r < cfg.rounds:
            return RunResult({}, params, checkpoints, interrupted=True)

    write_history(run.run_dir, history_rows())
    best = _best_round(checkpoints)
    eval_round = best if cfg.eval_weights == "best" else checkpoints[-1].round
    eval_params = next(c.global_params for c in checkpoints if c.round == eval_round)
    test = evaluate(run.model_cfg, eval_params, run.data, run.splits.test, cfg.eval_batch_size)
    best_ckpt = next(c for c in checkpoints if c.round == best)
    report = {
        "mode": cfg.mode,
        "run_id": run.run_dir.name,
        "config_hash": run.config_hash,
        "rounds_completed": checkpoints[-1].round,
        "best_round": best,
        "best_val_accuracy": (best_ckpt.val_metrics or {}).get("accuracy"),
        "eval_weights": cfg.eval_weights,
        "eval_round": eval_round,
        "n_train": int(run.splits.train.size),
        "n_val": int(run.splits.val.size),
        "n_test": int(run.splits.test.size),
        "clients": [{"client_id": s.client_id, "n": s.n, "class_counts": s.class_counts} for s in shards],
        "history": history_rows(),
        "test": test.to_dict() if test else None,
    }
    _atomic_write(run.run_dir / "report.json", (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    return RunResult(report, params, checkpoints)


def run_centralized(run: FederatedRun, resume: bool = True, stop_after: int | None = None) -> RunResult:
    """Pooled training with the same optimizer, augmentation and round/epoch budget, no proximal term."""
    if run.cfg.mode != "centralized":
        run.cfg = FederationConfig(**{**asdict(run.cfg), "mode": "centralized"})
    return run_federation(run, resume=resume, stop_after=stop_after)
