"""fedpath command line: datagen, preprocess, partition, train, evaluate, report, pipeline.

Exit codes: 0 success, 1 configuration error, 2 I/O or data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import zipfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import ManifestError, TrainingData, load_manifest, split_dataset
from .datagen import generate
from .federation import (AggregationError, CheckpointMismatch, ClientFailure, DataError, FederatedRun,
                         evaluate, latest_checkpoint, load_checkpoint, partition_dirichlet, run_federation)
from .imaging import MAGNIFICATIONS, Grade
from .metrics import evaluate_predictions
from .nn import NonFiniteError
from .preprocess import IngestError, preprocess
from .report import build_report

log = logging.getLogger("fedpath")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN = 0, 1, 2, 3
RUN_DIR_ENV = "FEDPATH_RUN_DIR"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"federation.seed={args.seed}", f"datagen.seed={args.seed}"]
    if getattr(args, "mode", None):
        overrides.append(f"federation.mode={'federated' if args.mode == 'fed' else 'centralized'}")
    cfg = load_config(getattr(args, "config", None), overrides)
    env_root = os.environ.get(RUN_DIR_ENV)
    if env_root:
        cfg.paths.output_root = env_root
    return cfg


def run_dir_for(cfg: RunConfig) -> Path:
    return Path(cfg.paths.output_root) / cfg.run_id()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_processed(root, jobs: int):
    root = Path(root)
    if not (root / "manifest.jsonl").exists():
        raise CliError(f"{root}/manifest.jsonl not found; run `fedpath preprocess` first", EXIT_IO)
    t0 = time.perf_counter()
    data, records = TrainingData.from_processed(root, jobs=jobs)
    log.info("loaded %d patches from %s (%.1fs)", len(data), root, time.perf_counter() - t0)
    return data, records


# ---------------------------------------------------------------------------
# commands


def cmd_datagen(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or cfg.paths.data_dir)
    t0 = time.perf_counter()
    records = generate(cfg.datagen, out, jobs=args.jobs)
    print(f"datagen: wrote {len(records)} images to {out} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    src = Path(args.input or cfg.paths.data_dir)
    out = Path(args.out or cfg.paths.processed_dir)
    t0 = time.perf_counter()
    summary = preprocess(src, out, cfg.preprocess, jobs=args.jobs)
    print(f"preprocess: {summary['n_images']} images -> {summary['n_patches']} patches in {out} "
          f"({time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = resolve_config(args)
    manifest = Path(args.manifest or Path(cfg.paths.processed_dir) / "manifest.jsonl")
    records = load_manifest(manifest)
    splits = split_dataset(records, cfg.federation.seed, cfg.split.ratios)
    labels = np.array([int(r.label) for r in records])
    n_clients = 1 if cfg.federation.mode == "centralized" else cfg.federation.n_clients
    shards = partition_dirichlet(splits.train, labels[splits.train], n_clients,
                                 cfg.federation.dirichlet_alpha, cfg.federation.seed)
    out = {
        "manifest": str(manifest), "seed": cfg.federation.seed,
        "splits": {name: [records[i].patch_id for i in getattr(splits, name)] for name in ("train", "val", "test")},
        "clients": [{"client_id": s.client_id, "n": s.n, "class_counts": s.class_counts,
                     "patch_ids": [records[i].patch_id for i in s.indices]} for s in shards],
    }
    path = Path(args.out or manifest.parent / "partition.json")
    _write_json(path, out)
    for s in shards:
        print(f"client {s.client_id}: n={s.n} class_counts={s.class_counts}")
    print(f"partition: train/val/test = {splits.train.size}/{splits.val.size}/{splits.test.size}; wrote {path}")
    return EXIT_OK


def train_run(cfg: RunConfig, jobs: int = 1, resume: bool = True, data=None, records=None):
    """Train one configuration into its run directory; shared by ``train`` and ``pipeline``."""
    run_dir = run_dir_for(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "config.json"
    canonical = cfg.canonical_json()
    if resume and cfg_path.exists() and cfg_path.read_text() != canonical and latest_checkpoint(run_dir):
        last = load_checkpoint(latest_checkpoint(run_dir))
        if last.config_hash != cfg.config_hash():
            raise CheckpointMismatch(
                f"run directory {run_dir} holds checkpoints for config hash {last.config_hash}, "
                f"current config hash is {cfg.config_hash()}; refusing to resume")
    cfg_path.write_text(canonical)
    if data is None:
        data, records = _load_processed(cfg.paths.processed_dir, jobs)
    splits = split_dataset(records, cfg.federation.seed, cfg.split.ratios)
    run = FederatedRun(cfg.federation, cfg.model, data, splits, run_dir, cfg.config_hash(), jobs=jobs,
                       jitter=cfg.augment)
    return run_federation(run, resume=resume), run_dir


def _summarize(result, run_dir: Path) -> None:
    rep = result.report
    if result.already_complete:
        print(f"run {run_dir.name} already complete ({rep.get('rounds_completed')} rounds); report at {run_dir / 'report.json'}")
    test = rep.get("test") or {}
    acc = test.get("accuracy")
    print(f"{rep.get('mode')}: best round {rep.get('best_round')}, "
          f"test accuracy {'n/a' if acc is None else f'{acc:.4f}'} -> {run_dir / 'report.json'}")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    result, run_dir = train_run(cfg, jobs=args.jobs, resume=args.resume)
    _summarize(result, run_dir)
    return EXIT_OK


def _read_predictions(path) -> tuple[list, list, list]:
    true, pred, mags = [], [], []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                true.append(int(Grade.parse(row["label"])))
                pred.append(int(Grade.parse(row["prediction"])))
                mag = row.get("magnification")
                if mag not in MAGNIFICATIONS:
                    raise ValueError(f"unknown magnification {mag!r}")
                mags.append(mag)
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(path, n, str(exc)) from None
    return true, pred, mags


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    if args.predictions:
        true, pred, mags = _read_predictions(args.predictions)
        if not true:
            raise CliError(f"{args.predictions}: no predictions", EXIT_IO)
        report = evaluate_predictions(true, pred, mags).to_dict()
        source = {"predictions": str(args.predictions)}
    else:
        ckpt_path = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(run_dir_for(cfg))
        if ckpt_path is None or not ckpt_path.exists():
            raise CliError("no checkpoint given and no `latest` marker in the run directory", EXIT_IO)
        ckpt = load_checkpoint(ckpt_path)
        data, records = _load_processed(cfg.paths.processed_dir, args.jobs)
        splits = split_dataset(records, cfg.federation.seed, cfg.split.ratios)
        metrics = evaluate(cfg.model, ckpt.global_params, data, splits[args.split], cfg.federation.eval_batch_size)
        if metrics is None:
            raise CliError(f"split {args.split!r} is empty", EXIT_IO)
        report = metrics.to_dict()
        source = {"checkpoint": str(ckpt_path), "round": ckpt.round, "split": args.split}
    out = {**report, "source": source}
    if args.out:
        _write_json(Path(args.out), out)
        print(f"evaluate: accuracy {report['accuracy']:.4f} -> {args.out}")
    else:
        print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    run_dir = Path(args.run_dir) if args.run_dir else run_dir_for(cfg)
    res = build_report(run_dir, args.baseline, args.out, figures=not args.no_figures)
    print(res["tables"], end="")
    for name, path in res["files"].items():
        print(f"wrote {name}: {path}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    """datagen -> preprocess -> federated run -> centralized run -> report."""
    cfg = resolve_config(args)
    timings = {}
    t0 = time.perf_counter()
    data_dir, proc_dir = Path(cfg.paths.data_dir), Path(cfg.paths.processed_dir)
    if not args.skip_datagen:
        generate(cfg.datagen, data_dir, jobs=args.jobs)
        timings["datagen_s"] = time.perf_counter() - t0
    t = time.perf_counter()
    preprocess(data_dir, proc_dir, cfg.preprocess, jobs=args.jobs)
    timings["preprocess_s"] = time.perf_counter() - t
    data, records = _load_processed(proc_dir, args.jobs)
    fed_cfg = cfg.with_overrides({"federation.mode": "federated"})
    cen_cfg = cfg.with_overrides({"federation.mode": "centralized"})
    t = time.perf_counter()
    fed, fed_dir = train_run(fed_cfg, args.jobs, args.resume, data, records)
    timings["federated_s"] = time.perf_counter() - t
    t = time.perf_counter()
    cen, cen_dir = train_run(cen_cfg, args.jobs, args.resume, data, records)
    timings["centralized_s"] = time.perf_counter() - t
    res = build_report(fed_dir, cen_dir, figures=not args.no_figures)
    timings["total_s"] = time.perf_counter() - t0
    _write_json(fed_dir / "report" / "timings.json", {k: round(v, 2) for k, v in timings.items()})
    print(res["tables"], end="")
    _summarize(fed, fed_dir)
    _summarize(cen, cen_dir)
    print("timings: " + ", ".join(f"{k}={v:.1f}" for k, v in timings.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--set", action="append", metavar="K=V", default=[],
                        help="override a dotted config key, e.g. federation.rounds=5 (repeatable)")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel workers")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--mode", choices=("fed", "central"), help="federated or centralized training")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedpath", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedpath {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("datagen", parents=[common], help="generate the synthetic dataset")
    s.add_argument("--out", help="output directory (default: paths.data_dir)")
    s.set_defaults(func=cmd_datagen)

    s = sub.add_parser("preprocess", parents=[common], help="normalize, tile, filter and dedup images")
    s.add_argument("input", nargs="?", help="folder tree or ZIP archive (default: paths.data_dir)")
    s.add_argument("--out", help="output directory (default: paths.processed_dir)")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("partition", parents=[common], help="split and assign training patches to clients")
    s.add_argument("manifest", nargs="?", help="processed manifest.jsonl")
    s.add_argument("--out", help="output JSON (default: partition.json next to the manifest)")
    s.set_defaults(func=cmd_partition)

    def add_resume(s):
        g = s.add_mutually_exclusive_group()
        g.add_argument("--resume", dest="resume", action="store_true", default=True,
                       help="continue from the latest checkpoint (default)")
        g.add_argument("--no-resume", dest="resume", action="store_false", help="start from round 0")

    s = sub.add_parser("train", parents=[common], help="federated or centralized training")
    add_resume(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="metrics for a checkpoint or a predictions file")
    s.add_argument("checkpoint", nargs="?", help="ckpt_round_<r>.bin (default: the run's latest)")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--predictions", metavar="JSONL",
                   help="rows of {label, prediction, magnification} instead of a checkpoint")
    s.add_argument("--out", help="write the metrics JSON here instead of stdout")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="tables, convergence CSV and figures")
    s.add_argument("run_dir", nargs="?", help="run directory (default: from config)")
    s.add_argument("--baseline", help="centralized run directory for the comparison table")
    s.add_argument("--out", help="output directory (default: <run_dir>/report)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", parents=[common], help="datagen, preprocess, both trainings and report")
    s.add_argument("--skip-datagen", action="store_true", help="reuse images already in paths.data_dir")
    s.add_argument("--no-figures", action="store_true")
    add_resume(s)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="[fedpath] %(levelname)s %(message)s", stream=sys.stderr, force=True)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, ManifestError, DataError, FileNotFoundError, zipfile.BadZipFile, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AggregationError, ClientFailure, NonFiniteError) as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
