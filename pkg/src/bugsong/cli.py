"""Command-line pipeline driver.

Stages: synth, ingest, split, chunk, augment, train, evaluate,
analyze-filters, plus `all` which chains ingest through evaluation
(and filter analysis when the trainable frontend is active).

Every stage writes a JSON receipt under <work_dir>/receipts/ recording
its inputs, outputs, seed, and config/data hashes, and each stage checks
the receipt of its upstream stage before running: a hash mismatch means
the inputs on disk were built from a different config, and the stage
refuses unless --force is given. The config file itself is copied
verbatim into the work directory, so an output tree is self-describing.

Exit codes: 0 success, 1 usage or config error, 2 data error,
3 training aborted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .augment import (AugmentPlan, augment_store, builtin_impulse_responses,
                      load_impulse_responses)
from .config import ExperimentConfig, load_config
from .dataset import (ChunkStore, DatasetManifest, chunk_manifest, ingest,
                      split_per_class)
from .errors import ConfigError, DataError, TrainingAborted
from .evaluation import filter_drift, save_confusion_csv, save_drift_csv
from .leaf import load_param_snapshot
from .synth import synth_dataset
from .training import evaluate_checkpoint, run_experiment


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as ConfigError (exit code 1)."""

    def error(self, message):
        raise ConfigError(message)


class Paths:
    """Layout of a work directory."""

    def __init__(self, config: ExperimentConfig):
        self.work = Path(config.work_dir)
        self.manifest = self.work / "manifest.csv"
        self.split_manifest = self.work / "split_manifest.csv"
        self.chunks = self.work / "chunks"
        self.receipts = self.work / "receipts"
        self.runs = self.work / "runs"
        self.eval = self.work / "eval"
        self.analysis = self.work / "analysis"


def _receipt_path(paths: Paths, stage: str, frontend: str | None) -> Path:
    name = stage if frontend is None else f"{stage}_{frontend}"
    return paths.receipts / f"{name}.json"


def _write_receipt(paths: Paths, stage: str, config: ExperimentConfig,
                   inputs, outputs, started: float,
                   frontend: str | None) -> None:
    receipt = {
        "stage": stage,
        "frontend": frontend,
        "config_hash": config.config_hash(),
        "data_hash": config.data_hash(),
        "seed": config.seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started_utc": datetime.fromtimestamp(
            started, timezone.utc).isoformat(timespec="seconds"),
        "duration_s": round(time.time() - started, 3),
    }
    path = _receipt_path(paths, stage, frontend)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(receipt, indent=2, sort_keys=True) + "\n")


def _check_upstream(paths: Paths, stage: str, config: ExperimentConfig,
                    hash_key: str, force: bool,
                    frontend: str | None = None) -> None:
    """Verify the upstream stage ran and its hash matches this config."""
    rp = _receipt_path(paths, stage, frontend)
    if not rp.exists():
        label = stage if frontend is None else f"{stage} --frontend {frontend}"
        raise DataError(f"missing upstream artifact: no receipt at {rp}; "
                        f"run `bugsong {label}` first")
    receipt = json.loads(rp.read_text())
    want = getattr(config, hash_key)()
    have = receipt.get(hash_key)
    if have != want:
        if force:
            return
        raise DataError(
            f"stage {stage!r} was built with {hash_key}={have}, current "
            f"config gives {want}; rerun that stage or pass --force")


# ---------------------------------------------------------------------------
# Stage bodies. Each returns (inputs, outputs) for the receipt.

def stage_synth(config, args, paths):
    synth_dataset(config.data_root, config.synth_classes,
                  config.synth_files_per_class, config.synth_duration_range,
                  config.seed, config.sample_rate)
    return [], [config.data_root]


def stage_ingest(config, args, paths):
    manifest = ingest(config.data_root, config.ingest_min_files)
    manifest.save(paths.manifest)
    return [config.data_root], [paths.manifest]


def stage_split(config, args, paths):
    _check_upstream(paths, "ingest", config, "data_hash", args.force)
    manifest = DatasetManifest.load(paths.manifest)
    split_per_class(manifest, config.seed).save(paths.split_manifest)
    return [paths.manifest], [paths.split_manifest]


def stage_chunk(config, args, paths):
    _check_upstream(paths, "split", config, "data_hash", args.force)
    manifest = DatasetManifest.load(paths.split_manifest)
    store = ChunkStore(paths.chunks)
    chunk_manifest(manifest, store, config.sample_rate, config.chunk_seconds,
                   config.hop_seconds, config.min_tail_seconds,
                   config.ingest_tail_seconds, config.silence_floor_db)
    return [paths.split_manifest], [store.index_path]


def _build_plan(config: ExperimentConfig) -> AugmentPlan:
    if config.ir_dir is not None:
        ir_set = load_impulse_responses(config.ir_dir, config.sample_rate)
    else:
        ir_set = builtin_impulse_responses(config.sample_rate)
    return AugmentPlan(generations=config.aug_generations,
                       mask_prob=config.aug_mask_prob,
                       mask_band_range=config.aug_mask_band,
                       snr_range_db=config.aug_snr_db,
                       ir_prob=config.aug_ir_prob,
                       ir_set=ir_set, seed=config.seed)


def stage_augment(config, args, paths):
    _check_upstream(paths, "chunk", config, "data_hash", args.force)
    store = ChunkStore(paths.chunks)
    added = augment_store(store, _build_plan(config), config.sample_rate,
                          jobs=args.jobs)
    print(f"augment: {added} generated chunks")
    return [store.index_path], [store.index_path,
                                store.directory / "augment_lineage.csv"]


def stage_train(config, args, paths):
    if config.aug_generations > 0:
        _check_upstream(paths, "augment", config, "data_hash", args.force)
    else:
        _check_upstream(paths, "chunk", config, "data_hash", args.force)
    store = ChunkStore(paths.chunks)
    result = run_experiment(store, config, paths.work)
    frontend_dir = paths.runs / config.frontend
    print(f"selected run {result.selected} "
          f"(best val loss {result.selected_run.best_val_loss:.4f})")
    return [store.index_path], [frontend_dir / "selection.json"]


def _load_selection(paths: Paths, config: ExperimentConfig) -> dict:
    sel_path = paths.runs / config.frontend / "selection.json"
    if not sel_path.exists():
        raise DataError(f"no selection at {sel_path}; run "
                        f"`bugsong train --frontend {config.frontend}` first")
    return json.loads(sel_path.read_text())


def stage_evaluate(config, args, paths):
    _check_upstream(paths, "train", config, "config_hash", args.force,
                    frontend=config.frontend)
    selection = _load_selection(paths, config)
    store = ChunkStore(paths.chunks)
    report = evaluate_checkpoint(store, config, selection["checkpoint"])
    out_dir = paths.eval / config.frontend
    out_dir.mkdir(parents=True, exist_ok=True)

    metrics = {
        "frontend": config.frontend,
        "config_hash": config.config_hash(),
        "selected_run": selection["selected_run"],
        "best_epoch": selection["best_epoch"],
        "best_val_loss": selection["best_val_loss"],
        "classes": report.class_names,
        "test": report.metrics,
    }
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    save_confusion_csv(out_dir / "confusion.csv", report.confusion)
    (out_dir / "metrics_files.json").write_text(
        json.dumps(report.file_metrics, indent=2, sort_keys=True) + "\n")
    run_dir = paths.runs / config.frontend / f"run{selection['selected_run']:02d}"
    shutil.copyfile(run_dir / "training_log.csv",
                    out_dir / "training_curve.csv")
    acc = report.metrics["accuracy"]
    print(f"evaluate ({config.frontend}): test accuracy {acc:.4f} over "
          f"{len(report.class_names)} classes -> {out_dir}")
    return [selection["checkpoint"], str(store.index_path)], [
        out_dir / "metrics.json", out_dir / "confusion.csv",
        out_dir / "metrics_files.json", out_dir / "training_curve.csv"]


def stage_analyze_filters(config, args, paths):
    if config.frontend != "leaf":
        raise ConfigError("analyze-filters needs the trainable frontend; "
                          "pass --frontend leaf or set frontend: leaf")
    _check_upstream(paths, "train", config, "config_hash", args.force,
                    frontend="leaf")
    selection = _load_selection(paths, config)
    run_dir = paths.runs / "leaf" / f"run{selection['selected_run']:02d}"
    init = load_param_snapshot(run_dir / "leaf_init.csv")
    trained = load_param_snapshot(run_dir / "leaf_trained.csv")
    report = filter_drift(init["eta_hz"], trained["eta_hz"])
    out_dir = paths.analysis / "leaf"
    save_drift_csv(out_dir / "filter_drift.csv", report)
    summary = {
        "n_filters": int(len(report.init_hz)),
        "ordering_violations": report.ordering_violations,
        "mean_abs_delta_hz": float(abs(report.delta_hz).mean()),
        "max_abs_delta_hz": float(abs(report.delta_hz).max()),
    }
    (out_dir / "drift_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"analyze-filters: {summary['ordering_violations']} ordering "
          f"violations, max drift {summary['max_abs_delta_hz']:.1f} Hz")
    return [run_dir / "leaf_init.csv", run_dir / "leaf_trained.csv"], [
        out_dir / "filter_drift.csv", out_dir / "drift_summary.json"]


_STAGES = {
    "synth": (stage_synth, "generate the synthetic benchmark corpus"),
    "ingest": (stage_ingest, "scan the corpus tree into a manifest"),
    "split": (stage_split, "assign train/val/test per class"),
    "chunk": (stage_chunk, "cut split files into fixed-length chunks"),
    "augment": (stage_augment, "generate augmented training chunks"),
    "train": (stage_train, "train one experiment (several runs)"),
    "evaluate": (stage_evaluate, "score the selected checkpoint on test"),
    "analyze-filters": (stage_analyze_filters,
                        "report filter center-frequency drift"),
}
_ALL_ORDER = ["ingest", "split", "chunk", "augment", "train", "evaluate",
              "analyze-filters"]
_FRONTEND_STAGES = {"train", "evaluate", "analyze-filters", "all"}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bugsong",
                     description="Insect-sound classification pipeline: "
                                 "fixed mel or trainable Gabor frontend, "
                                 "small CNN, deterministic stages.")
    parser.add_argument("--version", action="version",
                        version=f"bugsong {__version__}")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="STAGE")
    names = list(_STAGES) + ["all"]
    helps = {name: h for name, (_, h) in _STAGES.items()}
    helps["all"] = "run ingest through evaluation (and filter analysis)"
    for name in names:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", required=True,
                        help="path to the experiment config YAML")
        sp.add_argument("--force", action="store_true",
                        help="run even if upstream hashes do not match")
        sp.add_argument("--jobs", type=int, default=1,
                        help="intra-stage parallelism (default 1)")
        if name in _FRONTEND_STAGES:
            sp.add_argument("--frontend", choices=("mel", "leaf"),
                            help="override the frontend named in the config")
    return parser


def _run_stage(name: str, config, args, paths) -> None:
    fn, _ = _STAGES[name]
    frontend = config.frontend if name in _FRONTEND_STAGES else None
    started = time.time()
    inputs, outputs = fn(config, args, paths)
    _write_receipt(paths, name, config, inputs, outputs, started, frontend)


def _copy_config(src: str, paths: Paths) -> None:
    dest = paths.work / "config.yaml"
    if Path(src).resolve() != dest.resolve():
        shutil.copyfile(src, dest)


def run_command(argv=None) -> None:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    config = load_config(args.config)
    if getattr(args, "frontend", None):
        config = dataclasses.replace(config, frontend=args.frontend)
        config.validate()
    torch.set_num_threads(args.jobs)
    paths = Paths(config)
    paths.work.mkdir(parents=True, exist_ok=True)
    _copy_config(args.config, paths)

    if args.command == "all":
        for name in _ALL_ORDER:
            if name == "analyze-filters" and config.frontend != "leaf":
                continue
            print(f"=== {name} ===")
            _run_stage(name, config, args, paths)
    else:
        _run_stage(args.command, config, args, paths)


def main(argv=None) -> int:
    try:
        run_command(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
