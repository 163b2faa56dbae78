"""Training harness: batched cross-entropy, early stopping, run selection.

Per run: fresh model init under a derived seed, AdamW with decoupled
weight decay on backend weights only, constraint projection after every
step when the trainable frontend is active, checkpoint on each strict
validation improvement, and test metrics computed once on the restored
best checkpoint. An experiment is `runs` such trainings; the run with
the lowest best validation loss is selected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backend import ConvClassifier, parameter_table
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .dataset import ChunkStore
from .errors import DataError, TrainingAborted
from .evaluation import (ConfusionMatrix, compute_metrics,
                         confusion_from_predictions, file_level_metrics)
from .leaf import LeafFrontend, save_param_snapshot
from .mel import MelConfig, MelFrontend

LOG_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc",
               "patience"]


class EarlyStopper:
    """Patience counter over validation losses.

    An epoch improves when loss < best - min_delta (strict by default);
    improvement resets the counter, anything else increments it. Stop
    once the counter reaches `patience`.
    """

    def __init__(self, patience: int = 8, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch = 0
        self.counter = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


def early_stopper(val_losses, patience: int = 8, min_delta: float = 0.0,
                  ) -> tuple[int, int | None]:
    """Replay a loss sequence; returns (best_epoch, stop_epoch), 1-based.

    stop_epoch is None when the sequence ends before patience runs out.
    """
    stopper = EarlyStopper(patience, min_delta)
    for epoch, loss in enumerate(val_losses, start=1):
        stopper.update(epoch, float(loss))
        if stopper.should_stop:
            return stopper.best_epoch, epoch
    return stopper.best_epoch, None


def derive_run_seed(seed: int, run_index: int) -> int:
    return int(np.random.SeedSequence([seed, run_index]).generate_state(
        1, np.uint32)[0])


# ---------------------------------------------------------------------------
# Data plumbing.

def build_mel_frontend(config: ExperimentConfig) -> MelFrontend:
    mel_cfg = MelConfig(n_filters=config.n_filters, hop=config.mel_hop,
                        window=config.mel_window,
                        fft_size=config.mel_fft_size,
                        f_max=config.sample_rate / 2.0,
                        log_floor=config.mel_log_floor,
                        sample_rate=config.sample_rate)
    return MelFrontend(mel_cfg, chunk_len=config.chunk_len)


class ChunkLoader:
    """Serves batches for one split, as waveforms or mel features."""

    def __init__(self, store: ChunkStore, rows: list[dict], mode: str,
                 config: ExperimentConfig, mel_frontend: MelFrontend | None,
                 cache: bool):
        self.store = store
        self.rows = rows
        self.mode = mode
        self.config = config
        self.mel_frontend = mel_frontend
        self.labels = np.array([int(r["label_id"]) for r in rows],
                               dtype=np.int64)
        self.cache = None
        if cache and rows:
            self.cache = np.stack([self._load(i) for i in range(len(rows))])

    def item_bytes(self) -> int:
        if self.mode == "mel":
            fm = self.mel_frontend
            return fm.config.n_filters * fm.n_frames * 4
        return self.config.chunk_len * 4

    def _load(self, i: int) -> np.ndarray:
        samples = self.store.load_chunk(self.rows[i], self.config.sample_rate)
        if len(samples) != self.config.chunk_len:
            raise DataError(f"chunk {self.rows[i]['chunk_path']} has "
                            f"{len(samples)} samples, expected "
                            f"{self.config.chunk_len}")
        if self.mode == "mel":
            return self.mel_frontend(samples).values
        return samples

    def batch(self, indices) -> torch.Tensor:
        if self.cache is not None:
            arr = self.cache[indices]
        else:
            arr = np.stack([self._load(i) for i in indices])
        return torch.from_numpy(np.ascontiguousarray(arr))

    def __len__(self) -> int:
        return len(self.rows)


class TrainData:
    """Loaders for the requested splits plus the shared class list."""

    def __init__(self, store: ChunkStore, config: ExperimentConfig,
                 splits: tuple[str, ...] = ("train", "val", "test")):
        rows = store.chunk_rows()
        if not rows:
            raise DataError("chunk index is empty")
        self.class_names = sorted({r["species"] for r in rows})
        index = {name: i for i, name in enumerate(self.class_names)}
        for r in rows:
            if int(r["label_id"]) != index[r["species"]]:
                raise DataError(
                    f"chunk {r['chunk_path']}: label_id {r['label_id']} does "
                    f"not match the dense class index; re-run the chunk stage")
        mode = "wave" if config.frontend == "leaf" else "mel"
        mel_frontend = build_mel_frontend(config) if mode == "mel" else None
        by_split = {s: [r for r in rows if r["split"] == s] for s in splits}
        for s in splits:
            if not by_split[s]:
                raise DataError(f"no chunks with split={s!r} in the index")
            if s != "train":
                tainted = [r for r in by_split[s] if r["aug_gen"] != "original"]
                if tainted:
                    raise DataError(f"augmented chunks found in split={s!r}")

        item = (config.chunk_len if mode == "wave"
                else config.n_filters * (config.chunk_len // config.mel_hop)) * 4
        total = sum(len(by_split[s]) for s in splits) * item
        cache = total <= config.cache_mb * 1_000_000
        self.loaders = {s: ChunkLoader(store, by_split[s], mode, config,
                                       mel_frontend, cache) for s in splits}

    def loader(self, split: str) -> ChunkLoader:
        return self.loaders[split]


# ---------------------------------------------------------------------------
# Model assembly and batch execution.

def build_models(config: ExperimentConfig, n_classes: int,
                 ) -> tuple[LeafFrontend | None, ConvClassifier]:
    frontend = None
    if config.frontend == "leaf":
        frontend = LeafFrontend(
            n_filters=config.n_filters, kernel_len=config.leaf_kernel_len,
            pool_stride=config.leaf_pool_stride,
            sample_rate=config.sample_rate,
            init_scale=config.leaf_init_scale)
    backend = ConvClassifier(n_classes, config.dropout)
    return frontend, backend


def _forward(frontend, backend, batch: torch.Tensor) -> torch.Tensor:
    if frontend is not None:
        return backend(frontend(batch.unsqueeze(1)))
    return backend(batch)


def _set_mode(frontend, backend, train: bool) -> None:
    backend.train(train)
    if frontend is not None:
        frontend.train(train)


def build_optimizer(frontend, backend, config) -> torch.optim.Optimizer:
    # Decoupled decay on backend weights only; frontend parameters are
    # physical quantities (Hz, samples) that decay would drag toward 0.
    groups = [{"params": list(backend.parameters()),
               "weight_decay": config.weight_decay}]
    if frontend is not None:
        groups.append({"params": list(frontend.parameters()),
                       "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=config.learning_rate)


def _batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(frontend, backend, optimizer, loader: ChunkLoader,
                order: np.ndarray, batch_size: int) -> tuple[float, float]:
    """One pass over the training split. Returns (mean loss, accuracy)."""
    _set_mode(frontend, backend, True)
    total_loss, correct = 0.0, 0
    for idx in _batches(len(loader), batch_size, order):
        x = loader.batch(idx)
        y = torch.from_numpy(loader.labels[idx])
        logits = _forward(frontend, backend, x)
        loss = F.cross_entropy(logits, y)
        if not torch.isfinite(loss):
            raise TrainingAborted(
                f"non-finite training loss ({loss.item()}) on a batch of "
                f"{len(idx)}; aborting run")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        if frontend is not None:
            frontend.project_constraints()
        total_loss += loss.item() * len(idx)
        correct += int((logits.argmax(dim=1) == y).sum())
    n = len(loader)
    return total_loss / n, correct / n


def evaluate_split(frontend, backend, loader: ChunkLoader, batch_size: int,
                   ) -> tuple[float, float, np.ndarray]:
    """Eval-mode pass. Returns (mean loss, accuracy, logits for all chunks)."""
    _set_mode(frontend, backend, False)
    total_loss, correct = 0.0, 0
    outputs = []
    with torch.no_grad():
        for idx in _batches(len(loader), batch_size):
            x = loader.batch(idx)
            y = torch.from_numpy(loader.labels[idx])
            logits = _forward(frontend, backend, x)
            total_loss += float(F.cross_entropy(logits, y, reduction="sum"))
            correct += int((logits.argmax(dim=1) == y).sum())
            outputs.append(logits.numpy())
    n = len(loader)
    return total_loss / n, correct / n, np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# Checkpoint adapters.

def _state_arrays(frontend, backend) -> dict[str, np.ndarray]:
    arrays = {}
    for prefix, module in [("backend", backend), ("frontend", frontend)]:
        if module is None:
            continue
        for key, value in module.state_dict().items():
            arrays[f"{prefix}.{key}"] = value.detach().cpu().numpy()
    return arrays

def _load_state(frontend, backend, arrays: dict[str, np.ndarray]) -> None:
    for prefix, module in [("backend", backend), ("frontend", frontend)]:
        if module is None:
            continue
        state = {key[len(prefix) + 1:]: torch.from_numpy(np.array(value))
                 for key, value in arrays.items()
                 if key.startswith(prefix + ".")}
        module.load_state_dict(state)


# ---------------------------------------------------------------------------
# Single run and experiment drivers.

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    patience: int


@dataclass
class RunResult:
    run_index: int
    seed: int
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    checkpoint_path: str = ""
    aborted: bool = False
    abort_reason: str = ""
    test_metrics: dict | None = None


def save_run_log(path: str | Path, epochs: list[EpochStats]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(LOG_COLUMNS)]
    for e in epochs:
        lines.append(f"{e.epoch},{e.train_loss:.10g},{e.train_acc:.10g},"
                     f"{e.val_loss:.10g},{e.val_acc:.10g},{e.patience}")
    path.write_text("\n".join(lines) + "\n")


def run_training(data: TrainData, config: ExperimentConfig, run_index: int,
                 run_dir: str | Path, echo=print) -> RunResult:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed = derive_run_seed(config.seed, run_index)
    torch.manual_seed(seed)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, run_index, 1]))

    n_classes = len(data.class_names)
    frontend, backend = build_models(config, n_classes)
    optimizer = build_optimizer(frontend, backend, config)
    echo(parameter_table(torch.nn.ModuleDict(
        {k: m for k, m in [("frontend", frontend), ("backend", backend)]
         if m is not None}), title=f"run {run_index} ({config.frontend})"))
    if frontend is not None:
        save_param_snapshot(run_dir / "leaf_init.csv", frontend)

    train_loader = data.loader("train")
    val_loader = data.loader("val")
    stopper = EarlyStopper(config.patience, config.patience_min_delta)
    ckpt_path = run_dir / "checkpoint.bin"
    result = RunResult(run_index, seed)

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_loader))
        try:
            train_loss, train_acc = train_epoch(
                frontend, backend, optimizer, train_loader, order,
                config.batch_size)
        except TrainingAborted as exc:
            echo(f"run {run_index} aborted at epoch {epoch}: {exc}")
            result.aborted, result.abort_reason = True, str(exc)
            save_run_log(run_dir / "training_log.csv", result.epochs)
            return result
        val_loss, val_acc, _ = evaluate_split(
            frontend, backend, val_loader, config.batch_size)
        if not math.isfinite(val_loss):
            echo(f"run {run_index} aborted at epoch {epoch}: "
                 f"non-finite validation loss")
            result.aborted = True
            result.abort_reason = "non-finite validation loss"
            save_run_log(run_dir / "training_log.csv", result.epochs)
            return result
        if stopper.update(epoch, val_loss):
            save_checkpoint(ckpt_path, _state_arrays(frontend, backend), {
                "epoch": epoch, "val_loss": val_loss,
                "config_hash": config.config_hash(),
                "frontend": config.frontend,
                "class_names": data.class_names,
                "run_index": run_index, "seed": seed,
            })
        echo(f"E{epoch} Training Loss: {train_loss:.2f}, "
             f"Accuracy: {train_acc:.2f}")
        echo(f"E{epoch} Validation Loss: {val_loss:.2f}, "
             f"Accuracy: {val_acc:.2f}, "
             f"Patience: {stopper.counter}/{config.patience}")
        result.epochs.append(EpochStats(epoch, train_loss, train_acc,
                                        val_loss, val_acc, stopper.counter))
        if stopper.should_stop:
            echo("Stop Training")
            break

    result.best_epoch = stopper.best_epoch
    result.best_val_loss = stopper.best_loss
    result.checkpoint_path = str(ckpt_path)
    save_run_log(run_dir / "training_log.csv", result.epochs)

    # Test metrics on the restored best checkpoint, never the final weights.
    arrays, _ = load_checkpoint(ckpt_path)
    _load_state(frontend, backend, arrays)
    test_loader = data.loader("test")
    test_loss, test_acc, logits = evaluate_split(
        frontend, backend, test_loader, config.batch_size)
    cm = confusion_from_predictions(test_loader.labels, logits,
                                    data.class_names)
    metrics = compute_metrics(cm)
    metrics["test_loss"] = test_loss
    result.test_metrics = metrics
    echo(f"Test Accuracy: {metrics['accuracy']:.2f}, "
         f"F1 score: {metrics['macro_f1']:.2f}, "
         f"Recall: {metrics['macro_recall']:.2f}, "
         f"Precision: {metrics['macro_precision']:.2f}")
    if frontend is not None:
        save_param_snapshot(run_dir / "leaf_trained.csv", frontend)
    return result


@dataclass
class ExperimentResult:
    runs: list[RunResult]
    selected: int
    class_names: list[str]

    @property
    def selected_run(self) -> RunResult:
        return self.runs[self.selected]


def run_experiment(store: ChunkStore, config: ExperimentConfig,
                   work_dir: str | Path, echo=print) -> ExperimentResult:
    """Train `config.runs` models; select the lowest best validation loss."""
    work_dir = Path(work_dir)
    data = TrainData(store, config)
    frontend_dir = work_dir / "runs" / config.frontend
    runs = []
    for k in range(config.runs):
        echo(f"--- run {k} ({config.frontend} frontend) ---")
        runs.append(run_training(data, config, k,
                                 frontend_dir / f"run{k:02d}", echo))
    alive = [r for r in runs if not r.aborted]
    if not alive:
        raise TrainingAborted("all training runs aborted")
    best = min(alive, key=lambda r: (r.best_val_loss, r.run_index))
    result = ExperimentResult(runs, best.run_index, data.class_names)
    selection = {
        "frontend": config.frontend,
        "config_hash": config.config_hash(),
        "selected_run": best.run_index,
        "best_val_loss": best.best_val_loss,
        "best_epoch": best.best_epoch,
        "checkpoint": best.checkpoint_path,
        "class_names": data.class_names,
        "runs": [{
            "run_index": r.run_index, "seed": r.seed,
            "aborted": r.aborted, "abort_reason": r.abort_reason,
            "best_epoch": r.best_epoch,
            "best_val_loss": (None if r.aborted else r.best_val_loss),
            "test_metrics": r.test_metrics,
        } for r in runs],
    }
    (frontend_dir / "selection.json").write_text(
        json.dumps(selection, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# Stand-alone checkpoint evaluation (the evaluate stage).

@dataclass
class EvalReport:
    metrics: dict
    confusion: "ConfusionMatrix"
    class_names: list[str]
    file_metrics: dict


def evaluate_checkpoint(store: ChunkStore, config: ExperimentConfig,
                        ckpt_path: str | Path) -> EvalReport:
    arrays, meta = load_checkpoint(ckpt_path)
    if meta.get("frontend") != config.frontend:
        raise DataError(f"checkpoint was trained with frontend="
                        f"{meta.get('frontend')!r}, config says "
                        f"{config.frontend!r}")
    class_names = list(meta["class_names"])
    frontend, backend = build_models(config, len(class_names))
    _load_state(frontend, backend, arrays)
    data = TrainData(store, config, splits=("test",))
    if data.class_names != class_names:
        raise DataError("chunk store classes differ from checkpoint classes")
    loader = data.loader("test")
    _, _, logits = evaluate_split(frontend, backend, loader, config.batch_size)
    cm = confusion_from_predictions(loader.labels, logits, class_names)
    metrics = compute_metrics(cm)
    probs = torch.softmax(torch.from_numpy(logits), dim=1).numpy()
    file_metrics = file_level_metrics(
        [r["source_path"] for r in loader.rows], loader.labels, probs,
        class_names)
    return EvalReport(metrics, cm, class_names, file_metrics)
