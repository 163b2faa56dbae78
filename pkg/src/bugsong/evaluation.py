"""Metrics, confusion matrices, and filter-drift reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .mel import hz_to_mel


@dataclass
class ConfusionMatrix:
    counts: np.ndarray            # (C, C); rows true, columns predicted
    class_names: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        C = len(self.class_names)
        if self.counts.shape != (C, C):
            raise DataError(f"confusion shape {self.counts.shape} does not "
                            f"match {C} classes")
        if (self.counts < 0).any():
            raise DataError("confusion counts must be non-negative")


def confusion_from_predictions(true_ids, logits, class_names) -> ConfusionMatrix:
    """Accumulate argmax predictions; ties break to the lowest class index."""
    true_ids = np.asarray(true_ids, dtype=np.int64)
    logits = np.asarray(logits, dtype=np.float64)
    C = len(class_names)
    if logits.ndim != 2 or logits.shape != (len(true_ids), C):
        raise DataError(f"logits shape {logits.shape} does not match "
                        f"{len(true_ids)} examples x {C} classes")
    if len(true_ids) and (true_ids.min() < 0 or true_ids.max() >= C):
        raise DataError("label id out of range")
    counts = np.zeros((C, C), dtype=np.int64)
    predicted = np.argmax(logits, axis=1)   # first max wins a tie
    np.add.at(counts, (true_ids, predicted), 1)
    return ConfusionMatrix(counts, list(class_names))


def compute_metrics(cm: ConfusionMatrix) -> dict[str, float]:
    """Accuracy and macro precision/recall/F1; 0/0 terms count as 0."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise DataError("empty confusion matrix")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0,
                      2 * precision * recall / (precision + recall), 0.0)
    return {
        "accuracy": float(tp.sum() / total),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
    }


def save_confusion_csv(path: str | Path, cm: ConfusionMatrix) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + cm.class_names)
        for name, row in zip(cm.class_names, cm.counts):
            w.writerow([name] + [int(v) for v in row])


def load_confusion_csv(path: str | Path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    counts = np.array([[int(v) for v in row[1:]] for row in rows[1:]])
    return ConfusionMatrix(counts, names)


# ---------------------------------------------------------------------------
# Filter drift (trained vs initialized center frequencies).

@dataclass
class FilterDriftReport:
    init_hz: np.ndarray
    trained_hz: np.ndarray
    sorted_order: np.ndarray       # filter indices sorted by trained center
    ordering_violations: int       # descents of trained centers in index order

    @property
    def init_mel(self) -> np.ndarray:
        return hz_to_mel(self.init_hz)

    @property
    def trained_mel(self) -> np.ndarray:
        return hz_to_mel(self.trained_hz)

    @property
    def delta_hz(self) -> np.ndarray:
        return self.trained_hz - self.init_hz

    @property
    def delta_mel(self) -> np.ndarray:
        return self.trained_mel - self.init_mel


def filter_drift(init_hz, trained_hz) -> FilterDriftReport:
    init_hz = np.asarray(init_hz, dtype=np.float64)
    trained_hz = np.asarray(trained_hz, dtype=np.float64)
    if init_hz.shape != trained_hz.shape or init_hz.ndim != 1:
        raise DataError(f"filter count mismatch: {init_hz.shape} vs "
                        f"{trained_hz.shape}")
    violations = int(np.sum(np.diff(trained_hz) < 0))
    order = np.argsort(trained_hz, kind="stable")
    return FilterDriftReport(init_hz, trained_hz, order, violations)


DRIFT_COLUMNS = ["filter_id", "init_hz", "init_mel", "trained_hz",
                 "trained_mel", "delta_hz", "delta_mel", "sorted_rank"]


def save_drift_csv(path: str | Path, report: FilterDriftReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rank = np.empty(len(report.init_hz), dtype=np.int64)
    rank[report.sorted_order] = np.arange(len(report.init_hz))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DRIFT_COLUMNS)
        for i in range(len(report.init_hz)):
            w.writerow([i, f"{report.init_hz[i]:.12g}",
                        f"{report.init_mel[i]:.12g}",
                        f"{report.trained_hz[i]:.12g}",
                        f"{report.trained_mel[i]:.12g}",
                        f"{report.delta_hz[i]:.12g}",
                        f"{report.delta_mel[i]:.12g}",
                        int(rank[i])])


def load_drift_csv(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"drift report not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DRIFT_COLUMNS:
            raise DataError(f"bad drift report header in {path}")
        rows = list(reader)
    out = {}
    for col in DRIFT_COLUMNS:
        dtype = np.int64 if col in ("filter_id", "sorted_rank") else np.float64
        out[col] = np.array([row[col] for row in rows], dtype=dtype)
    return out


# ---------------------------------------------------------------------------
# Optional file-level view: average class probabilities over a file's chunks.

def file_level_metrics(source_paths, true_ids, probabilities,
                       class_names) -> dict[str, float]:
    """Score each source file by its mean class-probability vector."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    true_ids = np.asarray(true_ids, dtype=np.int64)
    groups: dict[str, list[int]] = {}
    for i, path in enumerate(source_paths):
        groups.setdefault(path, []).append(i)
    file_true, file_logits = [], []
    for path in sorted(groups):
        idx = groups[path]
        labels = set(true_ids[idx].tolist())
        if len(labels) != 1:
            raise DataError(f"file {path} has chunks with mixed labels")
        file_true.append(labels.pop())
        file_logits.append(probabilities[idx].mean(axis=0))
    cm = confusion_from_predictions(file_true, np.array(file_logits), class_names)
    metrics = compute_metrics(cm)
    metrics["n_files"] = len(file_true)
    return metrics
