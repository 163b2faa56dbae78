"""One flat YAML config drives every pipeline stage.

Unknown keys are hard errors. Two hashes derive from the config:
`config_hash` over every semantic key, and `data_hash` over the subset
that shapes the data artifacts (ingest/split/chunk/augment), so training
settings can change without invalidating prepared data. Path keys
(data_root, work_dir, ir_dir) are excluded from config_hash so the same
experiment is recognized wherever it lives; receipts record resolved
paths for human readers. ir_dir is part of data_hash because it changes
the augmented audio.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

_PATH_KEYS = {"data_root", "work_dir", "ir_dir"}

# Keys that determine the bytes in the prepared corpus, chunk store, and
# augmented store.
_DATA_KEYS = [
    "sample_rate", "chunk_seconds", "hop_seconds", "min_tail_seconds",
    "ingest_min_files", "ingest_tail_seconds", "silence_floor_db",
    "split_ratios", "seed",
    "aug_generations", "aug_mask_prob", "aug_mask_band", "aug_snr_db",
    "aug_ir_prob", "ir_dir",
    "synth_classes", "synth_files_per_class", "synth_duration_range",
]


@dataclass
class ExperimentConfig:
    # paths
    data_root: str = "corpus"
    work_dir: str = "work"
    ir_dir: str | None = None          # None -> built-in synthetic IRs
    # audio + chunking
    sample_rate: int = 44100
    chunk_seconds: float = 5.0
    hop_seconds: float = 1.25
    min_tail_seconds: float = 1.25
    ingest_min_files: int = 4
    ingest_tail_seconds: float | None = None
    silence_floor_db: float | None = None
    # split
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 2024
    # mel frontend
    n_filters: int = 64
    mel_window: int = 294
    mel_hop: int = 147
    mel_fft_size: int = 1024
    mel_log_floor: float = 1e-6
    # trainable frontend
    leaf_init_scale: str = "mel"
    leaf_kernel_len: int = 294
    leaf_pool_stride: int = 147
    # augmentation
    aug_generations: int = 10
    aug_mask_prob: float = 0.5
    aug_mask_band: tuple[float, float] = (0.06, 0.22)
    aug_snr_db: tuple[float, float] = (25.0, 80.0)
    aug_ir_prob: float = 0.7
    # training
    frontend: str = "leaf"
    batch_size: int = 14
    max_epochs: int = 60
    patience: int = 8
    patience_min_delta: float = 0.0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    dropout: float = 0.4
    runs: int = 5
    cache_mb: int = 1024
    # synthetic corpus
    synth_classes: int = 8
    synth_files_per_class: int = 4
    synth_duration_range: tuple[float, float] = (6.0, 9.0)

    def validate(self) -> None:
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 < self.min_tail_seconds <= self.chunk_seconds:
            raise ConfigError("min_tail_seconds must be in (0, chunk_seconds]")
        if self.hop_seconds <= 0 or self.chunk_seconds <= 0:
            raise ConfigError("chunk and hop durations must be positive")
        if self.ingest_min_files < 1:
            raise ConfigError("ingest_min_files must be >= 1")
        ratios = self.split_ratios
        if len(ratios) != 3 or any(r <= 0 for r in ratios) \
                or abs(sum(ratios) - 1.0) > 1e-6:
            raise ConfigError(f"split_ratios must be 3 positive values summing "
                              f"to 1, got {ratios}")
        if self.n_filters < 2:
            raise ConfigError("n_filters must be >= 2")
        if self.frontend not in ("mel", "leaf"):
            raise ConfigError(f"frontend must be 'mel' or 'leaf', got "
                              f"{self.frontend!r}")
        if self.leaf_init_scale not in ("mel", "linear"):
            raise ConfigError(f"leaf_init_scale must be 'mel' or 'linear', "
                              f"got {self.leaf_init_scale!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.patience < self.max_epochs:
            raise ConfigError("patience must satisfy 0 <= patience < max_epochs")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.aug_generations < 0:
            raise ConfigError("aug_generations must be >= 0")
        for name in ("aug_mask_band", "aug_snr_db", "synth_duration_range"):
            pair = getattr(self, name)
            if len(pair) != 2 or pair[0] > pair[1]:
                raise ConfigError(f"{name} must be an ordered [low, high] pair")
        for name in ("aug_mask_prob", "aug_ir_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.synth_classes < 2:
            raise ConfigError("synth_classes must be >= 2")

    @property
    def chunk_len(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    def _canonical(self, keys=None) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if keys is not None and f.name not in keys:
                continue
            if keys is None and f.name in _PATH_KEYS:
                continue
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self._canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def data_hash(self) -> str:
        blob = json.dumps(self._canonical(_DATA_KEYS), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(name: str, value, target):
    """Coerce a YAML scalar/list onto the dataclass field's type."""
    if value is None:
        return None
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {name} must be an integer, "
                              f"got {value!r}")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {name} must be a number, got {value!r}")
        return float(value)
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {name} must be a string, got {value!r}")
        return value
    if target is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {name} must be a list, got {value!r}")
        return tuple(float(v) for v in value)
    return value


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a config file; unknown keys are fatal."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a flat mapping, got {type(raw).__name__}")
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    type_map = {
        "ir_dir": str, "ingest_tail_seconds": float, "silence_floor_db": float,
        "split_ratios": tuple, "aug_mask_band": tuple, "aug_snr_db": tuple,
        "synth_duration_range": tuple,
    }
    for name, value in raw.items():
        f = fields[name]
        target = type_map.get(name, type(getattr(ExperimentConfig(), name)))
        kwargs[name] = _coerce(name, value, target)
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def default_config_yaml() -> str:
    """Render the defaults as a commented starter config."""
    cfg = ExperimentConfig()
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    # one block mapping with flow lists: "name: value" / "name: [a, b]"
    body = yaml.safe_dump(out, default_flow_style=None, sort_keys=False)
    return "# bugsong experiment configuration (defaults)\n" + body
