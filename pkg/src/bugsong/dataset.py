"""Corpus ingest, per-class splitting, and fixed-length chunking.

Layout contract: the corpus root has one subdirectory per species, each
holding WAV files. The manifest CSV (`path,species,duration_s,split,source_id`)
tracks files; the chunk index CSV
(`chunk_path,label_id,species,split,source_path,start_s,wrapped,aug_gen`)
tracks the fixed-length training examples cut from them.
"""

from __future__ import annotations

import csv
import hashlib
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import PIPELINE_RATE, AudioClip, load_pipeline_audio, read_wav, write_wav
from .errors import DataError

CHUNK_SECONDS = 5.0
HOP_SECONDS = 1.25
MIN_TAIL_SECONDS = 1.25

MANIFEST_COLUMNS = ["path", "species", "duration_s", "split", "source_id"]
INDEX_COLUMNS = ["chunk_path", "label_id", "species", "split",
                 "source_path", "start_s", "wrapped", "aug_gen"]


@dataclass
class ManifestEntry:
    path: str
    species: str
    duration_s: float
    split: str = ""      # "", "train", "val", "test"
    source_id: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def class_names(self) -> list[str]:
        # Dense, stable ids: sorted unique species names.
        return sorted({e.species for e in self.entries})

    @property
    def class_index(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(self.class_names)}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_COLUMNS)
            for e in self.entries:
                w.writerow([e.path, e.species, f"{e.duration_s:.6f}",
                            e.split, e.source_id])

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_COLUMNS:
                raise DataError(f"bad manifest header in {path}: {reader.fieldnames}")
            for row in reader:
                entries.append(ManifestEntry(row["path"], row["species"],
                                             float(row["duration_s"]),
                                             row["split"], row["source_id"]))
        return cls(entries)


def _source_id(root: Path, path: Path) -> str:
    rel = path.relative_to(root).as_posix()
    return hashlib.sha256(rel.encode()).hexdigest()[:16]


def ingest(root_dir: str | Path, min_files_per_class: int = 4,
           warn=lambda msg: print(msg, file=sys.stderr)) -> DatasetManifest:
    """Scan a per-species directory tree into a manifest.

    Unreadable files are warned about and skipped. Species folders with
    fewer than `min_files_per_class` usable files are dropped entirely.
    Raises DataError if nothing qualifies.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"corpus root is not a directory: {root}")
    species_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not species_dirs:
        raise DataError(f"no species directories under {root}")

    entries: list[ManifestEntry] = []
    for sdir in species_dirs:
        kept: list[ManifestEntry] = []
        for wav_path in sorted(sdir.glob("*.wav")):
            try:
                clip = read_wav(wav_path)
            except DataError as exc:
                warn(f"skipping {wav_path}: {exc}")
                continue
            kept.append(ManifestEntry(
                path=str(wav_path), species=sdir.name,
                duration_s=clip.duration_s,
                source_id=_source_id(root, wav_path)))
        if len(kept) < min_files_per_class:
            if kept:
                warn(f"dropping species {sdir.name}: "
                     f"{len(kept)} files < min {min_files_per_class}")
            continue
        entries.extend(kept)
    if not entries:
        raise DataError(f"no species with >= {min_files_per_class} usable files in {root}")
    return DatasetManifest(entries)


def _round_half_up(x: float) -> int:
    # Platform-stable rounding; avoids the stdlib's round-half-even.
    return int(math.floor(x + 0.5))


def split_counts(n: int) -> tuple[int, int, int]:
    """Per-class (train, val, test) sizes for n files. Requires n >= 3."""
    if n < 3:
        raise DataError(f"class has {n} files; need >= 3 to cover all splits")
    n_test = max(1, _round_half_up(0.2 * n))
    n_val = max(1, _round_half_up(0.1 * n))
    n_train = n - n_test - n_val
    if n_train < 1:
        raise DataError(f"class with {n} files leaves no training file")
    return n_train, n_val, n_test


def _class_rng(seed: int, species: str) -> np.random.Generator:
    digest = hashlib.sha256(species.encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed] + words))


def split_per_class(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Assign train/val/test per class, independently and deterministically.

    Each class is shuffled under its own seed derived from (seed, species),
    so the assignment does not depend on which other classes are present
    or on file discovery order.
    """
    by_species: dict[str, list[ManifestEntry]] = {}
    for e in manifest.entries:
        by_species.setdefault(e.species, []).append(e)
    out: list[ManifestEntry] = []
    for species in sorted(by_species):
        files = sorted(by_species[species], key=lambda e: e.path)
        n_train, n_val, n_test = split_counts(len(files))
        order = _class_rng(seed, species).permutation(len(files))
        for rank, idx in enumerate(order):
            e = files[idx]
            if rank < n_test:
                tag = "test"
            elif rank < n_test + n_val:
                tag = "val"
            else:
                tag = "train"
            out.append(ManifestEntry(e.path, e.species, e.duration_s, tag, e.source_id))
    out.sort(key=lambda e: e.path)
    return DatasetManifest(out)


@dataclass
class ChunkRecord:
    """A fixed-length example plus the lineage needed to rebuild it."""

    samples: np.ndarray          # float32, exactly chunk_seconds * rate values
    label_id: int
    species: str
    split: str
    source_path: str
    start_s: float               # offset into the source region
    wrapped: bool
    aug_gen: str = "original"


def chunk_samples(x: np.ndarray, sample_rate: int = PIPELINE_RATE,
                  chunk_seconds: float = CHUNK_SECONDS,
                  hop_seconds: float = HOP_SECONDS,
                  min_tail_seconds: float = MIN_TAIL_SECONDS,
                  ) -> list[tuple[np.ndarray, float, bool]]:
    """Cut one waveform into (samples, start_s, wrapped) windows.

    Shorter than one chunk: the clip is tiled to exactly chunk length.
    Otherwise windows start every hop while at least `min_tail_seconds`
    of audio remains, wrapping past the end back to offset 0. All
    boundary arithmetic is in integer samples.
    """
    n = len(x)
    if n == 0:
        raise DataError("cannot chunk an empty clip")
    chunk_len = int(round(chunk_seconds * sample_rate))
    hop = int(round(hop_seconds * sample_rate))
    tail = int(round(min_tail_seconds * sample_rate))
    if n < chunk_len:
        tiled = np.resize(x, chunk_len)  # tile-and-truncate
        return [(tiled.astype(np.float32, copy=False), 0.0, True)]
    out = []
    start = 0
    while n - start >= tail:
        end = start + chunk_len
        if end <= n:
            piece = x[start:end]
            wrapped = False
        else:
            piece = np.concatenate([x[start:], x[:end - n]])
            wrapped = True
        out.append((piece.astype(np.float32, copy=False),
                    start / sample_rate, wrapped))
        start += hop
    return out


def chunk_clip(clip: AudioClip, label_id: int, species: str, split: str,
               source_path: str, chunk_seconds: float = CHUNK_SECONDS,
               hop_seconds: float = HOP_SECONDS,
               min_tail_seconds: float = MIN_TAIL_SECONDS,
               tail_extract_s: float | None = None,
               silence_floor_db: float | None = None) -> list[ChunkRecord]:
    """Chunk one clip into records, applying the optional ingest rules.

    tail_extract_s: use only the last N seconds of the source.
    silence_floor_db: drop chunks whose RMS falls below this dBFS level.
    Chunk offsets are relative to the extracted region, which downstream
    code can locate from the manifest duration and the config.
    """
    x = clip.samples
    if tail_extract_s is not None:
        keep = int(round(tail_extract_s * clip.sample_rate))
        if keep <= 0:
            raise DataError(f"bad tail extraction window {tail_extract_s}")
        x = x[-keep:] if len(x) > keep else x
    records = []
    for samples, start_s, wrapped in chunk_samples(
            x, clip.sample_rate, chunk_seconds, hop_seconds, min_tail_seconds):
        if silence_floor_db is not None:
            rms = float(np.sqrt(np.mean(np.square(samples, dtype=np.float64))))
            if rms <= 0 or 20.0 * math.log10(rms) < silence_floor_db:
                continue
        records.append(ChunkRecord(samples, label_id, species, split,
                                   source_path, start_s, wrapped))
    return records


def expected_chunk_count(duration_s: float,
                         chunk_seconds: float = CHUNK_SECONDS,
                         hop_seconds: float = HOP_SECONDS,
                         min_tail_seconds: float = MIN_TAIL_SECONDS) -> int:
    """Closed-form chunk count for a given duration (no silence rule)."""
    if duration_s <= 0:
        raise DataError("duration must be positive")
    if duration_s < chunk_seconds:
        return 1
    return int(math.floor((duration_s - min_tail_seconds) / hop_seconds)) + 1


# ---------------------------------------------------------------------------
# Chunk store: float32 WAVs + index CSV.

class ChunkStore:
    """Directory of chunk WAVs addressed through an index CSV."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.index_path = self.directory / "chunk_index.csv"

    def chunk_rows(self) -> list[dict[str, str]]:
        if not self.index_path.exists():
            raise DataError(f"chunk index not found: {self.index_path}; "
                            "run the chunk stage first")
        with open(self.index_path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != INDEX_COLUMNS:
                raise DataError(f"bad chunk index header: {reader.fieldnames}")
            return list(reader)

    def write_rows(self, rows: list[dict[str, str]]) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        with open(self.index_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=INDEX_COLUMNS)
            w.writeheader()
            for row in rows:
                w.writerow(row)

    def load_chunk(self, row: dict[str, str],
                   sample_rate: int = PIPELINE_RATE) -> np.ndarray:
        clip = read_wav(self.directory / row["chunk_path"])
        if clip.sample_rate != sample_rate:
            raise DataError(f"chunk {row['chunk_path']} has rate "
                            f"{clip.sample_rate}, expected {sample_rate}")
        return clip.samples

    def store_record(self, rec: ChunkRecord, name: str,
                     sample_rate: int = PIPELINE_RATE) -> dict[str, str]:
        rel = Path(name)
        write_wav(self.directory / rel, AudioClip(rec.samples, sample_rate))
        return {
            "chunk_path": rel.as_posix(),
            "label_id": str(rec.label_id),
            "species": rec.species,
            "split": rec.split,
            "source_path": rec.source_path,
            "start_s": f"{rec.start_s:.6f}",
            "wrapped": "1" if rec.wrapped else "0",
            "aug_gen": rec.aug_gen,
        }


def chunk_manifest(manifest: DatasetManifest, store: ChunkStore,
                   sample_rate: int = PIPELINE_RATE,
                   chunk_seconds: float = CHUNK_SECONDS,
                   hop_seconds: float = HOP_SECONDS,
                   min_tail_seconds: float = MIN_TAIL_SECONDS,
                   tail_extract_s: float | None = None,
                   silence_floor_db: float | None = None) -> list[dict[str, str]]:
    """Chunk every split file in the manifest into the store.

    Files are processed in sorted order and chunk WAVs are named from the
    source id, so the result is independent of traversal order.
    """
    index = manifest.class_index
    unsplit = [e for e in manifest.entries if not e.split]
    if unsplit:
        raise DataError(f"{len(unsplit)} manifest entries have no split; "
                        "run the split stage first")
    rows: list[dict[str, str]] = []
    for entry in sorted(manifest.entries, key=lambda e: e.path):
        clip = load_pipeline_audio(entry.path, sample_rate)
        records = chunk_clip(clip, index[entry.species], entry.species,
                             entry.split, entry.path, chunk_seconds,
                             hop_seconds, min_tail_seconds,
                             tail_extract_s, silence_floor_db)
        for k, rec in enumerate(records):
            name = f"{entry.species}/{entry.source_id}_{k:04d}.wav"
            rows.append(store.store_record(rec, name, sample_rate))
    store.write_rows(rows)
    return rows
