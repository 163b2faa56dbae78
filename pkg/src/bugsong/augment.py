"""Training-set augmentation: frequency masking, SNR noise, IR convolution.

Each (chunk, generation) job owns an RNG derived from (plan seed, chunk
identity, generation), so augmentation is reproducible bit-for-bit from
the lineage regardless of worker count or processing order. The draw
protocol below is fixed; changing draw order changes the corpus.
"""

from __future__ import annotations

import csv
import hashlib
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .audio import PIPELINE_RATE, AudioClip, read_wav, resample, write_wav
from .dataset import ChunkRecord, ChunkStore
from .errors import DataError

LINEAGE_COLUMNS = ["chunk_path", "source_chunk_path", "gen", "masked",
                   "mask_center_hz", "mask_band_fraction", "snr_db",
                   "ir_applied", "ir_id", "ir_mix"]


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: int
    location_tag: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if not np.isfinite(self.samples).all():
            raise DataError(f"IR {self.location_tag} has non-finite samples")


@dataclass
class AugmentPlan:
    generations: int = 10
    mask_prob: float = 0.5
    mask_band_range: tuple[float, float] = (0.06, 0.22)
    snr_range_db: tuple[float, float] = (25.0, 80.0)
    ir_prob: float = 0.7
    ir_set: list[ImpulseResponse] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if self.generations < 0:
            raise DataError(f"generations must be >= 0, got {self.generations}")
        for name, p in [("mask_prob", self.mask_prob), ("ir_prob", self.ir_prob)]:
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.mask_band_range
        if not (0.0 < lo <= hi < 1.0):
            raise DataError(f"bad mask_band_range {self.mask_band_range}")
        lo, hi = self.snr_range_db
        if lo > hi:
            raise DataError(f"bad snr_range_db {self.snr_range_db}")
        if self.ir_prob > 0 and not self.ir_set:
            raise DataError("ir_prob > 0 requires a non-empty IR set")


@dataclass
class GenerationDraw:
    """One generation's random decisions, as recorded in the lineage."""

    masked: bool
    mask_center_hz: float
    mask_band_fraction: float
    snr_db: float
    ir_applied: bool
    ir_index: int
    ir_mix: float


# ---------------------------------------------------------------------------
# The three effects.

def frequency_mask(samples: np.ndarray, sample_rate: int,
                   center_hz: float, band_fraction: float) -> np.ndarray:
    """Zero a band of `band_fraction * Nyquist` Hz around center_hz.

    Implemented as an exact notch in the full-chunk spectrum: bins inside
    the band are zeroed, everything else is untouched, so in-band
    attenuation is total and out-of-band energy is preserved.
    """
    if not 0.0 < band_fraction < 1.0:
        raise DataError(f"band_fraction must be in (0, 1), got {band_fraction}")
    nyquist = sample_rate / 2.0
    half_bw = band_fraction * nyquist / 2.0
    lo, hi = center_hz - half_bw, center_hz + half_bw
    if hi <= 0.0 or lo >= nyquist:
        raise DataError(f"mask band [{lo:.1f}, {hi:.1f}] Hz lies outside "
                        f"(0, {nyquist:.0f})")
    n = len(samples)
    spectrum = np.fft.rfft(samples.astype(np.float64))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum[(freqs >= lo) & (freqs <= hi)] = 0.0
    return np.fft.irfft(spectrum, n).astype(np.float32)


def add_noise_snr(samples: np.ndarray, snr_db: float,
                  rng: np.random.Generator,
                  warn=lambda msg: print(msg, file=sys.stderr)) -> np.ndarray:
    """Add white Gaussian noise at exactly the requested chunk SNR.

    The drawn noise is renormalized to its target power, so the measured
    SNR equals snr_db up to float rounding. If the sum would clip, the
    whole output is rescaled (ratio preserved).
    """
    x = samples.astype(np.float64)
    p_signal = float(np.mean(x * x))
    if p_signal == 0.0:
        warn("add_noise_snr: silent chunk, SNR undefined; returning input")
        return samples.astype(np.float32, copy=True)
    noise = rng.standard_normal(len(x))
    p_target = p_signal / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(p_target / np.mean(noise * noise))
    y = x + noise
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y /= peak
    return y.astype(np.float32)


def convolve_ir(samples: np.ndarray, ir: ImpulseResponse, mix: float) -> np.ndarray:
    """Blend the dry chunk with an RMS-matched convolution by the IR."""
    if not 0.0 <= mix <= 1.0:
        raise DataError(f"mix must be in [0, 1], got {mix}")
    if not np.any(ir.samples):
        raise DataError(f"IR {ir.location_tag} is all zero")
    if mix == 0.0:
        return samples.astype(np.float32, copy=True)
    n = len(samples)
    x = samples.astype(np.float64)
    wet = fftconvolve(x, ir.samples.astype(np.float64))[:n]
    rms_dry = np.sqrt(np.mean(x * x))
    rms_wet = np.sqrt(np.mean(wet * wet))
    if rms_wet == 0.0:
        return samples.astype(np.float32, copy=True)
    wet *= rms_dry / rms_wet
    return ((1.0 - mix) * x + mix * wet).astype(np.float32)


# ---------------------------------------------------------------------------
# Per-generation driver.

def _generation_rng(seed: int, chunk_key: str, gen: int) -> np.random.Generator:
    digest = hashlib.sha256(chunk_key.encode()).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([seed, gen] + words))


def chunk_key(species: str, source_path: str, start_s: float) -> str:
    """Location-independent identity of an original chunk.

    Keyed on the species directory plus the source filename (the
    corpus-relative path in the standard layout), never on an absolute
    path, so a relocated corpus or store replays identical draws.
    """
    return f"{species}/{Path(source_path).name}|{start_s:.6f}"


def draw_generation(rng: np.random.Generator, plan: AugmentPlan,
                    sample_rate: int) -> GenerationDraw:
    """Fixed draw protocol: mask gate, band, center; SNR; IR gate, index, mix."""
    nyquist = sample_rate / 2.0
    masked = rng.random() < plan.mask_prob
    center_hz, band_fraction = 0.0, 0.0
    if masked:
        band_fraction = rng.uniform(*plan.mask_band_range)
        half_bw = band_fraction * nyquist / 2.0
        center_hz = rng.uniform(half_bw, nyquist - half_bw)
    snr_db = rng.uniform(*plan.snr_range_db)
    ir_applied = rng.random() < plan.ir_prob
    ir_index, ir_mix = -1, 0.0
    if ir_applied:
        ir_index = int(rng.integers(0, len(plan.ir_set)))
        ir_mix = rng.random()
    return GenerationDraw(masked, center_hz, band_fraction, snr_db,
                          ir_applied, ir_index, ir_mix)


def apply_draw(samples: np.ndarray, sample_rate: int, draw: GenerationDraw,
               plan: AugmentPlan, rng: np.random.Generator) -> np.ndarray:
    # Pipeline order is fixed: mask, then noise, then IR.
    out = samples
    if draw.masked:
        out = frequency_mask(out, sample_rate, draw.mask_center_hz,
                             draw.mask_band_fraction)
    out = add_noise_snr(out, draw.snr_db, rng)
    if draw.ir_applied:
        out = convolve_ir(out, plan.ir_set[draw.ir_index], draw.ir_mix)
    return out


def augment_samples(samples: np.ndarray, sample_rate: int, plan: AugmentPlan,
                    key: str, gen: int) -> tuple[np.ndarray, GenerationDraw]:
    """Produce generation `gen` (1-based) of one chunk, with its draw record."""
    rng = _generation_rng(plan.seed, key, gen)
    draw = draw_generation(rng, plan, sample_rate)
    return apply_draw(samples, sample_rate, draw, plan, rng), draw


def augment_training_set(records: list[ChunkRecord], plan: AugmentPlan,
                         sample_rate: int = PIPELINE_RATE,
                         ) -> tuple[list[ChunkRecord], list[GenerationDraw]]:
    """Expand train chunks to (1 + generations) x their count.

    Returns (originals + augmented records, one draw per augmented record,
    in the same order).
    """
    plan.validate()
    bad = [r for r in records if r.split != "train"]
    if bad:
        raise DataError(f"{len(bad)} non-train chunks passed to augmentation")
    out = list(records)
    draws: list[GenerationDraw] = []
    for rec in records:
        key = chunk_key(rec.species, rec.source_path, rec.start_s)
        for gen in range(1, plan.generations + 1):
            samples, draw = augment_samples(rec.samples, sample_rate, plan, key, gen)
            out.append(ChunkRecord(samples, rec.label_id, rec.species,
                                   rec.split, rec.source_path, rec.start_s,
                                   rec.wrapped, aug_gen=f"gen{gen:02d}"))
            draws.append(draw)
    return out, draws


# ---------------------------------------------------------------------------
# Impulse-response assets.

def builtin_impulse_responses(sample_rate: int = PIPELINE_RATE,
                              ) -> list[ImpulseResponse]:
    """Three synthetic IRs: exponentially decaying noise, distinct decay times."""
    out = []
    for k, (tag, decay_s, length_s) in enumerate([
            ("synthetic_dry", 0.05, 0.25),
            ("synthetic_room", 0.15, 0.75),
            ("synthetic_hall", 0.40, 1.50)]):
        rng = np.random.default_rng(np.random.SeedSequence([91000, k]))
        n = int(length_s * sample_rate)
        t = np.arange(n) / sample_rate
        h = rng.standard_normal(n) * np.exp(-t / decay_s)
        h[0] = 1.0  # keep a unit direct path
        h /= np.max(np.abs(h))
        out.append(ImpulseResponse(h.astype(np.float32), sample_rate, tag))
    return out


def load_impulse_responses(ir_dir: str | Path,
                           sample_rate: int = PIPELINE_RATE,
                           ) -> list[ImpulseResponse]:
    """Load all WAVs in a directory as IRs, resampled to the pipeline rate."""
    ir_dir = Path(ir_dir)
    if not ir_dir.is_dir():
        raise DataError(f"IR directory not found: {ir_dir}")
    out = []
    for path in sorted(ir_dir.glob("*.wav")):
        clip = read_wav(path)
        if clip.sample_rate != sample_rate:
            clip = resample(clip, sample_rate)
        out.append(ImpulseResponse(clip.samples, sample_rate, path.stem))
    if not out:
        raise DataError(f"no WAV impulse responses in {ir_dir}")
    return out


# ---------------------------------------------------------------------------
# Store-level stage: read original train chunks, write augmented WAVs,
# extend the index, and record the lineage.

def _augment_one(store: ChunkStore, row: dict[str, str], plan: AugmentPlan,
                 sample_rate: int, gen: int) -> tuple[dict[str, str], dict[str, str]]:
    samples = store.load_chunk(row, sample_rate)
    key = chunk_key(row["species"], row["source_path"],
                    float(row["start_s"]))
    out, draw = augment_samples(samples, sample_rate, plan, key, gen)
    stem = Path(row["chunk_path"])
    new_rel = stem.with_name(f"{stem.stem}_gen{gen:02d}.wav").as_posix()
    write_wav(store.directory / new_rel, AudioClip(out, sample_rate))
    new_row = dict(row)
    new_row["chunk_path"] = new_rel
    new_row["aug_gen"] = f"gen{gen:02d}"
    lineage = {
        "chunk_path": new_rel,
        "source_chunk_path": row["chunk_path"],
        "gen": str(gen),
        "masked": "1" if draw.masked else "0",
        "mask_center_hz": f"{draw.mask_center_hz:.6f}",
        "mask_band_fraction": f"{draw.mask_band_fraction:.6f}",
        "snr_db": f"{draw.snr_db:.6f}",
        "ir_applied": "1" if draw.ir_applied else "0",
        "ir_id": plan.ir_set[draw.ir_index].location_tag if draw.ir_applied else "",
        "ir_mix": f"{draw.ir_mix:.6f}",
    }
    return new_row, lineage


def augment_store(store: ChunkStore, plan: AugmentPlan,
                  sample_rate: int = PIPELINE_RATE, jobs: int = 1) -> int:
    """Run the augment stage over a chunk store. Returns rows added.

    Idempotent: the index is rebuilt as originals + fresh augmented rows,
    so a rerun with the same plan reproduces the same bytes.
    """
    plan.validate()
    rows = store.chunk_rows()
    originals = [r for r in rows if r["aug_gen"] == "original"]
    train = [r for r in originals if r["split"] == "train"]
    work = [(row, gen) for row in train for gen in range(1, plan.generations + 1)]

    if jobs > 1 and work:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(
                lambda item: _augment_one(store, item[0], plan, sample_rate, item[1]),
                work))
    else:
        results = [_augment_one(store, row, plan, sample_rate, gen)
                   for row, gen in work]

    results.sort(key=lambda pair: pair[0]["chunk_path"])
    new_rows = [pair[0] for pair in results]
    lineage_rows = [pair[1] for pair in results]
    store.write_rows(originals + new_rows)
    lineage_path = store.directory / "augment_lineage.csv"
    with open(lineage_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LINEAGE_COLUMNS)
        w.writeheader()
        for row in lineage_rows:
            w.writerow(row)
    return len(new_rows)
