"""Synthetic insect-like corpus: gated carriers with per-class signatures.

Each class is a pulse train gating a tonal or noise-band carrier. Classes
differ in carrier frequency, bandwidth, pulse rate, duty cycle, and decay,
except one designed pair that shares everything but pulse rate, so the
corpus also exercises temporal (not just spectral) discrimination.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .audio import PIPELINE_RATE, AudioClip, write_wav
from .dataset import DatasetManifest, ManifestEntry, _source_id
from .errors import DataError


@dataclass
class SpeciesSpec:
    name: str
    carrier_hz: float
    pulse_rate_hz: float
    duty_cycle: float            # fraction of the pulse period that sounds
    noise_bandwidth_hz: float    # 0 -> pure tone carrier
    envelope_decay: float        # 0 -> flat pulses; else exp decay over the pulse
    amp_jitter: float = 0.1
    rate_jitter: float = 0.05

    def validate(self, sample_rate: int) -> None:
        nyquist = sample_rate / 2.0
        if self.carrier_hz + self.noise_bandwidth_hz / 2.0 >= nyquist:
            raise DataError(f"{self.name}: carrier band exceeds Nyquist")
        if self.carrier_hz <= 0:
            raise DataError(f"{self.name}: carrier must be positive")
        if not 0.0 < self.duty_cycle <= 1.0:
            raise DataError(f"{self.name}: duty_cycle must be in (0, 1]")
        if not 0.0 < self.pulse_rate_hz < sample_rate / 2.0:
            raise DataError(f"{self.name}: bad pulse rate {self.pulse_rate_hz}")
        for field_name, v in [("noise_bandwidth_hz", self.noise_bandwidth_hz),
                              ("envelope_decay", self.envelope_decay),
                              ("amp_jitter", self.amp_jitter),
                              ("rate_jitter", self.rate_jitter)]:
            if v < 0:
                raise DataError(f"{self.name}: {field_name} must be >= 0")


def _carrier(spec: SpeciesSpec, n: int, sample_rate: int,
             rng: np.random.Generator) -> np.ndarray:
    if spec.noise_bandwidth_hz > 0:
        # Band-limited noise: exact rectangular band in the spectrum.
        noise = rng.standard_normal(n)
        spectrum = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        lo = spec.carrier_hz - spec.noise_bandwidth_hz / 2.0
        hi = spec.carrier_hz + spec.noise_bandwidth_hz / 2.0
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        return np.fft.irfft(spectrum, n)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    t = np.arange(n) / sample_rate
    return np.sin(2.0 * np.pi * spec.carrier_hz * t + phase)


def _pulse_gate(spec: SpeciesSpec, n: int, sample_rate: int,
                rng: np.random.Generator) -> np.ndarray:
    if spec.duty_cycle >= 1.0:
        return np.ones(n)
    gate = np.zeros(n)
    period = sample_rate / spec.pulse_rate_hz
    pulse_len = max(1, int(round(period * spec.duty_cycle)))
    shape = np.ones(pulse_len)
    if spec.envelope_decay > 0:
        tau = spec.envelope_decay * pulse_len
        shape = np.exp(-np.arange(pulse_len) / tau)
    k = 0
    while True:
        onset = k * period
        if spec.rate_jitter > 0:
            onset += period * spec.rate_jitter * rng.uniform(-1.0, 1.0)
        start = int(round(onset))
        if start >= n:
            break
        amp = max(0.0, 1.0 + spec.amp_jitter * rng.uniform(-1.0, 1.0))
        end = min(n, start + pulse_len)
        if start >= 0:
            gate[start:end] = np.maximum(gate[start:end],
                                         amp * shape[:end - start])
        k += 1
    return gate


def synth_clip(spec: SpeciesSpec, duration_s: float, seed: int,
               sample_rate: int = PIPELINE_RATE) -> AudioClip:
    """Deterministic clip for (spec, seed): carrier x pulse gate, peak 0.9."""
    spec.validate(sample_rate)
    if duration_s <= 0:
        raise DataError(f"duration must be positive, got {duration_s}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
    n = int(round(duration_s * sample_rate))
    x = _carrier(spec, n, sample_rate, rng) * _pulse_gate(spec, n, sample_rate, rng)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (0.9 / peak)
    return AudioClip(x.astype(np.float32), sample_rate)


def default_species_specs(n_classes: int = 8,
                          sample_rate: int = PIPELINE_RATE) -> list[SpeciesSpec]:
    """Class gallery spread over carrier and pulse-rate space.

    Classes 0 and 1 share a carrier and differ only in pulse rate.
    Odd-numbered classes use noise-band carriers, even-numbered pure tones.
    """
    if n_classes < 2:
        raise DataError(f"need >= 2 classes, got {n_classes}")
    top = 0.68 * sample_rate / 2.0
    carriers = np.geomspace(1800.0, top, n_classes)
    pulse_rates = [6.0, 11.0, 17.0, 26.0, 38.0]
    duties = [0.40, 0.60, 0.30, 0.75]
    decays = [0.0, 0.6, 1.2]
    specs = []
    for i in range(n_classes):
        bandwidth = 0.0 if i % 2 == 0 else 0.18 * carriers[i]
        specs.append(SpeciesSpec(
            name=f"species{i:02d}",
            carrier_hz=float(carriers[i]),
            pulse_rate_hz=pulse_rates[i % len(pulse_rates)],
            duty_cycle=duties[i % len(duties)],
            noise_bandwidth_hz=float(bandwidth),
            envelope_decay=decays[i % len(decays)],
        ))
    # The temporal-discrimination pair: same spectrum, different rhythm.
    specs[1] = replace(specs[0], name=specs[1].name,
                       pulse_rate_hz=4.0 * specs[0].pulse_rate_hz)
    for spec in specs:
        spec.validate(sample_rate)
    return specs


def synth_dataset(root: str | Path, n_classes: int = 8,
                  files_per_class: int = 4,
                  duration_range: tuple[float, float] = (6.0, 9.0),
                  seed: int = 0,
                  sample_rate: int = PIPELINE_RATE) -> DatasetManifest:
    """Write a corpus under root (one directory per class) plus a manifest.

    The default size is deliberately small: it is tuned so the full
    two-frontend pipeline finishes within the end-to-end CPU budget.
    """
    root = Path(root)
    lo, hi = duration_range
    if not 0 < lo <= hi:
        raise DataError(f"bad duration range {duration_range}")
    specs = default_species_specs(n_classes, sample_rate)
    entries = []
    for i, spec in enumerate(specs):
        for k in range(files_per_class):
            ss = np.random.SeedSequence([int(seed), i, k])
            file_rng = np.random.default_rng(ss)
            duration = float(file_rng.uniform(lo, hi))
            clip_seed = int(ss.generate_state(1, np.uint32)[0])
            clip = synth_clip(spec, duration, clip_seed, sample_rate)
            path = root / spec.name / f"{spec.name}_{k:03d}.wav"
            write_wav(path, clip)
            entries.append(ManifestEntry(
                path=str(path), species=spec.name,
                duration_s=clip.duration_s,
                source_id=_source_id(root, path)))
    manifest = DatasetManifest(entries)
    manifest.save(root / "manifest.csv")
    return manifest
