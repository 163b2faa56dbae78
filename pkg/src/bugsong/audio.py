"""WAV loading, mono mixdown, and sample-rate conversion.

Everything downstream assumes float32 mono in [-1, 1] at a single pipeline
rate (44.1 kHz by default). This module is the only place sample formats
and rates are touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import DataError

PIPELINE_RATE = 44100

# Kaiser beta for >= 90 dB stopband: beta = 0.1102 * (A - 8.7) at A = 90.
_KAISER_BETA = 9.0


@dataclass
class AudioClip:
    """Mono float32 waveform plus its sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise DataError(f"clip must be mono, got shape {self.samples.shape}")
        if self.samples.dtype != np.float32:
            self.samples = self.samples.astype(np.float32)
        if int(self.sample_rate) <= 0:
            raise DataError(f"bad sample rate {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        if len(self.samples) == 0:
            return 0.0
        return float(np.sqrt(np.mean(np.square(self.samples, dtype=np.float64))))


def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    """Normalize integer PCM to [-1, 1]; float input passes through."""
    if data.dtype == np.uint8:
        # 8-bit WAV is unsigned with midpoint 128.
        return (data.astype(np.float32) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        # scipy returns 24-bit PCM left-justified in int32, so one scale works
        # for both 24- and 32-bit files.
        return (data / 2147483648.0).astype(np.float32)
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    raise DataError(f"unsupported WAV sample format {data.dtype}")


def read_wav(path: str | Path) -> AudioClip:
    """Read a WAV file as mono float32, averaging channels if needed."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise DataError(f"missing WAV file: {path}")
    except ValueError as exc:
        raise DataError(f"unreadable WAV file {path}: {exc}")
    if data.size == 0:
        raise DataError(f"empty WAV file: {path}")
    x = _pcm_to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    elif x.ndim != 1:
        raise DataError(f"unsupported WAV layout {data.shape} in {path}")
    return AudioClip(np.ascontiguousarray(x, dtype=np.float32), rate)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """Write a clip as float32 WAV (lossless for the pipeline's data)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))


def resample(clip: AudioClip, target_hz: int) -> AudioClip:
    """Polyphase resample with a windowed-sinc (Kaiser) anti-aliasing filter.

    The Kaiser beta targets >= 90 dB stopband attenuation, so content above
    the new Nyquist is suppressed rather than folded. Output length is
    ceil(n * target / source).
    """
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise DataError(f"bad target rate {target_hz}")
    if target_hz == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(target_hz, clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    y = resample_poly(clip.samples.astype(np.float64), up, down,
                      window=("kaiser", _KAISER_BETA))
    expected = math.ceil(len(clip.samples) * target_hz / clip.sample_rate)
    if len(y) != expected:
        # resample_poly already returns ceil(n*up/down); keep the contract
        # explicit in case of scipy behavior drift.
        y = y[:expected] if len(y) > expected else np.pad(y, (0, expected - len(y)))
    return AudioClip(y.astype(np.float32), target_hz)


def load_pipeline_audio(path: str | Path, rate: int = PIPELINE_RATE) -> AudioClip:
    """Read a WAV and bring it to the pipeline rate."""
    clip = read_wav(path)
    if clip.sample_rate != rate:
        clip = resample(clip, rate)
    return clip
