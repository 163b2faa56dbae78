"""Fixed mel-spectrogram frontend: STFT, triangular filterbank, log.

Geometry at the defaults: 220,500-sample chunks, Hann window of 294
zero-padded to a 1024-point FFT, hop 147, 64 triangles on a 66-point
mel grid over [0, 22050] Hz. A centered STFT yields 1501 frames; the
last is dropped to hit exactly 220500/147 = 1500.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy.signal import get_window

from .errors import ConfigError, DataError

_MEL_SCALE = 2595.0
_MEL_BREAK_HZ = 700.0


def hz_to_mel(f_hz):
    """m = 2595 * log10(1 + f/700). Accepts scalars or arrays, f >= 0."""
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f < 0):
        raise DataError("negative frequency has no mel value")
    m = _MEL_SCALE * np.log10(1.0 + f / _MEL_BREAK_HZ)
    return float(m) if np.isscalar(f_hz) else m


def mel_to_hz(m):
    f = _MEL_BREAK_HZ * (np.power(10.0, np.asarray(m, dtype=np.float64) / _MEL_SCALE) - 1.0)
    return float(f) if np.isscalar(m) else f


@dataclass
class MelConfig:
    n_filters: int = 64
    hop: int = 147
    window: int = 294
    fft_size: int = 1024
    f_min: float = 0.0
    f_max: float = 22050.0
    log_floor: float = 1e-6
    sample_rate: int = 44100

    def __post_init__(self):
        if self.n_filters < 2:
            raise ConfigError(f"need >= 2 mel filters, got {self.n_filters}")
        if self.hop * 2 != self.window:
            raise ConfigError(f"hop must be window/2, got {self.hop}/{self.window}")
        if self.fft_size < self.window:
            raise ConfigError("fft_size must cover the analysis window")
        if self.f_max * 2 != self.sample_rate:
            raise ConfigError(f"f_max must be Nyquist ({self.sample_rate / 2}), "
                              f"got {self.f_max}")
        if not 0 <= self.f_min < self.f_max:
            raise ConfigError(f"bad frequency range [{self.f_min}, {self.f_max}]")


def mel_breakpoints(config: MelConfig) -> np.ndarray:
    """n_filters + 2 Hz breakpoints, uniformly spaced in mel."""
    grid = np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max),
                       config.n_filters + 2)
    return mel_to_hz(grid)


def band_centers(config: MelConfig) -> np.ndarray:
    """Design peak frequency of each triangle (breakpoints 1..n)."""
    return mel_breakpoints(config)[1:-1]


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """(n_filters, fft_size//2 + 1) triangle weights, peak value 1.

    Row n spans breakpoints [n, n+2] and peaks at breakpoint n+1. A row
    with no nonzero bin means the FFT grid cannot resolve the triangle.
    """
    points = mel_breakpoints(config)
    freqs = np.arange(config.fft_size // 2 + 1) * (config.sample_rate / config.fft_size)
    bank = np.zeros((config.n_filters, len(freqs)))
    for n in range(config.n_filters):
        left, center, right = points[n], points[n + 1], points[n + 2]
        up = (freqs - left) / (center - left)
        down = (right - freqs) / (right - center)
        bank[n] = np.clip(np.minimum(up, down), 0.0, None)
        if not bank[n].any():
            raise ConfigError(
                f"mel filter {n} ([{left:.1f}, {right:.1f}] Hz) has no FFT bin; "
                f"increase fft_size")
    return bank


def _stft_power(x: np.ndarray, config: MelConfig) -> np.ndarray:
    """Centered power STFT, (n_frames, fft_size//2 + 1), float64."""
    half = config.window // 2
    padded = np.pad(x.astype(np.float64), half, mode="reflect")
    n_frames = 1 + (len(padded) - config.window) // config.hop
    idx = (np.arange(config.window)[None, :]
           + config.hop * np.arange(n_frames)[:, None])
    frames = padded[idx] * get_window("hann", config.window, fftbins=True)
    spectrum = sfft.rfft(frames, n=config.fft_size, axis=1)
    return np.abs(spectrum) ** 2


@dataclass
class FeatureMap:
    """A (bands, frames) time-frequency map with axis metadata."""

    values: np.ndarray
    band_centers_hz: np.ndarray
    frame_hop_s: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.band_centers_hz = np.asarray(self.band_centers_hz, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.band_centers_hz):
            raise DataError(f"feature map shape {self.values.shape} does not "
                            f"match {len(self.band_centers_hz)} bands")
        if not np.isfinite(self.values).all():
            raise DataError("feature map contains non-finite values")

    @property
    def frame_times_s(self) -> np.ndarray:
        return np.arange(self.values.shape[1]) * self.frame_hop_s


class MelFrontend:
    """Chunk (220,500 samples) -> log-mel FeatureMap of shape (64, 1500)."""

    def __init__(self, config: MelConfig | None = None,
                 chunk_len: int = 220500):
        self.config = config or MelConfig()
        self.chunk_len = chunk_len
        self.filterbank = mel_filterbank(self.config)
        self.band_centers_hz = band_centers(self.config)
        self.n_frames = chunk_len // self.config.hop

    def power(self, chunk: np.ndarray) -> np.ndarray:
        """Pre-log mel power, (n_filters, n_frames), float64."""
        chunk = np.asarray(chunk)
        if chunk.ndim != 1 or len(chunk) != self.chunk_len:
            raise DataError(f"expected a {self.chunk_len}-sample chunk, "
                            f"got shape {chunk.shape}")
        power = _stft_power(chunk, self.config)
        mel_power = power @ self.filterbank.T          # (frames, bands)
        mel_power = mel_power.T                        # (bands, frames)
        if mel_power.shape[1] >= self.n_frames:
            mel_power = mel_power[:, :self.n_frames]
        else:
            pad = self.n_frames - mel_power.shape[1]
            mel_power = np.pad(mel_power, ((0, 0), (0, pad)), mode="edge")
        return mel_power

    def __call__(self, chunk: np.ndarray) -> FeatureMap:
        logmel = np.log(self.power(chunk) + self.config.log_floor)
        return FeatureMap(logmel.astype(np.float32), self.band_centers_hz,
                          self.config.hop / self.config.sample_rate)


# ---------------------------------------------------------------------------
# Debug export: JSON header line + raw row-major float32.

def write_featuremap(path: str | Path, fm: FeatureMap) -> None:
    header = {
        "format": "bugsong-featuremap-1",
        "shape": list(fm.values.shape),
        "dtype": "<f4",
        "frame_hop_s": fm.frame_hop_s,
        "band_centers_hz": [round(float(v), 6) for v in fm.band_centers_hz],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(fm.values, dtype="<f4").tobytes())


def read_featuremap(path: str | Path) -> FeatureMap:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != "bugsong-featuremap-1":
            raise DataError(f"not a feature map file: {path}")
        shape = tuple(header["shape"])
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(shape)
    return FeatureMap(data.copy(), np.array(header["band_centers_hz"]),
                      float(header["frame_hop_s"]))
