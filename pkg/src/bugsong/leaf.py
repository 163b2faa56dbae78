"""Trainable Gabor/PCEN frontend.

Pipeline: stride-1 complex Gabor convolution (realized as 128 real
cos/sin kernels) -> squared modulus -> per-channel Gaussian lowpass
(kernel 294, stride 147) -> per-channel energy normalization. A
220,500-sample chunk maps to a (64, 1500) feature map, differentiable
with respect to every frontend parameter.

Memory note: the stride-1 convolution of a 5 s chunk materializes a
(128, 220500) activation per example. When gradients are needed the
conv/energy/pool segment runs per example under torch.utils.checkpoint,
which recomputes the segment in backward instead of storing it; results
are bit-identical to the unchunked computation.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.checkpoint import checkpoint

from .errors import ConfigError, DataError
from .mel import hz_to_mel, mel_to_hz

_TWO_SQRT_2LN2 = 2.0 * math.sqrt(2.0 * math.log(2.0))

ETA_MIN = 0.0
ETA_MAX = math.pi
# sigma floor: frequency-domain FWHM (= 2*sqrt(2 ln 2)/sigma) <= Nyquist (pi).
SIGMA_MIN = _TWO_SQRT_2LN2 / math.pi
POOL_WIDTH_MAX = 0.5
SMOOTH_MIN = 1e-6   # spec'd open interval (0, 1]; smallest representable floor
SMOOTH_MAX = 1.0
ROOT_MIN = 1e-2

PCEN_EPS = 1e-6
_EMA_BLOCK = 64


def design_grid(scale: str, n_filters: int, f_min: float, f_max: float,
                ) -> tuple[np.ndarray, np.ndarray]:
    """Center frequencies and FWHMs (both Hz) for a bank initialization.

    mel: the same (n_filters + 2)-point grid as the mel filterbank;
    center n is breakpoint n+1 and its FWHM is half the triangle base.
    linear: equally spaced centers with uniform bandwidth.
    """
    if scale == "mel":
        grid = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max),
                                     n_filters + 2))
    elif scale == "linear":
        grid = np.linspace(f_min, f_max, n_filters + 2)
    else:
        raise ConfigError(f"unknown init scale {scale!r}; use 'mel' or 'linear'")
    centers = grid[1:-1]
    fwhm = (grid[2:] - grid[:-2]) / 2.0
    return centers, fwhm


def sigma_from_fwhm_hz(fwhm_hz: np.ndarray, sample_rate: int) -> np.ndarray:
    """Time width (samples) whose frequency-response FWHM is fwhm_hz.

    |kernel spectrum| ~ exp(-(w - eta)^2 sigma^2 / 2) in rad/sample, so
    FWHM_w = 2*sqrt(2 ln 2)/sigma and fwhm_hz = FWHM_w * sr / (2 pi).
    """
    return _TWO_SQRT_2LN2 * sample_rate / (2.0 * math.pi * np.asarray(fwhm_hz))


class GaborFilterbank(nn.Module):
    """n_filters complex Gabor kernels as 2*n interleaved cos/sin kernels.

    kernel_n[t] = (1 / (sqrt(2 pi) sigma_n)) * exp(-t^2 / (2 sigma_n^2))
                  * exp(i eta_n t),  t on the centered grid of kernel_len.
    """

    def __init__(self, center_freqs_rad: np.ndarray, sigmas: np.ndarray,
                 kernel_len: int = 294):
        super().__init__()
        center_freqs_rad = np.asarray(center_freqs_rad, dtype=np.float64)
        sigmas = np.asarray(sigmas, dtype=np.float64)
        if center_freqs_rad.shape != sigmas.shape or center_freqs_rad.ndim != 1:
            raise ConfigError("center_freqs and sigmas must be equal-length vectors")
        self.n_filters = len(center_freqs_rad)
        self.kernel_len = kernel_len
        self.sigma_max = float(kernel_len)
        self.center_freqs = nn.Parameter(
            torch.tensor(center_freqs_rad, dtype=torch.float32))
        self.sigmas = nn.Parameter(torch.tensor(
            np.clip(sigmas, SIGMA_MIN, self.sigma_max), dtype=torch.float32))

    def kernels(self) -> torch.Tensor:
        """(2*n_filters, 1, kernel_len); rows 2n / 2n+1 are cos / sin."""
        if bool((self.sigmas <= 0).any()):
            raise DataError("gabor sigma <= 0; constraint projection missing")
        dtype = self.center_freqs.dtype
        t = (torch.arange(self.kernel_len, dtype=dtype,
                          device=self.center_freqs.device)
             - (self.kernel_len - 1) / 2.0)
        sigma = self.sigmas[:, None]
        envelope = torch.exp(-t[None, :] ** 2 / (2.0 * sigma ** 2))
        envelope = envelope / (math.sqrt(2.0 * math.pi) * sigma)
        phase = self.center_freqs[:, None] * t[None, :]
        pair = torch.stack([envelope * torch.cos(phase),
                            envelope * torch.sin(phase)], dim=1)
        return pair.reshape(2 * self.n_filters, 1, self.kernel_len)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # "same" padding for stride 1: split kernel_len - 1, extra on the right.
        pad = self.kernel_len - 1
        x = F.pad(x, (pad // 2, pad - pad // 2))
        return F.conv1d(x, self.kernels())

    def center_freqs_hz(self, sample_rate: int) -> np.ndarray:
        with torch.no_grad():
            eta = self.center_freqs.detach().cpu().numpy().astype(np.float64)
        return eta * sample_rate / (2.0 * math.pi)

    def project_constraints(self) -> None:
        with torch.no_grad():
            self.center_freqs.clamp_(ETA_MIN, ETA_MAX)
            self.sigmas.clamp_(SIGMA_MIN, self.sigma_max)


class GaussianLowpass(nn.Module):
    """Per-channel Gaussian smoothing + decimation with learnable widths.

    kernel_c[t] = exp(-0.5 ((t/(L-1) - 0.5) / (0.5 w_c))^2), normalized to
    unit sum so every width gives a weighted average (DC gain 1). Output
    length is ceil(n / stride) via symmetric "same" padding.
    """

    def __init__(self, n_channels: int, kernel_len: int = 294,
                 stride: int = 147, init_width: float = 0.4):
        super().__init__()
        self.n_channels = n_channels
        self.kernel_len = kernel_len
        self.stride = stride
        self.width_min = 2.0 / kernel_len
        self.widths = nn.Parameter(
            torch.full((n_channels,), float(init_width)))

    def kernel(self) -> torch.Tensor:
        dtype = self.widths.dtype
        t = (torch.arange(self.kernel_len, dtype=dtype,
                          device=self.widths.device) / (self.kernel_len - 1)
             - 0.5)
        z = t[None, :] / (0.5 * self.widths[:, None])
        k = torch.exp(-0.5 * z ** 2)
        k = k / k.sum(dim=1, keepdim=True)
        return k[:, None, :]

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        n = e.shape[-1]
        frames = -(-n // self.stride)  # ceil
        pad = max((frames - 1) * self.stride + self.kernel_len - n, 0)
        e = F.pad(e, (pad // 2, pad - pad // 2))
        return F.conv1d(e, self.kernel(), stride=self.stride,
                        groups=self.n_channels)

    def project_constraints(self) -> None:
        with torch.no_grad():
            self.widths.clamp_(self.width_min, POOL_WIDTH_MAX)


def pcen(energy: torch.Tensor, alpha: torch.Tensor, delta: torch.Tensor,
         root: torch.Tensor, smooth: torch.Tensor,
         eps: float = PCEN_EPS) -> torch.Tensor:
    """Per-channel energy normalization over (batch, channels, frames).

    M[0] = E[0]; M[t] = (1 - s) M[t-1] + s E[t]
    out  = (E / (eps + M)^alpha + delta)^root - delta^root

    The EMA is evaluated exactly by regrouping the recursion into blocks:
    within a block, M[t0+i] = sum_{j<=i} s (1-s)^(i-j) E[t0+j]
    + (1-s)^(i+1) M[t0-1]. This is algebra, not approximation, and stays
    differentiable w.r.t. s without a frame-by-frame Python loop.
    """
    if bool((energy < 0).any()):
        raise DataError("pcen input must be non-negative")
    n_batch, n_ch, n_frames = energy.shape
    block = _EMA_BLOCK
    one_minus = (1.0 - smooth)[:, None]                       # (C, 1)
    powers = torch.cumprod(one_minus.expand(n_ch, block), dim=1)
    powers = torch.cat([torch.ones_like(one_minus), powers], dim=1)  # (C, block+1)
    idx = torch.arange(block, device=energy.device)
    lag = idx[:, None] - idx[None, :]                          # i - j
    tri = (lag >= 0).to(energy.dtype)
    weights = smooth[:, None, None] * powers[:, lag.clamp(min=0)] * tri

    parts = [energy[..., :1]]
    m_last = energy[..., 0]
    t = 1
    while t < n_frames:
        b = min(block, n_frames - t)
        chunk = energy[..., t:t + b]
        m_block = torch.einsum("bcj,cij->bci", chunk, weights[:, :b, :b])
        m_block = m_block + m_last[..., None] * powers[:, 1:b + 1][None]
        parts.append(m_block)
        m_last = m_block[..., -1]
        t += b
    m = torch.cat(parts, dim=-1)

    alpha = alpha[None, :, None]
    delta = delta[None, :, None]
    root = root[None, :, None]
    gain = (eps + m).pow(-alpha)
    return (energy * gain + delta).pow(root) - delta.pow(root)


class Pcen(nn.Module):
    """Learnable per-channel alpha/delta/root/smooth around `pcen`."""

    def __init__(self, n_channels: int, alpha: float = 0.96,
                 delta: float = 2.0, root: float = 2.0, smooth: float = 0.04,
                 eps: float = PCEN_EPS):
        super().__init__()
        self.eps = eps
        self.alpha = nn.Parameter(torch.full((n_channels,), float(alpha)))
        self.delta = nn.Parameter(torch.full((n_channels,), float(delta)))
        self.root = nn.Parameter(torch.full((n_channels,), float(root)))
        self.smooth = nn.Parameter(torch.full((n_channels,), float(smooth)))

    def forward(self, energy: torch.Tensor) -> torch.Tensor:
        return pcen(energy, self.alpha, self.delta, self.root, self.smooth,
                    self.eps)

    def project_constraints(self) -> None:
        with torch.no_grad():
            self.smooth.clamp_(SMOOTH_MIN, SMOOTH_MAX)
            self.root.clamp_(min=ROOT_MIN)


class LeafFrontend(nn.Module):
    """Waveform (batch, 1, n) -> normalized energy map (batch, 64, n/147)."""

    def __init__(self, n_filters: int = 64, kernel_len: int = 294,
                 pool_stride: int = 147, sample_rate: int = 44100,
                 init_scale: str = "mel", f_min: float = 0.0,
                 f_max: float | None = None):
        super().__init__()
        self.sample_rate = sample_rate
        if f_max is None:
            f_max = sample_rate / 2.0
        centers_hz, fwhm_hz = design_grid(init_scale, n_filters, f_min, f_max)
        eta = 2.0 * math.pi * centers_hz / sample_rate
        sigma = sigma_from_fwhm_hz(fwhm_hz, sample_rate)
        self.filterbank = GaborFilterbank(eta, sigma, kernel_len)
        self.pooling = GaussianLowpass(n_filters, kernel_len, pool_stride)
        self.pcen = Pcen(n_filters)
        self.init_centers_hz = centers_hz.copy()

    def _segment(self, x: torch.Tensor) -> torch.Tensor:
        y = self.filterbank(x)
        pairs = y.reshape(y.shape[0], -1, 2, y.shape[-1])
        energy = pairs.square().sum(dim=2)   # cos^2 + sin^2 per filter
        return self.pooling(energy)

    def envelope(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled energy E, before normalization. (batch, filters, frames)."""
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.dim() != 3 or x.shape[1] != 1:
            raise DataError(f"expected (batch, 1, samples) input, got "
                            f"{tuple(x.shape)}")
        needs_grad = torch.is_grad_enabled() and (
            x.requires_grad
            or any(p.requires_grad for p in self.parameters()))
        outs = []
        for i in range(x.shape[0]):
            xi = x[i:i + 1]
            if needs_grad:
                outs.append(checkpoint(self._segment, xi, use_reentrant=False))
            else:
                outs.append(self._segment(xi))
        return torch.cat(outs, dim=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pcen(self.envelope(x))

    def project_constraints(self) -> None:
        """Clamp all parameters into bounds. Idempotent; call after each step."""
        self.filterbank.project_constraints()
        self.pooling.project_constraints()
        self.pcen.project_constraints()

    def band_centers_hz(self) -> np.ndarray:
        return self.filterbank.center_freqs_hz(self.sample_rate)

    def snapshot(self) -> list[dict[str, float]]:
        """Per-filter parameter table for drift analysis."""
        eta_hz = self.band_centers_hz()
        with torch.no_grad():
            cols = {
                "sigma_samples": self.filterbank.sigmas,
                "pool_width": self.pooling.widths,
                "alpha": self.pcen.alpha,
                "delta": self.pcen.delta,
                "root": self.pcen.root,
                "smooth": self.pcen.smooth,
            }
            cols = {k: v.detach().cpu().numpy() for k, v in cols.items()}
        return [{"filter_id": i, "eta_hz": float(eta_hz[i]),
                 **{k: float(v[i]) for k, v in cols.items()}}
                for i in range(len(eta_hz))]


SNAPSHOT_COLUMNS = ["filter_id", "eta_hz", "sigma_samples", "pool_width",
                    "alpha", "delta", "root", "smooth"]


def save_param_snapshot(path: str | Path, frontend: LeafFrontend) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SNAPSHOT_COLUMNS)
        w.writeheader()
        for row in frontend.snapshot():
            w.writerow({k: (row[k] if k == "filter_id" else f"{row[k]:.9g}")
                        for k in SNAPSHOT_COLUMNS})


def load_param_snapshot(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"parameter snapshot not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SNAPSHOT_COLUMNS:
            raise DataError(f"bad snapshot header in {path}")
        rows = list(reader)
    out = {}
    for col in SNAPSHOT_COLUMNS:
        dtype = np.int64 if col == "filter_id" else np.float64
        out[col] = np.array([row[col] for row in rows], dtype=dtype)
    return out
