import math

import numpy as np
import pytest
import torch

from bugsong.errors import ConfigError, DataError
from bugsong.leaf import (GaborFilterbank, GaussianLowpass, LeafFrontend,
                          Pcen, SNAPSHOT_COLUMNS, design_grid,
                          load_param_snapshot, pcen, save_param_snapshot,
                          sigma_from_fwhm_hz)
from bugsong.mel import MelConfig, band_centers

SR = 44100


# ---------------------------------------------------------------------------
# design grid and kernel shape oracles

def test_design_grid_mel_matches_mel_filterbank_centers():
    centers, fwhm = design_grid("mel", 64, 0.0, SR / 2)
    np.testing.assert_allclose(centers, band_centers(MelConfig()), rtol=1e-12)
    assert np.all(fwhm > 0)


def test_design_grid_linear():
    centers, _ = design_grid("linear", 8, 0.0, 1000.0)
    np.testing.assert_allclose(np.diff(centers), np.diff(centers)[0])


def test_design_grid_rejects_unknown_scale():
    with pytest.raises(ConfigError):
        design_grid("bark", 64, 0.0, SR / 2)


def test_gabor_kernel_peak_frequency():
    eta_hz = np.array([500.0, 2000.0, 8000.0])
    eta = 2 * np.pi * eta_hz / SR
    sigmas = np.array([40.0, 25.0, 12.0])
    bank = GaborFilterbank(eta, sigmas, kernel_len=294)
    kernels = bank.kernels().detach().numpy()
    n_fft = 1 << 16
    for i, f0 in enumerate(eta_hz):
        cos_k = kernels[2 * i, 0]
        spec = np.abs(np.fft.rfft(cos_k, n=n_fft))
        peak_hz = spec.argmax() * SR / n_fft
        # Gaussian spectral width in Hz limits localization
        width_hz = SR / (2 * np.pi * sigmas[i])
        assert abs(peak_hz - f0) < max(width_hz / 4, 2 * SR / n_fft)


def test_gabor_envelope_is_normalized_gaussian():
    sigma = 20.0
    bank = GaborFilterbank(np.array([2 * np.pi * 0.1]), np.array([sigma]), 294)
    kernels = bank.kernels().detach().numpy()
    env = np.sqrt(kernels[0, 0] ** 2 + kernels[1, 0] ** 2)
    t = np.arange(294) - 146.5
    expect = np.exp(-t ** 2 / (2 * sigma ** 2)) / (np.sqrt(2 * np.pi) * sigma)
    np.testing.assert_allclose(env, expect, rtol=1e-4, atol=1e-9)
    # normalized Gaussian sums to ~1 when it fits inside the window
    assert env.sum() == pytest.approx(1.0, abs=1e-6)


def test_gabor_conv_preserves_length():
    bank = GaborFilterbank(np.array([0.5, 1.5]), np.array([10.0, 20.0]), 294)
    for n in (147, 294, 1000, 2048):
        y = bank(torch.zeros(1, 1, n))
        assert y.shape == (1, 4, n)


def test_gabor_sigma_clamped_at_init():
    bank = GaborFilterbank(np.array([1.0]), np.array([1e-8]), 294)
    sigma = float(bank.sigmas.detach())
    assert sigma >= 2 * math.sqrt(2 * math.log(2)) / math.pi - 1e-6


def test_sigma_from_fwhm_measured_on_spectrum():
    # the frequency response FWHM should match the requested bandwidth
    fwhm_hz = 600.0
    sigma = float(sigma_from_fwhm_hz(np.array([fwhm_hz]), SR)[0])
    t = np.arange(-2000, 2001)
    env = np.exp(-t ** 2 / (2 * sigma ** 2)) / (np.sqrt(2 * np.pi) * sigma)
    kernel = env * np.cos(2 * np.pi * 5000 / SR * t)
    spec = np.abs(np.fft.rfft(kernel, n=1 << 18))
    freqs = np.arange(len(spec)) * SR / (1 << 18)
    half = spec.max() / 2
    above = freqs[spec >= half]
    measured = above.max() - above.min()
    assert measured == pytest.approx(fwhm_hz, rel=0.01)


# ---------------------------------------------------------------------------
# pooling

def test_pool_kernel_unit_sum():
    pool = GaussianLowpass(4, 294, 147)
    kernel = pool.kernel().detach()
    assert kernel.shape == (4, 1, 294)
    np.testing.assert_allclose(kernel.sum(dim=2).numpy(), 1.0, rtol=1e-6)


def test_pool_frame_count_is_ceil():
    pool = GaussianLowpass(2, 294, 147)
    for n in (147, 148, 2047, 220500):
        y = pool(torch.rand(1, 2, n))
        assert y.shape[-1] == -(-n // 147)


def test_pool_constant_signal_passes_through():
    pool = GaussianLowpass(1, 294, 147)
    with torch.no_grad():
        y = pool(torch.full((1, 1, 294 * 10), 3.0))
    # interior frames see the full unit-sum kernel
    np.testing.assert_allclose(y[0, 0, 1:-2].numpy(), 3.0, rtol=1e-5)


def test_pool_width_projection():
    pool = GaussianLowpass(3, 294, 147)
    with torch.no_grad():
        pool.widths.copy_(torch.tensor([-1.0, 0.2, 9.0]))
    pool.project_constraints()
    w = pool.widths.detach().numpy()
    assert w[0] == pytest.approx(2 / 294)
    assert w[1] == pytest.approx(0.2)
    assert w[2] == pytest.approx(0.5)
    before = w.copy()
    pool.project_constraints()
    np.testing.assert_array_equal(pool.widths.detach().numpy(), before)


# ---------------------------------------------------------------------------
# pcen

def _params(c, **kw):
    p = {"alpha": torch.full((c,), 0.96, dtype=torch.float64),
         "delta": torch.full((c,), 2.0, dtype=torch.float64),
         "root": torch.full((c,), 2.0, dtype=torch.float64),
         "smooth": torch.full((c,), 0.04, dtype=torch.float64)}
    for k, v in kw.items():
        p[k] = torch.full((c,), float(v), dtype=torch.float64)
    return p


def _sequential_pcen(E, alpha, delta, root, smooth, eps=1e-6):
    M = torch.empty_like(E)
    M[..., 0] = E[..., 0]
    for t in range(1, E.shape[-1]):
        M[..., t] = (1 - smooth) * M[..., t - 1] + smooth * E[..., t]
    a, d, r = (v[None, :, None] for v in (alpha, delta, root))
    return (E / (eps + M) ** a + d) ** r - d ** r


def test_pcen_identity_when_alpha_zero_root_one():
    E = torch.rand(1, 3, 50, dtype=torch.float64)
    p = _params(3, alpha=0.0, root=1.0)
    out = pcen(E, **p)
    np.testing.assert_allclose(out.numpy(), E.numpy(), rtol=1e-12)


def test_pcen_instant_ema_full_normalization():
    # s=1 makes M=E; with alpha=1, delta=0, root=1, eps=0 the output is 1
    E = torch.rand(2, 2, 70, dtype=torch.float64) + 0.5
    p = _params(2, alpha=1.0, delta=0.0, root=1.0, smooth=1.0)
    out = pcen(E, eps=0.0, **p)
    np.testing.assert_allclose(out.numpy(), 1.0, rtol=1e-12)


def test_pcen_constant_energy_closed_form():
    E = torch.full((1, 1, 40), 4.0, dtype=torch.float64)
    p = _params(1, alpha=0.5, delta=0.0, root=1.0)
    out = pcen(E, eps=0.0, **p)
    np.testing.assert_allclose(out.numpy(), 2.0, rtol=1e-12)


@pytest.mark.parametrize("frames", [1, 2, 63, 64, 65, 128, 129, 300])
def test_pcen_matches_sequential_oracle(frames, rng):
    torch.manual_seed(3)
    E = torch.rand(2, 3, frames, dtype=torch.float64) + 0.01
    alpha = torch.tensor([0.9, 0.5, 0.0], dtype=torch.float64)
    delta = torch.tensor([2.0, 1.0, 0.3], dtype=torch.float64)
    root = torch.tensor([2.0, 0.5, 1.0], dtype=torch.float64)
    smooth = torch.tensor([0.04, 0.37, 1.0], dtype=torch.float64)
    got = pcen(E, alpha, delta, root, smooth)
    want = _sequential_pcen(E, alpha, delta, root, smooth)
    np.testing.assert_allclose(got.numpy(), want.numpy(), rtol=1e-10)


def test_pcen_rejects_negative_energy():
    E = -torch.ones(1, 1, 10, dtype=torch.float64)
    p = _params(1)
    with pytest.raises(DataError):
        pcen(E, **p)


def test_pcen_gradcheck_float64():
    E = (torch.rand(1, 2, 130, dtype=torch.float64) + 0.05).requires_grad_()
    alpha = torch.tensor([0.7, 0.2], dtype=torch.float64, requires_grad=True)
    delta = torch.tensor([1.5, 0.8], dtype=torch.float64, requires_grad=True)
    root = torch.tensor([2.0, 0.7], dtype=torch.float64, requires_grad=True)
    smooth = torch.tensor([0.1, 0.9], dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda *a: pcen(*a), (E, alpha, delta, root, smooth),
        eps=1e-6, atol=1e-8)


def test_pcen_module_projection():
    mod = Pcen(4)
    with torch.no_grad():
        mod.smooth.copy_(torch.tensor([0.0, -1.0, 0.5, 2.0]))
        mod.root.copy_(torch.tensor([0.0, 1.0, -3.0, 2.0]))
    mod.project_constraints()
    s = mod.smooth.detach().numpy()
    r = mod.root.detach().numpy()
    assert s.min() >= 1e-6 and s.max() <= 1.0
    assert r.min() >= 1e-2


# ---------------------------------------------------------------------------
# full frontend

def test_frontend_output_shape():
    fe = LeafFrontend()
    with torch.no_grad():
        y = fe(torch.randn(2, 1, 220500) * 0.1)
    assert y.shape == (2, 64, 1500)
    assert torch.isfinite(y).all()


def test_frontend_accepts_2d_input():
    fe = LeafFrontend()
    with torch.no_grad():
        y = fe(torch.randn(1, 14700) * 0.1)
    assert y.shape == (1, 64, 100)


def test_frontend_rejects_multichannel():
    fe = LeafFrontend()
    with pytest.raises(DataError):
        fe(torch.zeros(1, 2, 1000))


def test_frontend_init_centers_span_mel_grid():
    fe = LeafFrontend()
    np.testing.assert_allclose(fe.band_centers_hz(), fe.init_centers_hz,
                               rtol=1e-6)
    assert fe.init_centers_hz[0] < 100.0
    assert fe.init_centers_hz[-1] > 20000.0


def test_frontend_checkpointed_grad_matches_plain_forward():
    torch.manual_seed(0)
    fe = LeafFrontend(n_filters=4, kernel_len=64, pool_stride=32)
    x = torch.randn(3, 1, 640) * 0.2
    with torch.no_grad():
        plain = fe.envelope(x)
    grad_mode = fe.envelope(x.clone().requires_grad_())
    np.testing.assert_allclose(grad_mode.detach().numpy(), plain.numpy(),
                               rtol=1e-5, atol=1e-8)
    grad_mode.sum().backward()
    for name, p in fe.named_parameters():
        if p.grad is not None:
            assert torch.isfinite(p.grad).all(), name


def test_frontend_gradcheck_float64():
    torch.manual_seed(1)
    fe = LeafFrontend(n_filters=3, kernel_len=32, pool_stride=16).double()
    x = (torch.randn(1, 1, 256, dtype=torch.float64) * 0.3).requires_grad_()
    params = [p for p in fe.parameters()]
    assert torch.autograd.gradcheck(
        lambda inp: fe(inp).sum(), (x,), eps=1e-6, atol=1e-6)
    loss = fe(x).square().sum()
    grads = torch.autograd.grad(loss, params)
    assert all(torch.isfinite(g).all() for g in grads)


def test_frontend_projection_bounds():
    fe = LeafFrontend()
    with torch.no_grad():
        fe.filterbank.center_freqs[0] = -2.0
        fe.filterbank.center_freqs[1] = 9.0
        fe.filterbank.sigmas[0] = -5.0
        fe.pcen.smooth[0] = 7.0
    fe.project_constraints()
    eta = fe.filterbank.center_freqs.detach()
    assert eta.min() >= 0.0 and eta.max() <= math.pi
    assert fe.filterbank.sigmas.detach().min() > 0
    assert fe.pcen.smooth.detach().max() <= 1.0


def test_snapshot_round_trip(tmp_path):
    fe = LeafFrontend(n_filters=8, kernel_len=64, pool_stride=32)
    save_param_snapshot(tmp_path / "snap.csv", fe)
    back = load_param_snapshot(tmp_path / "snap.csv")
    assert list(back) == SNAPSHOT_COLUMNS
    np.testing.assert_array_equal(back["filter_id"], np.arange(8))
    np.testing.assert_allclose(back["eta_hz"], fe.band_centers_hz(), rtol=1e-6)
    np.testing.assert_allclose(back["alpha"], 0.96, rtol=1e-6)
