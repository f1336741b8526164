import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from multiamp.spectral import StftConfig, complex_stft_loss, stft

SMALL = StftConfig(n_fft=64, hop=16)


def dft_frames(x, n_fft, hop):
    """Brute-force oracle: explicit DFT sum per frame with a periodic Hann window."""
    n = np.arange(n_fft)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft)
    frames = 1 + (len(x) - n_fft) // hop
    k = np.arange(n_fft // 2 + 1)[:, None]
    basis = np.exp(-2j * np.pi * k * n[None, :] / n_fft)
    out = np.empty((n_fft // 2 + 1, frames), complex)
    for m in range(frames):
        seg = x[m * hop: m * hop + n_fft] * w
        for kk in range(n_fft // 2 + 1):
            out[kk, m] = sum(seg[i] * basis[kk, i] for i in range(n_fft))
    return out


def test_stft_matches_brute_force_dft(rng):
    x = rng.standard_normal(200)
    got = stft(torch.from_numpy(x), SMALL).numpy()
    np.testing.assert_allclose(got, dft_frames(x, 64, 16), atol=1e-10)


def test_stft_shape_default():
    s = stft(torch.zeros(2, 3, 44100, dtype=torch.float64))
    assert s.shape == (2, 3, 1025, 1 + (44100 - 2048) // 512)
    assert s.is_complex()


def test_stft_bin_concentration():
    # a tone exactly on bin 100 keeps >99% of its energy within +/-1 bin
    n = 2048
    x = np.cos(2 * np.pi * 100 * np.arange(8 * n) / n)
    mag2 = stft(torch.from_numpy(x)).abs().numpy() ** 2
    assert mag2[99:102].sum() / mag2.sum() > 0.99
    assert np.argmax(mag2[:, 0]) == 100


def test_stft_phase_oracle():
    # cos(2 pi k0 n / N + theta) windowed by periodic Hann: bin k0 has phase theta
    n = 2048
    theta = 0.7
    x = np.cos(2 * np.pi * 50 * np.arange(n) / n + theta)
    s = stft(torch.from_numpy(x)).numpy()[:, 0]
    assert np.angle(s[50]) == pytest.approx(theta, abs=1e-9)
    # window energy: sum(w)/2 = N/4 at the bin
    assert abs(s[50]) == pytest.approx(n / 4, rel=1e-9)


def test_stft_parseval_single_frame(rng):
    x = rng.standard_normal(64)
    s = stft(torch.from_numpy(x), SMALL).numpy()[:, 0]
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(64) / 64)
    full = np.concatenate([s, np.conj(s[-2:0:-1])])
    assert np.sum(np.abs(full) ** 2) / 64 == pytest.approx(np.sum((x * w) ** 2), rel=1e-10)


def test_stft_too_short():
    with pytest.raises(ValueError):
        stft(torch.zeros(2047))


@pytest.mark.parametrize("kw", [{"n_fft": 1000}, {"hop": 0}, {"hop": 4096}, {"window": "hamming"},
                                {"reduction": "l2"}])
def test_stft_config_validation(kw):
    with pytest.raises(ValueError):
        StftConfig(**kw)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_loss_properties(seed, scale):
    g = np.random.default_rng(seed)
    y = torch.from_numpy(g.standard_normal(300))
    y_hat = torch.from_numpy(g.standard_normal(300))
    assert complex_stft_loss(y, y, SMALL).item() == 0.0
    loss = complex_stft_loss(y_hat, y, SMALL).item()
    assert loss >= 0.0
    assert complex_stft_loss(y, y_hat, SMALL).item() == pytest.approx(loss, rel=1e-12)
    # homogeneous of degree one
    assert complex_stft_loss(scale * y_hat, scale * y, SMALL).item() == pytest.approx(scale * loss, rel=1e-9)
    # phase-sensitive: a sign flip costs twice the mean magnitude
    mean_mag = stft(y, SMALL).abs().mean().item()
    assert complex_stft_loss(-y, y, SMALL).item() == pytest.approx(2 * mean_mag, rel=1e-9)


def test_loss_matches_oracle(rng):
    y, y_hat = rng.standard_normal(200), rng.standard_normal(200)
    expected = np.mean(np.abs(dft_frames(y_hat, 64, 16) - dft_frames(y, 64, 16)))
    got = complex_stft_loss(torch.from_numpy(y_hat), torch.from_numpy(y), SMALL).item()
    assert got == pytest.approx(expected, rel=1e-10)
    parts = StftConfig(n_fft=64, hop=16, reduction="l1_parts")
    d = dft_frames(y_hat, 64, 16) - dft_frames(y, 64, 16)
    expected = np.mean(np.abs(d.real) + np.abs(d.imag))
    assert complex_stft_loss(torch.from_numpy(y_hat), torch.from_numpy(y), parts).item() == pytest.approx(expected, rel=1e-10)


def test_loss_detects_phase_only_change():
    # identical magnitude spectra, different phase: a magnitude loss would give zero
    t = np.arange(4096)
    y = torch.from_numpy(np.cos(2 * np.pi * 64 * t / 2048))
    y_hat = torch.from_numpy(np.sin(2 * np.pi * 64 * t / 2048))
    assert torch.allclose(stft(y).abs(), stft(y_hat).abs(), atol=1e-6)
    assert complex_stft_loss(y_hat, y).item() > 1.0


def test_loss_gradient_finite_differences(rng):
    y = torch.from_numpy(rng.standard_normal(160))
    x = torch.from_numpy(rng.standard_normal(160)).requires_grad_(True)
    complex_stft_loss(x, y, SMALL).backward()
    eps = 1e-6
    for i in rng.choice(160, 20, replace=False):
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[i] += eps
        xm[i] -= eps
        fd = (complex_stft_loss(xp, y, SMALL) - complex_stft_loss(xm, y, SMALL)).item() / (2 * eps)
        assert x.grad[i].item() == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        complex_stft_loss(torch.zeros(3000), torch.zeros(3001))


def test_loss_accepts_numpy():
    y = np.ones(2048)
    assert complex_stft_loss(y, y).item() == 0.0
