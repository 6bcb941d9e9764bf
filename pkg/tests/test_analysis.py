import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nvtomo.analysis import (
    FWHM_CONSTANT,
    SnrCurve,
    Spectrogram,
    band_snr,
    coherence_for_resolution,
    fit_gaussian_decay,
    frequency_resolution,
    fwhm_constant,
    localize,
    peak_fwhm,
    spatial_resolution,
    spectrogram,
)
from nvtomo.fieldmap import DEFAULT_FOCUS, QuantizationAxis, build_u_structure, channel_frequencies


@pytest.fixture(scope="module")
def u():
    asm = build_u_structure()
    return asm, QuantizationAxis(), {c: 0.08 for c in asm.labels}


def test_spectrogram_layout():
    dt = 1e-9
    t = np.arange(1000) * dt
    x = np.cos(2 * np.pi * 125e6 * t)
    sp = spectrogram(x, dt, 64, 16)
    assert sp.power.shape == ((1000 - 64) // 16 + 1, 33)
    assert sp.freqs[int(np.argmax(sp.power[0]))] == pytest.approx(125e6)
    assert sp.times[0] == pytest.approx(31.5e-9) and np.allclose(np.diff(sp.times), 16e-9)


def test_spectrogram_frame_energy():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(256) + 1j * rng.standard_normal(256)
    sp = spectrogram(x, 1.0, 32, 32)
    frames = x.reshape(8, 32)
    frames = frames - frames.mean(axis=1, keepdims=True)
    assert np.allclose(sp.power.sum(axis=1), np.sum(np.abs(frames) ** 2, axis=1))
    # the Hann taper keeps white-noise power unchanged on average
    long = rng.standard_normal(2**16)
    rect = spectrogram(long, 1.0, 64, 64).power.mean()
    hann = spectrogram(long, 1.0, 64, 64, window="hann").power.mean()
    assert hann == pytest.approx(rect, rel=0.02)


def test_spectrogram_errors():
    with pytest.raises(ValueError):
        spectrogram(np.zeros(10), 1.0, 20, 1)
    with pytest.raises(ValueError):
        spectrogram(np.zeros(10), 1.0, 4, 1, window="kaiser")


def test_band_snr_rescales_background():
    # flat background of 2 per bin plus 10 extra in one signal bin
    freqs = np.arange(10.0)
    power = np.full((3, 10), 2.0)
    power[:, 1] += 10.0
    sp = Spectrogram(power, 10, 10, 1.0, freqs, np.arange(3.0))
    curve = band_snr(sp, (0.5, 2.5), (5, 9))
    # two signal bins vs five noise bins: background 2*2, band power 14
    assert np.allclose(curve.snr, (14 - 4) / 4)


def test_band_snr_errors():
    sp = Spectrogram(np.zeros((2, 10)), 10, 10, 1.0, np.arange(10.0), np.arange(2.0))
    with pytest.raises(ValueError):
        band_snr(sp, (1, 5), (4, 8))
    with pytest.raises(ValueError):
        band_snr(sp, (1, 2), (5, 8))


def test_fit_exact_recovery():
    t = np.linspace(0, 30e-6, 60)
    y = 42.0 * np.exp(-(t**2) / (2 * (8.64e-6) ** 2))
    fit = fit_gaussian_decay((t, y))
    assert fit.T2 == pytest.approx(8.64e-6, rel=1e-9)
    assert fit.amplitude == pytest.approx(42.0, rel=1e-9)
    assert fit.residual_norm < 1e-9 and fit.T2_err < 1e-12
    assert set(fit.to_dict()) == {"T2_s", "T2_err_s", "amplitude", "residual_norm"}


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 1e3), st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_fit_scale_equivariance(t_scale, y_scale, seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 3, 50)
    y = np.exp(-(t**2) / 2) + 0.02 * rng.standard_normal(50)
    base = fit_gaussian_decay((t, y))
    scaled = fit_gaussian_decay((t * t_scale, y * y_scale))
    assert scaled.T2 == pytest.approx(base.T2 * t_scale, rel=1e-6)
    assert scaled.amplitude == pytest.approx(base.amplitude * y_scale, rel=1e-6)
    assert scaled.T2_err == pytest.approx(base.T2_err * t_scale, rel=1e-4)


def test_fit_error_bars_match_scatter():
    rng = np.random.default_rng(1)
    t = np.linspace(0, 4, 40)
    fits = [fit_gaussian_decay((t, np.exp(-(t**2) / 2) + 0.05 * rng.standard_normal(40))) for _ in range(300)]
    scatter = np.std([f.T2 for f in fits])
    reported = np.mean([f.T2_err for f in fits])
    assert reported == pytest.approx(scatter, rel=0.2)


def test_fit_needs_data():
    with pytest.raises(ValueError):
        fit_gaussian_decay((np.arange(3.0), np.ones(3)))
    with pytest.raises(ValueError):
        fit_gaussian_decay(SnrCurve(np.arange(6.0), -np.ones(6), (0, 1), (2, 3)))


def test_peak_fwhm_gaussian_line():
    f = np.arange(400.0)
    sigma = 12.0
    p = np.exp(-0.5 * ((f - 200) / sigma) ** 2)
    assert peak_fwhm(p, 0.5) == pytest.approx(0.5 * 2 * math.sqrt(2 * math.log(2)) * sigma, rel=1e-3)
    with pytest.raises(ValueError):
        peak_fwhm(np.array([0.0, 0.0, 1.0, 0.0, 0.0]), 1.0)


def test_fwhm_constant_small_run():
    res = fwhm_constant([3e-6, 10e-6])
    assert res.k == pytest.approx(FWHM_CONSTANT, rel=0.01)


def test_resolution_inverse_pair():
    assert frequency_resolution(1e-6) == pytest.approx(FWHM_CONSTANT * 1e6)
    for T2, s in [(1e-6, 1.0), (8.64e-6, 6.34), (2e-5, 13.0)]:
        assert coherence_for_resolution(spatial_resolution(T2, s), s) == pytest.approx(T2)
    with pytest.raises(ValueError):
        spatial_resolution(1e-6, 0.0)
    with pytest.raises(ValueError):
        frequency_resolution(-1.0)


def test_localize_three_channels(u):
    asm, q, cur = u
    truth = DEFAULT_FOCUS + np.array([0.3e-6, -0.2e-6, 0.1e-6])
    f = channel_frequencies(asm, cur, q, truth) / (2 * np.pi)
    loc = localize(dict(zip(asm.labels, f)), asm, cur, q, DEFAULT_FOCUS)
    assert np.linalg.norm(loc.position - truth) < 1e-10
    assert loc.converged and loc.consistent and not loc.degenerate
    assert loc.to_dict()["residual_hz_rms"] < 1.0


def test_localize_flags_degenerate_and_inconsistent(u):
    asm, q, cur = u
    f = channel_frequencies(asm, cur, q, DEFAULT_FOCUS) / (2 * np.pi)
    two = localize({"I1": f[0], "I2": f[1]}, asm, cur, q, DEFAULT_FOCUS + 0.2e-6)
    assert two.degenerate and two.residual < 1.0
    # frequencies no single point can produce
    bad = localize({"I1": 1e9, "I2": -1e9, "I3": 1e9}, asm, cur, q, DEFAULT_FOCUS, max_iter=50)
    assert not bad.consistent
