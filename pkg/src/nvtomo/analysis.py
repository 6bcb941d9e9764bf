"""Resolution and coherence analysis: spectrograms, band SNR, Gaussian decay fits,
the FWHM constant, spatial resolution, and localization from frequencies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from . import io as _io
from .fieldmap import (
    QuantizationAxis,
    WireAssembly,
    channel_frequencies,
    frequency_jacobian,
)

FWHM_CONSTANT = math.sqrt(2) / math.pi


@dataclass
class Spectrogram:
    power: np.ndarray  # (windows, bins)
    window_length: int
    hop: int
    dt: float
    freqs: np.ndarray
    times: np.ndarray  # window centres, s

    def to_grid_axes(self):
        df = float(self.freqs[1] - self.freqs[0]) if self.freqs.size > 1 else 0.0
        return [
            {"name": "time", "step": self.hop * self.dt, "offset": float(self.times[0])},
            {"name": "frequency", "step": df, "offset": float(self.freqs[0])},
        ]

    def save(self, path) -> list:
        base = _io.basename(path)
        raw = base.with_name(base.name + _io.RAW_SUFFIX)
        head = base.with_name(base.name + _io.HEADER_SUFFIX)
        _io.write_raw(raw, self.power)
        _io.write_json(
            head,
            {
                "kind": "spectrogram",
                "rank": 2,
                "shape": list(self.power.shape),
                "axes": self.to_grid_axes(),
                "window_length": self.window_length,
                "hop": self.hop,
                "dt_s": self.dt,
            },
        )
        return [raw, head]


@dataclass
class SnrCurve:
    times: np.ndarray
    snr: np.ndarray
    signal_band: tuple[float, float]
    noise_band: tuple[float, float]

    def save_csv(self, path) -> None:
        _io.write_csv(path, ["time_s", "snr"], zip(self.times, self.snr))


@dataclass
class DecayFit:
    T2: float
    T2_err: float
    amplitude: float
    residual_norm: float
    amplitude_err: float = 0.0

    def to_dict(self) -> dict:
        return {
            "T2_s": self.T2,
            "T2_err_s": self.T2_err,
            "amplitude": self.amplitude,
            "residual_norm": self.residual_norm,
        }


def spectrogram(
    signal, dt: float, window_length: int, hop: int, t0: float = 0.0, window: str = "rect"
) -> Spectrogram:
    """Sliding-window power spectra of a 1D signal.

    Each frame is mean-subtracted, tapered (``"rect"`` leaves it untouched,
    ``"hann"`` applies a Hann taper normalized to unit mean square) and passed
    through a unitary DFT.  Real input keeps the non-negative frequencies;
    complex input keeps the full shifted axis.
    """
    x = np.asarray(signal)
    n = x.size
    if window_length > n:
        raise ValueError(f"window of {window_length} samples exceeds signal length {n}")
    if window_length < 2 or hop < 1:
        raise ValueError("need window_length >= 2 and hop >= 1")
    count = (n - window_length) // hop + 1
    starts = np.arange(count) * hop
    frames = np.stack([x[s : s + window_length] for s in starts])
    frames = frames - frames.mean(axis=1, keepdims=True)
    if window == "hann":
        taper = np.hanning(window_length)
        frames = frames * (taper / np.sqrt(np.mean(taper**2)))
    elif window != "rect":
        raise ValueError(f"unknown window {window!r}")
    if np.iscomplexobj(x):
        F = np.fft.fftshift(np.fft.fft(frames, axis=1, norm="ortho"), axes=1)
        freqs = np.fft.fftshift(np.fft.fftfreq(window_length, dt))
    else:
        F = np.fft.rfft(frames, axis=1, norm="ortho")
        freqs = np.fft.rfftfreq(window_length, dt)
    times = t0 + (starts + (window_length - 1) / 2) * dt
    return Spectrogram(np.abs(F) ** 2, window_length, hop, dt, freqs, times)


def _band_mask(freqs, band) -> np.ndarray:
    lo, hi = band
    return (freqs >= lo) & (freqs <= hi)


def band_snr(spec: Spectrogram, signal_band, noise_band) -> SnrCurve:
    """Background-corrected band power over rescaled background power, per window."""
    signal_band = (float(signal_band[0]), float(signal_band[1]))
    noise_band = (float(noise_band[0]), float(noise_band[1]))
    if signal_band[0] <= noise_band[1] and noise_band[0] <= signal_band[1]:
        raise ValueError("signal and noise bands overlap")
    sig = _band_mask(spec.freqs, signal_band)
    noi = _band_mask(spec.freqs, noise_band)
    if not sig.any() or not noi.any():
        raise ValueError("a band contains no frequency bins")
    rho = sig.sum() / noi.sum()
    background = rho * spec.power[:, noi].sum(axis=1)
    if np.any(background <= 0):
        raise ValueError("zero noise power in a window; add noise or use raw band power")
    band_power = spec.power[:, sig].sum(axis=1)
    return SnrCurve(spec.times.copy(), (band_power - background) / background, signal_band, noise_band)


def _gauss(t, A, T2):
    return A * np.exp(-(t**2) / (2 * T2**2))


def fit_gaussian_decay(curve: SnrCurve | tuple) -> DecayFit:
    """Least-squares fit of ``A exp(-t^2 / 2 T2^2)``.

    Starts from a log-linear regression on ``t^2`` (weighted by the squared
    values) and reports one-sigma errors from the Jacobian covariance.
    """
    if isinstance(curve, SnrCurve):
        t, y = curve.times, curve.snr
    else:
        t, y = (np.asarray(v, dtype=float) for v in curve)
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if t.size < 5:
        raise ValueError("need at least 5 points")
    pos = y > 0
    if not pos.any():
        raise ValueError("no positive values to fit")
    # initial guess: log y = log A - t^2 / (2 T2^2)
    tp, yp = t[pos], y[pos]
    w = yp**2
    X = np.stack([np.ones_like(tp), tp**2], axis=1)
    coef = np.linalg.lstsq(X * np.sqrt(w)[:, None], np.log(yp) * np.sqrt(w), rcond=None)[0]
    span = float(np.ptp(t)) or 1.0
    T0 = math.sqrt(-1 / (2 * coef[1])) if coef[1] < 0 else span
    A0 = math.exp(coef[0]) if coef[1] < 0 else float(yp.max())
    scale_t = T0
    scale_y = max(abs(A0), 1e-300)

    def resid(p):
        return (_gauss(t, p[0] * scale_y, p[1] * scale_t) - y) / scale_y

    sol = optimize.least_squares(resid, [A0 / scale_y, 1.0], method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    if not sol.success:
        raise RuntimeError(f"Gaussian fit failed: {sol.message}")
    A, T2 = sol.x[0] * scale_y, abs(sol.x[1]) * scale_t
    r = _gauss(t, A, T2) - y
    rss = float(r @ r)
    dof = max(t.size - 2, 1)
    J = sol.jac * np.array([1.0, 1.0])  # in scaled parameters
    try:
        cov_scaled = np.linalg.inv(J.T @ J) * (rss / scale_y**2) / dof
    except np.linalg.LinAlgError:
        cov_scaled = np.full((2, 2), np.inf)
    A_err = math.sqrt(max(cov_scaled[0, 0], 0.0)) * scale_y
    T_err = math.sqrt(max(cov_scaled[1, 1], 0.0)) * scale_t
    return DecayFit(T2, T_err, A, math.sqrt(rss), A_err)


@dataclass
class FwhmResult:
    T2_values: np.ndarray
    widths: np.ndarray  # Hz
    k_values: np.ndarray  # widths * T2
    k: float  # least-squares constant in width = k / T2


def peak_fwhm(power: np.ndarray, df: float, index: int | None = None) -> float:
    """Full width at half maximum of the peak at ``index`` (default: global max).

    Edges are located by linear interpolation between the straddling bins.
    """
    p = np.asarray(power, dtype=float)
    i = int(np.argmax(p)) if index is None else int(index)
    half = p[i] / 2
    lo = i
    while lo > 0 and p[lo] > half:
        lo -= 1
    hi = i
    while hi < p.size - 1 and p[hi] > half:
        hi += 1
    if p[lo] > half or p[hi] > half:
        raise ValueError("peak does not fall to half maximum inside the spectrum")
    if hi - lo < 3:
        raise ValueError("peak unresolved: fewer than 3 bins above half maximum")
    left = lo + (half - p[lo]) / (p[lo + 1] - p[lo])
    right = (hi - 1) + (p[hi - 1] - half) / (p[hi - 1] - p[hi])
    return float((right - left) * df)


def fwhm_constant(
    T2_values: Sequence[float],
    t_max: float = 2000e-6,
    n_samples: int = 50000,
    carrier: float = 5e6,
    two_sided: bool = False,
) -> FwhmResult:
    """Numerical constant ``k`` in ``FWHM = k / T2`` for a Gaussian-damped cosine.

    The one-sided model observes only ``t >= 0``; ``two_sided=True`` centres the
    full envelope in the record instead.
    """
    T2_values = np.asarray(T2_values, dtype=float)
    if two_sided:
        t = np.linspace(-t_max / 2, t_max / 2, n_samples)
    else:
        t = np.linspace(0.0, t_max, n_samples)
    dt = t[1] - t[0]
    df = 1.0 / (n_samples * dt)
    widths = np.empty(T2_values.size)
    for j, T2 in enumerate(T2_values):
        y = np.cos(2 * np.pi * carrier * t) * np.exp(-0.5 * (t / T2) ** 2)
        power = np.abs(np.fft.fft(y))[: n_samples // 2] ** 2
        widths[j] = peak_fwhm(power, df)
    inv = 1.0 / T2_values
    k = float(inv @ widths / (inv @ inv))
    return FwhmResult(T2_values, widths, widths * T2_values, k)


def frequency_resolution(T2: float) -> float:
    """FWHM ``sqrt(2) / (pi T2)`` in Hz."""
    if T2 <= 0:
        raise ValueError("T2 must be positive")
    return FWHM_CONSTANT / T2


def spatial_resolution(T2: float, sensitivity: float) -> float:
    """Spatial resolution in nm for coherence time ``T2`` (s) and sensitivity (kHz/nm)."""
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    return frequency_resolution(T2) * 1e-3 / sensitivity


def coherence_for_resolution(resolution_nm: float, sensitivity: float) -> float:
    """Inverse of :func:`spatial_resolution`: the T2 (s) giving ``resolution_nm``."""
    if resolution_nm <= 0 or sensitivity <= 0:
        raise ValueError("inputs must be positive")
    return FWHM_CONSTANT / (resolution_nm * sensitivity * 1e3)


# --- localization --------------------------------------------------------------


class LocalizationError(RuntimeError):
    pass


@dataclass
class Localization:
    position: np.ndarray
    residual: float  # Hz RMS
    converged: bool
    degenerate: bool = False
    consistent: bool = True
    iterations: int = 0
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "position_m": self.position.tolist(),
            "residual_hz_rms": self.residual,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "consistent": self.consistent,
            "iterations": self.iterations,
        }


def localize(
    measured: Mapping[str, float],
    asm: WireAssembly,
    currents: Mapping[str, float],
    qaxis: QuantizationAxis,
    initial_guess,
    max_iter: int = 200,
    xtol: float = 1e-11,
    residual_threshold: float = 1e3,
    restarts: int = 1,
) -> Localization:
    """Position whose per-channel Larmor shifts (Hz) best match ``measured``.

    A Nelder-Mead simplex (with restarts) brings the estimate near the
    minimum, then Gauss-Newton steps using finite-difference Jacobians polish
    it until the step falls below ``xtol`` (m).  Fewer than three channels
    leave a solution manifold; the point nearest the simplex result is
    returned with ``degenerate=True``.
    """
    channels = list(measured)
    target = np.array([measured[c] for c in channels], dtype=float)
    cur = {c: currents[c] for c in channels}
    x0 = np.asarray(initial_guess, dtype=float).reshape(3)
    unit = 1e-6  # simplex works in micrometres

    def model(p):
        return channel_frequencies(asm, cur, qaxis, p, channels) / (2 * np.pi)

    def cost(u):
        r = model(x0 + u * unit) - target
        return float(r @ r)

    u = np.zeros(3)
    if cost(u) > 0:
        for _ in range(restarts + 1):
            res = optimize.minimize(
                cost,
                u,
                method="Nelder-Mead",
                options={"xatol": 1e-5, "fatol": 1e-12, "maxiter": 4000, "initial_simplex": None},
            )
            if np.allclose(res.x, u, atol=1e-5, rtol=0):
                u = res.x
                break
            u = res.x
    x = x0 + u * unit

    converged = False
    iterations = 0
    history = [x.copy()]
    for iterations in range(1, max_iter + 1):
        r = model(x) - target
        if not np.any(r):
            converged = True
            break
        jac = frequency_jacobian(asm, cur, qaxis, x).matrix(channels) / (2 * np.pi)
        step = -np.linalg.lstsq(jac, r, rcond=None)[0]
        # backtrack so the residual never grows
        base = float(r @ r)
        alpha = 1.0
        while alpha > 1e-4:
            trial = x + alpha * step
            rt = model(trial) - target
            if float(rt @ rt) <= base:
                break
            alpha /= 2
        else:
            trial = x
        moved = np.linalg.norm(trial - x)
        x = trial
        history.append(x.copy())
        if moved < xtol:
            converged = True
            break
    if not converged:
        raise LocalizationError(f"no convergence after {max_iter} Gauss-Newton iterations")
    r = model(x) - target
    residual = float(np.sqrt(np.mean(r**2)))
    return Localization(
        position=x,
        residual=residual,
        converged=True,
        degenerate=len(channels) < 3,
        consistent=residual <= residual_threshold,
        iterations=iterations,
        history=history,
    )
