"""Spectral reconstruction: FFT power images, aliasing zoom, L1 sparse recovery, peaks.

All transforms use the unitary DFT normalization (``norm="ortho"``).  Complex
(quadrature) inputs yield two-sided axes in ascending frequency order; real
inputs keep only the non-negative half of the last axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import io as _io
from .sequencer import GridAxis, SignalGrid

DEFAULT_TOL = 1e-8
MAX_ZOOM_FACTOR = 100_000
# bulky or non-JSON entries kept in memory only
_TRANSIENT_META = ("objective", "coefficients")


@dataclass(frozen=True)
class FreqAxis:
    channel: str
    step: float  # Hz
    offset: float  # Hz, frequency of index 0
    sample_dt: float  # s, time step of the source axis
    flipped: bool = False

    def values(self, n: int) -> np.ndarray:
        return self.offset + self.step * np.arange(n)

    @property
    def nyquist(self) -> float:
        return 0.5 / self.sample_dt


@dataclass
class SpectralImage:
    power: np.ndarray
    axes: list[FreqAxis]
    provenance: str = "fft"
    onesided: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=float)
        if self.power.ndim != len(self.axes):
            raise ValueError("axes count must equal power rank")

    def frequencies(self, axis: int) -> np.ndarray:
        return self.axes[axis].values(self.power.shape[axis])

    def header(self) -> dict:
        return {
            "rank": self.power.ndim,
            "shape": list(self.power.shape),
            "axes": [
                {
                    "channel": a.channel,
                    "df_hz": a.step,
                    "offset_hz": a.offset,
                    "sample_dt_s": a.sample_dt,
                    "flipped": a.flipped,
                }
                for a in self.axes
            ],
            "provenance": self.provenance,
            "onesided": self.onesided,
            "meta": {k: v for k, v in self.meta.items() if k not in _TRANSIENT_META},
        }

    def save(self, path: str | Path) -> list[Path]:
        base = _io.basename(path)
        raw = base.with_name(base.name + _io.RAW_SUFFIX)
        head = base.with_name(base.name + _io.HEADER_SUFFIX)
        _io.write_raw(raw, self.power)
        _io.write_json(head, self.header())
        return [raw, head]

    @classmethod
    def load(cls, path: str | Path) -> "SpectralImage":
        base = _io.basename(path)
        head = json.loads(base.with_name(base.name + _io.HEADER_SUFFIX).read_text())
        if "provenance" not in head:
            raise ValueError(f"{base}: not a SpectralImage header")
        power = _io.read_raw(base.with_name(base.name + _io.RAW_SUFFIX), head["shape"])
        axes = [
            FreqAxis(a["channel"], a["df_hz"], a["offset_hz"], a["sample_dt_s"], a.get("flipped", False))
            for a in head["axes"]
        ]
        return cls(power, axes, head["provenance"], head.get("onesided", False), head.get("meta", {}))


def complex_combine(grid_x: SignalGrid, grid_y: SignalGrid) -> np.ndarray:
    """Analytic signal ``(x - 1/2) + i (y - 1/2)`` from the two quadratures."""
    if grid_x.quadrature != "x" or grid_y.quadrature != "y":
        raise ValueError("expected an x-quadrature and a y-quadrature grid")
    if grid_x.shape != grid_y.shape or grid_x.axes != grid_y.axes:
        raise ValueError("quadrature grids differ in shape or axes")
    return (grid_x.data - 0.5) + 1j * (grid_y.data - 0.5)


def _check_equidistant(times: np.ndarray, label) -> float:
    step = np.diff(times)
    if step.size == 0 or np.any(step <= 0) or not np.allclose(step, step[0], rtol=1e-9, atol=0):
        raise ValueError(f"axis {label!r} is not equidistant")
    return float(step[0])


def _normalize_axes(axes, shape) -> list[GridAxis]:
    out = []
    for k, a in enumerate(axes):
        if isinstance(a, GridAxis):
            out.append(a)
        elif np.ndim(a) == 0:
            out.append(GridAxis(f"axis{k}", float(a)))
        else:
            t = np.asarray(a, dtype=float)
            if t.size != shape[k]:
                raise ValueError(f"axis {k} has {t.size} times for {shape[k]} samples")
            out.append(GridAxis(f"axis{k}", _check_equidistant(t, k), float(t[0])))
    for a in out:
        if not a.dt > 0:
            raise ValueError(f"axis {a.channel!r} is not equidistant")
    return out


def _freq_axes(shape, axes: Sequence[GridAxis], onesided: bool) -> list[FreqAxis]:
    out = []
    rank = len(shape)
    for k, (n, a) in enumerate(zip(shape, axes)):
        df = 1.0 / (n * a.dt)
        if onesided and k == rank - 1:
            offset = 0.0
        else:
            offset = -(n // 2) * df
        out.append(FreqAxis(a.channel, df, offset, a.dt))
    return out


def spectrum(signal: np.ndarray, onesided: bool | None = None) -> np.ndarray:
    """Unitary DFT of the mean-subtracted signal, arranged like :func:`spectral_image`."""
    signal = np.asarray(signal)
    if onesided is None:
        onesided = not np.iscomplexobj(signal)
    centered = signal - signal.mean()
    rank = signal.ndim
    if onesided:
        F = np.fft.rfftn(centered.real, norm="ortho")
        return np.fft.fftshift(F, axes=tuple(range(rank - 1))) if rank > 1 else F
    return np.fft.fftshift(np.fft.fftn(centered, norm="ortho"))


def spectral_image(signal, axes) -> SpectralImage:
    """Spectral power ``|DFT|^2`` of an N-dimensional signal.

    ``axes`` holds one entry per dimension: a :class:`GridAxis`, a time step,
    or the explicit sample times (which must be equidistant).
    """
    signal = np.asarray(signal)
    if len(axes) != signal.ndim:
        raise ValueError("need one axis description per dimension")
    grid_axes = _normalize_axes(axes, signal.shape)
    onesided = not np.iscomplexobj(signal)
    F = spectrum(signal, onesided)
    return SpectralImage(np.abs(F) ** 2, _freq_axes(signal.shape, grid_axes, onesided), "fft", onesided)


def image_from_grids(grids: dict[str, SignalGrid]) -> SpectralImage:
    """Power image from synthesized quadrature grids (complex when both exist)."""
    if "x" in grids and "y" in grids:
        s = complex_combine(grids["x"], grids["y"])
        return spectral_image(s, grids["x"].axes)
    g = next(iter(grids.values()))
    return spectral_image(g.data, g.axes)


# --- aliasing ------------------------------------------------------------------


@dataclass(frozen=True)
class AliasResult:
    f_obs: float
    N: int
    flipped: bool


def alias_map(f, f_nyq):
    """Apparent frequency ``|f - 2 N f_nyq|`` of an undersampled tone.

    ``N`` is the integer minimizing the distance, ties going to the smaller
    ``N``.  Scalars return an :class:`AliasResult`; arrays return a tuple of
    arrays ``(f_obs, N, flipped)``.
    """
    f_arr = np.asarray(f, dtype=float)
    fn = np.asarray(f_nyq, dtype=float)
    if np.any(f_arr < 0) or np.any(fn <= 0):
        raise ValueError("need f >= 0 and f_nyq > 0")
    N = np.ceil(f_arr / (2 * fn) - 0.5).astype(np.int64)
    center = 2 * N * fn
    f_obs = np.abs(f_arr - center)
    flipped = f_arr < center
    if f_arr.ndim == 0 and fn.ndim == 0:
        return AliasResult(float(f_obs), int(N), bool(flipped))
    return f_obs, N, flipped


@dataclass(frozen=True)
class AxisZoom:
    nyquist: float
    N: int
    flipped: bool
    undersample_factor: int
    band: tuple[float, float]

    def observed_band(self) -> tuple[float, float]:
        lo, hi = (abs(f - 2 * self.N * self.nyquist) for f in self.band)
        return (min(lo, hi), max(lo, hi))


@dataclass
class ZoomPlan:
    axes: list[AxisZoom]
    diagnostics: list[str] = field(default_factory=list)

    @property
    def factors(self) -> list[int]:
        return [a.undersample_factor for a in self.axes]

    @property
    def reduction(self) -> int:
        return int(np.prod(self.factors))

    def to_dict(self) -> dict:
        return {
            "axes": [
                {
                    "nyquist_hz": a.nyquist,
                    "alias_index": a.N,
                    "flipped": a.flipped,
                    "undersample_factor": a.undersample_factor,
                    "band_hz": list(a.band),
                    "observed_band_hz": list(a.observed_band()),
                }
                for a in self.axes
            ],
            "reduction": self.reduction,
            "diagnostics": list(self.diagnostics),
        }


def band_placement(f_lo: float, f_hi: float, f_nyq: float) -> tuple[int, bool] | None:
    """Alias index and flip parity if the band sits inside one monotone half-period.

    Returns ``None`` when the band straddles a multiple of ``f_nyq`` or is
    wider than ``f_nyq``.
    """
    if f_hi - f_lo > f_nyq:
        return None
    m = math.floor(f_lo / f_nyq)
    # tolerate an upper edge sitting exactly on the next multiple
    if f_hi > (m + 1) * f_nyq * (1 + 1e-12):
        return None
    if m % 2 == 0:
        return m // 2, False
    return (m + 1) // 2, True


def plan_axis(band, dt: float, factor: int | None = None, max_factor: int | None = None) -> AxisZoom:
    f_lo, f_hi = float(band[0]), float(band[1])
    if not 0 <= f_lo < f_hi:
        raise ValueError(f"invalid band {band}")
    full_nyq = 0.5 / dt
    if full_nyq < f_hi:
        raise ValueError(f"band edge {f_hi} Hz above the full-sample Nyquist {full_nyq} Hz")
    if factor is not None:
        fn = full_nyq / factor
        place = band_placement(f_lo, f_hi, fn)
        if place is None:
            raise ValueError(f"factor {factor} folds band [{f_lo}, {f_hi}] Hz onto itself")
        return AxisZoom(fn, place[0], place[1], int(factor), (f_lo, f_hi))
    top = min(int(math.floor(full_nyq / (f_hi - f_lo))), MAX_ZOOM_FACTOR)
    if max_factor is not None:
        top = min(top, int(max_factor))
    for m in range(max(top, 1), 0, -1):
        fn = full_nyq / m
        place = band_placement(f_lo, f_hi, fn)
        if place is not None:
            return AxisZoom(fn, place[0], place[1], m, (f_lo, f_hi))
    raise AssertionError("factor 1 always admits the band")  # pragma: no cover


def plan_zoom(bands, fullsample_dt, factors=None, max_factors=None) -> ZoomPlan:
    """Per-axis undersampling that folds each band contiguously toward zero.

    Without ``factors`` the largest admissible factor is chosen per axis;
    explicit ``factors`` are validated instead of searched.
    """
    bands = list(bands)
    dts = np.broadcast_to(np.asarray(fullsample_dt, dtype=float), (len(bands),))
    factors = [None] * len(bands) if factors is None else list(factors)
    max_factors = [None] * len(bands) if max_factors is None else list(max_factors)
    axes, diag = [], []
    for k, (band, dt) in enumerate(zip(bands, dts)):
        ax = plan_axis(band, float(dt), factors[k], max_factors[k])
        if ax.undersample_factor == 1 and factors[k] is None:
            diag.append(f"axis {k}: band [{band[0]}, {band[1]}] Hz admits no zoom; keeping full sampling")
        axes.append(ax)
    return ZoomPlan(axes, diag)


def unfold(image: SpectralImage, plan: ZoomPlan) -> SpectralImage:
    """Relabel an aliased image on true frequencies.

    Each axis is cropped to the half (non-negative or non-positive observed
    frequency) that holds the folded band and mapped through
    ``f = 2 N f_nyq +- f_obs``; axes whose mapping is decreasing are reversed
    so the result is ascending.  Power values are not modified.
    """
    if len(plan.axes) != image.power.ndim:
        raise ValueError("plan and image rank differ")
    for k, (ax, z) in enumerate(zip(image.axes, plan.axes)):
        if not math.isclose(ax.nyquist, z.nyquist, rel_tol=1e-9):
            raise ValueError(
                f"axis {k}: image Nyquist {ax.nyquist} Hz does not match plan {z.nyquist} Hz"
            )
    # real images only hold one of each +-f pair; the kept sign is the last axis'
    t = -1.0 if (image.onesided and plan.axes[-1].flipped) else 1.0
    power = image.power
    new_axes = []
    for k, (ax, z) in enumerate(zip(image.axes, plan.axes)):
        g = ax.values(power.shape[k])
        s = -1.0 if z.flipped else 1.0
        want = t * s
        keep = np.nonzero(g * want >= -1e-9 * ax.step)[0]
        power = np.take(power, keep, axis=k)
        f_true = 2 * z.N * z.nyquist + t * g[keep]
        if t < 0:
            power = np.flip(power, axis=k)
            f_true = f_true[::-1]
        new_axes.append(FreqAxis(ax.channel, ax.step, float(f_true[0]), ax.sample_dt, z.flipped))
    meta = dict(image.meta, unfolded=True, plan=plan.to_dict())
    return SpectralImage(np.ascontiguousarray(power), new_axes, image.provenance, False, meta)


# --- L1 reconstruction -----------------------------------------------------------


def soft_threshold(x: np.ndarray, thresh: float) -> np.ndarray:
    mag = np.abs(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        shrink = np.where(mag > thresh, 1.0 - thresh / np.where(mag > 0, mag, 1.0), 0.0)
    return x * shrink


def l1_reconstruct(
    samples,
    sample_index,
    grid_shape,
    lam: float,
    max_iters: int = 1000,
    tol: float = DEFAULT_TOL,
    accelerated: bool = False,
    dt=None,
    channels=None,
) -> SpectralImage:
    """Sparse spectrum from a subset of grid samples.

    Minimizes ``1/2 ||M F^-1 x - y||^2 + lam ||x||_1`` by proximal gradient
    descent with unit step (the unitary synthesis operator has norm 1).
    ``sample_index`` is a tuple of integer index arrays into ``grid_shape``
    (as from ``np.nonzero(mask)``) or a boolean mask.  With
    ``accelerated=True`` the monotone FISTA variant is used.

    The result's ``meta`` holds ``converged``, ``iterations`` and the
    objective history; ``meta["coefficients"]`` is the complex spectrum in
    FFT order.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    grid_shape = tuple(int(n) for n in grid_shape)
    y = np.asarray(samples, dtype=complex).ravel()
    mask = np.zeros(grid_shape, dtype=bool)
    if isinstance(sample_index, np.ndarray) and sample_index.dtype == bool:
        if sample_index.shape != grid_shape:
            raise ValueError("mask shape differs from grid shape")
        mask = sample_index.copy()
        idx = np.nonzero(mask)
    else:
        idx = tuple(np.asarray(i, dtype=int) for i in sample_index)
        mask[idx] = True
    if y.size != idx[0].size:
        raise ValueError("one sample per index required")

    def forward(x):
        return np.fft.ifftn(x, norm="ortho")[idx]

    def adjoint(r):
        full = np.zeros(grid_shape, dtype=complex)
        full[idx] = r
        return np.fft.fftn(full, norm="ortho")

    def objective(x, resid):
        return 0.5 * float(np.sum(np.abs(resid) ** 2)) + lam * float(np.sum(np.abs(x)))

    x = np.zeros(grid_shape, dtype=complex)
    resid = forward(x) - y
    f_cur = objective(x, resid)
    history = [f_cur]
    best = x
    converged = False
    z = x
    t_k = 1.0
    it = 0
    for it in range(1, max_iters + 1):
        point = z if accelerated else x
        r_point = forward(point) - y
        cand = soft_threshold(point - adjoint(r_point), lam)
        r_cand = forward(cand) - y
        f_cand = objective(cand, r_cand)
        if accelerated:
            t_next = 0.5 * (1 + math.sqrt(1 + 4 * t_k**2))
            x_new = cand if f_cand <= f_cur else x
            f_new = min(f_cand, f_cur)
            z = x_new + (t_k / t_next) * (cand - x_new) + ((t_k - 1) / t_next) * (x_new - x)
            t_k = t_next
        else:
            x_new, f_new = cand, f_cand
        decrease = f_cur - f_new
        x, f_prev, f_cur = x_new, f_cur, f_new
        history.append(f_cur)
        best = x
        if f_prev == 0 or (0 <= decrease <= tol * abs(f_prev) and it > 1):
            converged = True
            break

    grid_axes = []
    dts = [1.0] * len(grid_shape) if dt is None else list(np.broadcast_to(dt, (len(grid_shape),)))
    names = channels or [f"axis{k}" for k in range(len(grid_shape))]
    for k, n in enumerate(grid_shape):
        grid_axes.append(GridAxis(names[k], float(dts[k])))
    power = np.abs(np.fft.fftshift(best)) ** 2
    meta = {
        "converged": converged,
        "iterations": it,
        "objective": history,
        "lambda": lam,
        "coefficients": best,
        "sample_count": int(y.size),
    }
    return SpectralImage(power, _freq_axes(grid_shape, grid_axes, False), "l1", False, meta)


# --- peaks -----------------------------------------------------------------------


@dataclass(frozen=True)
class Peak:
    freqs: tuple[float, ...]
    power: float
    index: tuple[int, ...]


def _parabolic_offset(lm: float, l0: float, lp: float) -> float:
    denom = lm - 2 * l0 + lp
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (lm - lp) / denom, -0.5, 0.5))


def peak_extract(image: SpectralImage, threshold: float = 0.1, min_separation: int = 1) -> list[Peak]:
    """Local maxima above ``threshold * max(power)``, strongest first.

    Candidates closer than ``min_separation`` bins (Chebyshev distance) to a
    stronger accepted peak are dropped.  Reported frequencies are refined by a
    three-point parabola on log-power along each axis.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must be in (0, 1)")
    p = image.power
    if p.size == 0 or not np.any(p > 0):
        return []
    local_max = ndimage.maximum_filter(p, size=3, mode="nearest") == p
    cand = np.argwhere(local_max & (p >= threshold * p.max()))
    order = np.argsort(-p[tuple(cand.T)], kind="stable")
    floor = p.max() * 1e-300
    logp = np.log(p + floor)
    accepted: list[np.ndarray] = []
    peaks = []
    for j in order:
        ij = cand[j]
        if any(np.max(np.abs(ij - a)) < min_separation for a in accepted):
            continue
        accepted.append(ij)
        freqs = []
        for k in range(p.ndim):
            n = p.shape[k]
            i = int(ij[k])
            off = 0.0
            if 0 < i < n - 1:
                lo = ij.copy(); lo[k] -= 1
                hi = ij.copy(); hi[k] += 1
                off = _parabolic_offset(logp[tuple(lo)], logp[tuple(ij)], logp[tuple(hi)])
            ax = image.axes[k]
            freqs.append(ax.offset + ax.step * (i + off))
        peaks.append(Peak(tuple(freqs), float(p[tuple(ij)]), tuple(int(v) for v in ij)))
    return peaks


def write_peaks_csv(path: str | Path, peaks: list[Peak], channels: Sequence[str]) -> None:
    header = [f"f_{c}_hz" for c in channels] + ["power"]
    _io.write_csv(path, header, [list(pk.freqs) + [pk.power] for pk in peaks])
