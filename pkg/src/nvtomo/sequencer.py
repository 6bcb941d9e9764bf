"""Synthesis of phase-encoded gradient-echo signals.

A spin at position x accumulates the phase ``sum_k omega_k(x) * t_eff_k``
during the gradient pulses of a Hahn echo; the trailing pi/2 pulse maps it to
``<S_z> = (1 + cos(phase)) / 2`` (x phase) or ``(1 + sin(phase)) / 2`` (y
phase).  Ensembles superpose linearly.  Noise is drawn from a counter-based
generator so every grid point is reproducible independently of evaluation
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io as _io
from .fieldmap import QuantizationAxis, WireAssembly, channel_frequencies

QUADRATURES = ("x", "y")


@dataclass(frozen=True)
class Spin:
    position: np.ndarray
    coherence_times: Mapping[str, float]
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if self.weight <= 0:
            raise ValueError("spin weight must be positive")
        for label, t2 in self.coherence_times.items():
            if not t2 > 0:
                raise ValueError(f"coherence time for {label!r} must be positive")


@dataclass
class SpinEnsemble:
    spins: list[Spin]

    def __post_init__(self):
        if not self.spins:
            raise ValueError("ensemble needs at least one spin")

    def __len__(self):
        return len(self.spins)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.spins])

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.spins])

    def coherence_matrix(self, channels: Sequence[str]) -> np.ndarray:
        try:
            return np.array([[s.coherence_times[c] for c in channels] for s in self.spins])
        except KeyError as exc:
            raise KeyError(f"spin lacks a coherence time for channel {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "spins": [
                {
                    "position": s.position.tolist(),
                    "weight": s.weight,
                    "coherence_times": dict(s.coherence_times),
                }
                for s in self.spins
            ]
        }

    @classmethod
    def from_dict(cls, doc) -> "SpinEnsemble":
        return cls(
            [
                Spin(s["position"], dict(s["coherence_times"]), float(s.get("weight", 1.0)))
                for s in doc["spins"]
            ]
        )


def random_ensemble(
    count: int,
    center,
    extent,
    coherence_times: Mapping[str, float],
    seed: int = 0,
) -> SpinEnsemble:
    """Uniformly scattered spins in a box ``center +- extent/2``."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=float)
    extent = np.asarray(extent, dtype=float) * np.ones(3)
    pos = center + (rng.random((count, 3)) - 0.5) * extent
    return SpinEnsemble([Spin(p, dict(coherence_times)) for p in pos])


@dataclass(frozen=True)
class CurrentPulseModel:
    reference_current: float = 0.08
    shot_to_shot_sigma: float = 0.0
    ramp_time: float = 0.0
    sample_rate: float = 1e9

    def __post_init__(self):
        if self.reference_current <= 0:
            raise ValueError("reference_current must be positive")
        if self.shot_to_shot_sigma < 0 or self.ramp_time < 0:
            raise ValueError("shot_to_shot_sigma and ramp_time must be >= 0")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")


@dataclass
class SequenceSpec:
    channels: list[str]
    durations: list[np.ndarray]
    quadratures: tuple[str, ...] = ("x",)
    readout_noise_sigma: float = 0.0
    seed: int = 0
    repetitions: int = 1

    def __post_init__(self):
        self.channels = list(self.channels)
        self.durations = [np.asarray(d, dtype=float) for d in self.durations]
        self.quadratures = tuple(self.quadratures)
        if not 1 <= len(self.channels) <= 3:
            raise ValueError("a sequence uses 1 to 3 gradient channels")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channels must be distinct")
        if len(self.durations) != len(self.channels):
            raise ValueError("need one duration array per channel")
        for label, d in zip(self.channels, self.durations):
            if d.ndim != 1 or d.size < 2:
                raise ValueError(f"durations for {label!r} need at least 2 points")
            step = np.diff(d)
            if np.any(step <= 0):
                raise ValueError(f"durations for {label!r} must be strictly increasing")
            if not np.allclose(step, step[0], rtol=1e-9, atol=0):
                raise ValueError(f"durations for {label!r} must be equidistant")
            if d[0] < 0:
                raise ValueError(f"durations for {label!r} must start at >= 0")
        if not self.quadratures or any(q not in QUADRATURES for q in self.quadratures):
            raise ValueError("quadratures must be drawn from ('x', 'y')")
        if self.readout_noise_sigma < 0:
            raise ValueError("readout_noise_sigma must be >= 0")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")

    @classmethod
    def regular(cls, channels, n_points, dt, offset=0.0, **kw) -> "SequenceSpec":
        """Grid of ``n_points[k]`` durations ``offset[k] + i*dt[k]`` per channel."""
        k = len(channels)
        n_points = np.broadcast_to(n_points, (k,))
        dt = np.broadcast_to(np.asarray(dt, dtype=float), (k,))
        offset = np.broadcast_to(np.asarray(offset, dtype=float), (k,))
        durations = [o + d * np.arange(n) for n, d, o in zip(n_points, dt, offset)]
        return cls(list(channels), durations, **kw)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.size for d in self.durations)

    @property
    def steps(self) -> list[float]:
        return [float(d[1] - d[0]) for d in self.durations]


@dataclass(frozen=True)
class GridAxis:
    channel: str
    dt: float
    offset: float = 0.0

    def values(self, n: int) -> np.ndarray:
        return self.offset + self.dt * np.arange(n)


@dataclass
class SignalGrid:
    data: np.ndarray
    axes: list[GridAxis]
    quadrature: str = "x"
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    t_eff: np.ndarray | None = None  # shape data.shape + (rank,)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != len(self.axes):
            raise ValueError("axes count must equal data rank")
        if self.quadrature not in QUADRATURES:
            raise ValueError(f"unknown quadrature {self.quadrature!r}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self) -> list[str]:
        return [a.channel for a in self.axes]

    def times(self, axis: int = 0) -> np.ndarray:
        return self.axes[axis].values(self.data.shape[axis])

    def header(self) -> dict:
        return {
            "rank": self.data.ndim,
            "shape": list(self.data.shape),
            "axes": [{"channel": a.channel, "dt_eff_s": a.dt, "offset_s": a.offset} for a in self.axes],
            "quadrature": self.quadrature,
            "seed": self.seed,
            "metadata": self.metadata,
            "has_t_eff": self.t_eff is not None,
        }

    def save(self, path: str | Path) -> list[Path]:
        """Write ``<base>.json``, ``<base>.f64`` and optionally ``<base>.teff.f64``."""
        base = _io.basename(path)
        written = []
        raw = base.with_name(base.name + _io.RAW_SUFFIX)
        _io.write_raw(raw, self.data)
        written.append(raw)
        if self.t_eff is not None:
            side = base.with_name(base.name + ".teff" + _io.RAW_SUFFIX)
            _io.write_raw(side, self.t_eff)
            written.append(side)
        head = base.with_name(base.name + _io.HEADER_SUFFIX)
        _io.write_json(head, self.header())
        written.append(head)
        return written

    @classmethod
    def load(cls, path: str | Path) -> "SignalGrid":
        base = _io.basename(path)
        head = json.loads(base.with_name(base.name + _io.HEADER_SUFFIX).read_text())
        if "quadrature" not in head or "axes" not in head:
            raise ValueError(f"{base}: not a SignalGrid header")
        shape = head["shape"]
        data = _io.read_raw(base.with_name(base.name + _io.RAW_SUFFIX), shape)
        t_eff = None
        if head.get("has_t_eff"):
            t_eff = _io.read_raw(
                base.with_name(base.name + ".teff" + _io.RAW_SUFFIX), list(shape) + [len(shape)]
            )
        axes = [GridAxis(a["channel"], float(a["dt_eff_s"]), float(a["offset_s"])) for a in head["axes"]]
        return cls(data, axes, head["quadrature"], int(head.get("seed", 0)), head.get("metadata", {}), t_eff)


# --- counter-based noise -----------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z):
    with np.errstate(over="ignore"):
        z = np.asarray(z, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def counter_normal(seed: int, stream: int, index) -> np.ndarray:
    """Standard normals that depend only on ``(seed, stream, index)``."""
    index = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix64(_mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)) ^ (np.uint64(stream) * _GOLDEN))
        a = _mix64(key ^ (index * np.uint64(2)))
        b = _mix64(key ^ (index * np.uint64(2) + np.uint64(1)))
    scale = 2.0**-53
    u1 = ((a >> np.uint64(11)).astype(float) + 0.5) * scale
    u2 = ((b >> np.uint64(11)).astype(float) + 0.5) * scale
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2 * np.pi * u2)


_READOUT_STREAM = 1
_SHOT_STREAM = 1000


# --- operations -----------------------------------------------------------------


def current_trace(duration: float, model: CurrentPulseModel, scale: float = 1.0):
    """Sampled trapezoidal pulse of nominal length ``duration``.

    Returns ``(times, amperes)``.  Ramp corners are inserted as extra samples
    so the trapezoidal rule integrates the piecewise-linear trace exactly.
    """
    n = max(2, int(np.ceil(duration * model.sample_rate)) + 1)
    t = np.linspace(0.0, duration, n)
    peak = scale * model.reference_current
    r = model.ramp_time
    # ramps below the float resolution of the duration act as rectangles
    if r == 0 or duration == 0 or duration - r == duration:
        return t, np.full(n, peak if duration > 0 else 0.0)
    corners = [c for c in (r, duration - r, duration / 2) if 0 < c < duration]
    t = np.union1d(t, corners)
    return t, peak * np.clip(np.minimum(t, duration - t) / r, 0.0, 1.0)


def effective_time(current_trace, reference_current: float, dt: float | None = None, times=None) -> float:
    """Pulse integral divided by the reference current, in seconds.

    The trace is integrated with the trapezoidal rule on ``times`` (or on a
    uniform grid of spacing ``dt``).
    """
    trace = np.asarray(current_trace, dtype=float)
    if trace.size == 0:
        raise ValueError("empty current trace")
    if reference_current <= 0:
        raise ValueError("reference current must be positive")
    if times is None:
        if dt is None:
            raise ValueError("need dt or times")
        times = dt * np.arange(trace.size)
    times = np.asarray(times, dtype=float)
    if trace.size == 1:
        return 0.0
    if np.all(trace == trace[0]):
        # constant trace: avoid summation roundoff
        return float(trace[0] * (times[-1] - times[0]) / reference_current)
    return float(np.trapezoid(trace, times) / reference_current)


def spin_phase(channel_frequencies, effective_durations):
    """Accumulated phase ``sum_k omega_k * t_k`` (rad); broadcasts over leading axes."""
    w = np.asarray(channel_frequencies, dtype=float)
    t = np.asarray(effective_durations, dtype=float)
    if w.shape[-1] != t.shape[-1]:
        raise ValueError("channel count mismatch between frequencies and durations")
    return np.sum(w * t, axis=-1)


def echo_expectation(phases, weights, envelopes, quadrature: str = "x"):
    """Spin projection after the trailing pi/2 pulse, normalized by total weight.

    The spin index is the last axis of ``phases`` and ``envelopes``.
    """
    phases = np.asarray(phases, dtype=float)
    weights = np.asarray(weights, dtype=float)
    envelopes = np.broadcast_to(np.asarray(envelopes, dtype=float), phases.shape)
    if phases.shape[-1] != weights.shape[-1]:
        raise ValueError("phases and weights must have equal length")
    osc = np.cos(phases) if quadrature == "x" else np.sin(phases) if quadrature == "y" else None
    if osc is None:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    return 0.5 * (1.0 + np.sum(weights * envelopes * osc, axis=-1) / weights.sum())


def decoherence_envelope(coherence_times, effective_durations):
    """Gaussian decay ``exp(-1/2 sum_k (t_k / T2_k)^2)``."""
    T2 = np.asarray(coherence_times, dtype=float)
    t = np.asarray(effective_durations, dtype=float)
    return np.exp(-0.5 * np.sum((t / T2) ** 2, axis=-1))


def undersample_grid(spec: SequenceSpec, factors: Sequence[int]) -> SequenceSpec:
    """Keep every ``factors[k]``-th duration of each axis."""
    factors = [int(f) for f in factors]
    if len(factors) != len(spec.channels):
        raise ValueError("need one factor per channel")
    if any(f < 1 for f in factors):
        raise ValueError("undersampling factors must be >= 1")
    durations = []
    for label, d, f in zip(spec.channels, spec.durations, factors):
        coarse = d[::f]
        if coarse.size < 2:
            raise ValueError(f"axis {label!r} would keep fewer than 2 points")
        durations.append(coarse)
    return replace(spec, durations=durations)


def trapezoid_effective_time(durations, ramp_time: float) -> np.ndarray:
    """Closed-form effective time of unit-scale trapezoids; equals the trace integral."""
    d = np.asarray(durations, dtype=float)
    if ramp_time == 0:
        return d.copy()
    r = ramp_time
    # short pulses never reach the plateau: triangle of height d / (2 r)
    with np.errstate(over="ignore"):  # the unused branch may overflow for subnormal r
        return np.where(d >= 2 * r, d - r, d**2 / (4 * r))


def _base_effective_times(durations: np.ndarray, model: CurrentPulseModel) -> np.ndarray:
    return trapezoid_effective_time(durations, model.ramp_time)


def synthesize(
    asm: WireAssembly,
    qaxis: QuantizationAxis,
    ensemble: SpinEnsemble,
    pulse_model: CurrentPulseModel,
    spec: SequenceSpec,
) -> dict[str, SignalGrid]:
    """Simulated echo signal on the pulse-duration grid, one grid per quadrature.

    Per-spin frequencies come from the field of each channel alone at the
    reference current.  Per repetition and channel, the pulse is scaled by a
    factor drawn from ``N(1, shot_to_shot_sigma)``; the phase uses the realized
    effective duration while the decoherence envelope uses the nominal one.
    """
    for c in spec.channels:
        if c not in asm.channels:
            raise KeyError(f"sequence channel {c!r} not in assembly")
    channels = spec.channels
    K = len(channels)
    shape = spec.shape
    npts = int(np.prod(shape))
    I0 = pulse_model.reference_current
    omega = channel_frequencies(asm, {c: I0 for c in channels}, qaxis, ensemble.positions, channels)
    T2 = ensemble.coherence_matrix(channels)
    weights = ensemble.weights
    W = weights.sum()

    base = [_base_effective_times(d, pulse_model) for d in spec.durations]
    # broadcastable per-axis views
    views = []
    for k in range(K):
        sh = [1] * K
        sh[k] = shape[k]
        views.append(sh)
    nominal = [spec.durations[k].reshape(views[k]) for k in range(K)]
    base_b = [base[k].reshape(views[k]) for k in range(K)]
    env = np.ones((len(ensemble),) + shape)
    for i in range(len(ensemble)):
        e = 1.0
        for k in range(K):
            e = e * np.exp(-0.5 * (nominal[k] / T2[i, k]) ** 2)
        env[i] = e

    flat_index = np.arange(npts, dtype=np.uint64)
    R = spec.repetitions
    sigma_shot = pulse_model.shot_to_shot_sigma
    meta = {
        "readout_noise_sigma": spec.readout_noise_sigma,
        "shot_to_shot_sigma": sigma_shot,
        "ramp_time": pulse_model.ramp_time,
        "repetitions": R,
        "reference_current": I0,
    }
    grids = {}
    for qi, quad in enumerate(QUADRATURES):
        if quad not in spec.quadratures:
            continue
        osc = np.cos if quad == "x" else np.sin
        signal = np.zeros(shape)
        teff_sum = np.zeros(shape + (K,))
        for r in range(R):
            teff = []
            for k in range(K):
                tk = np.broadcast_to(base_b[k], shape)
                if sigma_shot > 0:
                    idx = flat_index * np.uint64(R) + np.uint64(r)
                    stream = _SHOT_STREAM + 16 * qi + k
                    scale = 1.0 + sigma_shot * counter_normal(spec.seed, stream, idx).reshape(shape)
                    tk = tk * scale
                teff.append(tk)
            acc = np.zeros(shape)
            for i in range(len(ensemble)):
                phase = np.zeros(shape)
                for k in range(K):
                    phase = phase + omega[i, k] * teff[k]
                acc += weights[i] * env[i] * osc(phase)
            signal += 0.5 * (1.0 + acc / W)
            teff_sum += np.stack(teff, axis=-1)
        signal /= R
        if spec.readout_noise_sigma > 0:
            noise = counter_normal(spec.seed, _READOUT_STREAM + qi, flat_index).reshape(shape)
            signal = signal + spec.readout_noise_sigma * noise
        axes = [
            GridAxis(c, spec.steps[k], float(spec.durations[k][0])) for k, c in enumerate(channels)
        ]
        grids[quad] = SignalGrid(signal, axes, quad, spec.seed, dict(meta), teff_sum / R)
    return grids
