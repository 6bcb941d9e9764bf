"""Magnetostatics of microwire assemblies.

Finite straight filaments are evaluated with the closed-form Biot-Savart
expression; finite-width wires are represented by equal-current parallel
filaments spread across the wire width.  All quantities are SI unless the
name says otherwise (``sensitivity`` returns kHz/nm).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import io as _io

MU0 = 4e-7 * np.pi
NV_GYROMAGNETIC_RATIO = 28.025e9  # Hz/T
SINGULAR_DISTANCE = 1e-12  # m
DEFAULT_JACOBIAN_STEP = 1e-9  # m

# observation point 6 um below the U, inside its footprint, and an NV axis
# oriented so current-induced shifts there are positive
DEFAULT_FOCUS = np.array([0.431e-6, 2.32e-6, -6e-6])
DEFAULT_AXIS = -np.ones(3) / np.sqrt(3)
U_CURRENT = 0.08  # A

# rad/s/m -> kHz/nm
_SENS_SCALE = 1.0 / (2 * np.pi) * 1e-3 * 1e-9


class SingularityError(ValueError):
    """Observation point lies on a current filament."""

    def __init__(self, message: str, channel: str | None = None, segment: int | None = None):
        super().__init__(message)
        self.channel = channel
        self.segment = segment


@dataclass(frozen=True)
class WireSegment:
    start: np.ndarray
    end: np.ndarray
    current_fraction: float = 1.0

    def __post_init__(self):
        start = np.asarray(self.start, dtype=float).reshape(3)
        end = np.asarray(self.end, dtype=float).reshape(3)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)
        if not (np.all(np.isfinite(start)) and np.all(np.isfinite(end))):
            raise ValueError("segment endpoints must be finite")
        if np.linalg.norm(end - start) == 0.0:
            raise ValueError("segment has zero length")
        if not (0.0 < self.current_fraction <= 1.0):
            raise ValueError(f"current_fraction must be in (0, 1], got {self.current_fraction}")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


@dataclass
class WireAssembly:
    """Named current channels, each a list of filaments."""

    channels: dict[str, list[WireSegment]]
    width: float = 0.0
    subdivisions: int = 1
    _arrays: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.channels:
            raise ValueError("assembly has no channels")
        for label, segs in self.channels.items():
            if len(segs) == 0:
                raise ValueError(f"channel {label!r} has no segments")

    @property
    def labels(self) -> list[str]:
        return list(self.channels)

    def arrays(self, label: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (starts, ends, fractions) for one channel."""
        if label not in self.channels:
            raise KeyError(f"unknown channel {label!r}")
        if label not in self._arrays:
            segs = self.channels[label]
            self._arrays[label] = (
                np.array([s.start for s in segs]),
                np.array([s.end for s in segs]),
                np.array([s.current_fraction for s in segs]),
            )
        return self._arrays[label]

    def to_dict(self) -> dict:
        return {
            "channels": {
                label: [
                    {
                        "start": s.start.tolist(),
                        "end": s.end.tolist(),
                        "current_fraction": s.current_fraction,
                    }
                    for s in segs
                ]
                for label, segs in self.channels.items()
            },
            "width": self.width,
            "subdivisions": self.subdivisions,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "WireAssembly":
        channels = {
            label: [
                WireSegment(s["start"], s["end"], float(s.get("current_fraction", 1.0)))
                for s in segs
            ]
            for label, segs in doc["channels"].items()
        }
        return cls(channels, float(doc.get("width", 0.0)), int(doc.get("subdivisions", 1)))

    def save(self, path: str | Path) -> None:
        _io.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> "WireAssembly":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class QuantizationAxis:
    axis: np.ndarray = field(default_factory=lambda: DEFAULT_AXIS.copy())
    gyromagnetic_ratio: float = NV_GYROMAGNETIC_RATIO

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if n == 0:
            raise ValueError("quantization axis must be nonzero")
        object.__setattr__(self, "axis", axis / n)
        if self.gyromagnetic_ratio <= 0:
            raise ValueError("gyromagnetic_ratio must be positive")

    @classmethod
    def from_angles(cls, theta: float, phi: float, gyromagnetic_ratio: float = NV_GYROMAGNETIC_RATIO):
        """Axis from polar angle ``theta`` (from +z) and azimuth ``phi``, radians."""
        axis = [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]
        return cls(np.array(axis), gyromagnetic_ratio)


@dataclass
class FrequencyJacobian:
    rows: dict[str, np.ndarray]  # d(omega_k)/dx, rad/s/m
    point: np.ndarray
    currents: dict[str, float]

    def matrix(self, channels=None) -> np.ndarray:
        channels = list(self.rows) if channels is None else list(channels)
        return np.array([self.rows[c] for c in channels])


def _filament_field(starts, ends, weights, points):
    """Field per unit current of filaments ``(M, 3)`` at ``points`` ``(P, 3)``.

    Returns the summed field ``(P, 3)`` and a boolean ``(P, M)`` mask of
    singular (on-filament) evaluations.
    """
    r1 = points[:, None, :] - starts[None, :, :]
    r2 = points[:, None, :] - ends[None, :, :]
    n1 = np.linalg.norm(r1, axis=-1)
    n2 = np.linalg.norm(r2, axis=-1)
    cross = np.cross(r1, r2)
    dl = ends - starts
    seg_len = np.linalg.norm(dl, axis=-1)
    # distance from the filament line, and projection parameter along it
    dist = np.linalg.norm(cross, axis=-1) / seg_len
    proj = np.einsum("pmk,mk->pm", r1, dl) / seg_len**2
    singular = (dist < SINGULAR_DISTANCE) & (proj >= 0.0) & (proj <= 1.0)
    dot = np.einsum("pmk,pmk->pm", r1, r2)
    cross_sq = np.einsum("pmk,pmk->pm", cross, cross)
    # n1 n2 + r1.r2 cancels when the point lies alongside a long segment;
    # use the identity (n1 n2)^2 - (r1.r2)^2 = |r1 x r2|^2 there
    with np.errstate(divide="ignore", invalid="ignore"):
        plus = np.where(dot < 0, cross_sq / (n1 * n2 - dot), n1 * n2 + dot)
    denom = n1 * n2 * plus
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(singular | (denom == 0), 0.0, (n1 + n2) / denom)
    factor = factor * weights[None, :] * (MU0 / (4 * np.pi))
    return np.einsum("pm,pmk->pk", factor, cross), singular


def segment_field(seg: WireSegment, current: float, point) -> np.ndarray:
    """Exact field (T) of one finite filament carrying ``current * current_fraction``."""
    if not np.isfinite(current):
        raise ValueError("current must be finite")
    pts = np.asarray(point, dtype=float)
    flat = pts.reshape(-1, 3)
    b, singular = _filament_field(
        seg.start[None], seg.end[None], np.array([seg.current_fraction]), flat
    )
    if singular.any():
        raise SingularityError("observation point lies on the filament", segment=0)
    return (current * b).reshape(pts.shape)


def channel_field(asm: WireAssembly, label: str, current: float, points) -> np.ndarray:
    """Field of one channel at ``points`` (shape ``(..., 3)``)."""
    pts = np.asarray(points, dtype=float)
    flat = pts.reshape(-1, 3)
    starts, ends, weights = asm.arrays(label)
    b, singular = _filament_field(starts, ends, weights, flat)
    if singular.any():
        p, m = np.argwhere(singular)[0]
        raise SingularityError(
            f"point {flat[p]} lies on segment {m} of channel {label!r}", channel=label, segment=int(m)
        )
    return (current * b).reshape(pts.shape)


def assembly_field(asm: WireAssembly, currents: Mapping[str, float], points) -> np.ndarray:
    """Superposed field (T) of all energized channels at ``points``."""
    for label in currents:
        if label not in asm.channels:
            raise KeyError(f"unknown channel {label!r}")
    pts = np.asarray(points, dtype=float)
    total = np.zeros(pts.shape)
    for label, current in currents.items():
        if current == 0:
            continue
        total = total + channel_field(asm, label, current, pts)
    return total


def _offset_filaments(path: np.ndarray, width: float, subdivisions: int) -> list[np.ndarray]:
    """Parallel copies of an in-plane polyline spread over ``width``.

    Filaments sit at the centres of ``subdivisions`` equal strips; corners use
    a miter join so neighbouring pieces stay connected.
    """
    if subdivisions == 1:
        return [path]
    offsets = (np.arange(subdivisions) + 0.5) / subdivisions * width - width / 2
    d = np.diff(path, axis=0)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    normals = np.stack([-d[:, 1], d[:, 0], np.zeros(len(d))], axis=1)
    vertex_n = np.empty_like(path)
    vertex_n[0] = normals[0]
    vertex_n[-1] = normals[-1]
    for i in range(1, len(path) - 1):
        a, b = normals[i - 1], normals[i]
        vertex_n[i] = (a + b) / (1.0 + a @ b)
    return [path + o * vertex_n for o in offsets]


def polyline_channel(path, width: float, subdivisions: int) -> list[WireSegment]:
    """Segments of a finite-width wire following ``path`` (vertices, current flows along it)."""
    path = np.asarray(path, dtype=float)
    segs = []
    for filament in _offset_filaments(path, width, subdivisions):
        for a, b in zip(filament[:-1], filament[1:]):
            segs.append(WireSegment(a, b, 1.0 / subdivisions))
    return segs


def build_u_structure(
    arm_length: float = 5e-6,
    arm_width: float = 0.5e-6,
    subdivisions: int = 10,
    feedline_length: float = 1e-3,
    plane_z: float = 0.0,
) -> WireAssembly:
    """Three-channel U microstructure in the plane ``z = plane_z``.

    The two parallel arms (I1 at x = -L/2, I3 at x = +L/2) run along +y from
    y = 0 to y = L, joined at y = L by the perpendicular top arm (I2) running
    along -x.  Each channel enters through a straight feed line that continues
    its arm outward from the open end, so I1 and I2 terminate at the corner
    (-L/2, L) and I3 at (+L/2, L).
    """
    if subdivisions < 1:
        raise ValueError("subdivisions must be >= 1")
    if min(arm_length, arm_width, feedline_length) <= 0:
        raise ValueError("lengths must be positive")
    h = arm_length / 2
    L = arm_length
    F = feedline_length
    z = plane_z
    paths = {
        "I1": [(-h, -F, z), (-h, 0.0, z), (-h, L, z)],
        "I2": [(h + F, L, z), (h, L, z), (-h, L, z)],
        "I3": [(h, -F, z), (h, 0.0, z), (h, L, z)],
    }
    channels = {
        label: polyline_channel(np.array(p), arm_width, subdivisions) for label, p in paths.items()
    }
    return WireAssembly(channels, width=arm_width, subdivisions=subdivisions)


def larmor_shift(B, qaxis: QuantizationAxis):
    """Linear Zeeman shift ``2*pi*gamma*(B . n)`` in rad/s (sign preserved)."""
    B = np.asarray(B, dtype=float)
    return 2 * np.pi * qaxis.gyromagnetic_ratio * (B @ qaxis.axis)


def channel_frequencies(
    asm: WireAssembly,
    currents: Mapping[str, float],
    qaxis: QuantizationAxis,
    points,
    channels=None,
) -> np.ndarray:
    """Per-channel Larmor shifts (rad/s), shape ``points.shape[:-1] + (K,)``.

    Each channel is evaluated alone at its current in ``currents``.
    """
    channels = list(currents) if channels is None else list(channels)
    pts = np.asarray(points, dtype=float)
    cols = [larmor_shift(channel_field(asm, c, currents[c], pts), qaxis) for c in channels]
    return np.stack(cols, axis=-1)


def frequency_jacobian(
    asm: WireAssembly,
    currents: Mapping[str, float],
    qaxis: QuantizationAxis,
    point,
    step: float = DEFAULT_JACOBIAN_STEP,
) -> FrequencyJacobian:
    """Central-difference gradient of each channel's Larmor shift at ``point``."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=float).reshape(3)
    probes = np.concatenate([point + step * np.eye(3), point - step * np.eye(3)])
    labels = list(currents)
    omega = channel_frequencies(asm, currents, qaxis, probes, labels)
    grads = (omega[:3] - omega[3:]) / (2 * step)
    rows = {c: grads[:, i].copy() for i, c in enumerate(labels)}
    return FrequencyJacobian(rows, point, dict(currents))


def sensitivity(jac: FrequencyJacobian, channel: str) -> float:
    """Gradient magnitude ``|grad omega| / 2 pi`` of one channel, in kHz/nm."""
    if channel not in jac.rows:
        raise KeyError(f"unknown channel {channel!r}")
    return float(np.linalg.norm(jac.rows[channel]) * _SENS_SCALE)


def khz_per_nm_to_rad_per_s_m(value: float) -> float:
    return value / _SENS_SCALE


def rad_per_s_m_to_khz_per_nm(value: float) -> float:
    return value * _SENS_SCALE
