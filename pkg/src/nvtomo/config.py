"""Run configuration: JSON schema validation, defaults, semantic checks."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_BAND = {"type": "array", "items": _NONNEG, "minItems": 2, "maxItems": 2}
_CHANNEL_MAP_POS = {"type": "object", "additionalProperties": _POS}


def _nullable(schema: dict) -> dict:
    return {"oneOf": [schema, {"type": "null"}]}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "description": {"type": "string"},
        "stages": {
            "type": "array",
            "items": {"enum": ["field", "synth", "recon", "analyze"]},
            "uniqueItems": True,
        },
        "output_dir": {"type": "string"},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "u_structure": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "arm_length": _POS,
                        "arm_width": _POS,
                        "subdivisions": {"type": "integer", "minimum": 1},
                        "feedline_length": _POS,
                        "plane_z": {"type": "number"},
                    },
                },
                "assembly_file": {"type": "string"},
                "currents": {"type": "object", "additionalProperties": {"type": "number"}},
                "quantization_axis": _VEC3,
                "gyromagnetic_ratio": _POS,
                "focus": _VEC3,
                "field_map": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "extent": _POS,
                        "points": {"type": "integer", "minimum": 2, "maximum": 2001},
                        "depth": {"type": "number"},
                    },
                },
            },
        },
        "ensemble": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spins": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["position", "coherence_times"],
                        "properties": {
                            "position": _VEC3,
                            "weight": _POS,
                            "coherence_times": _CHANNEL_MAP_POS,
                        },
                    },
                },
                "random": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["count"],
                    "properties": {
                        "count": {"type": "integer", "minimum": 1},
                        "center": _VEC3,
                        "extent": {"oneOf": [_POS, _VEC3]},
                        "coherence_time": _POS,
                        "seed": {"type": "integer", "minimum": 0},
                    },
                },
                "frequency_targets": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["frequencies_hz"],
                        "properties": {
                            "frequencies_hz": {"type": "object", "additionalProperties": {"type": "number"}},
                            "coherence_time": _POS,
                            "weight": _POS,
                        },
                    },
                },
            },
        },
        "sequence": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "channels": {
                    "type": "array",
                    "items": {"type": "string"},
                    "minItems": 1,
                    "maxItems": 3,
                    "uniqueItems": True,
                },
                "n_points": {"type": "array", "items": {"type": "integer", "minimum": 2}},
                "dt": {"type": "array", "items": _POS},
                "offset": _nullable({"type": "array", "items": _NONNEG}),
                "quadratures": {
                    "type": "array",
                    "items": {"enum": ["x", "y"]},
                    "minItems": 1,
                    "uniqueItems": True,
                },
                "readout_noise_sigma": _NONNEG,
                "seed": {"type": "integer", "minimum": 0},
                "repetitions": {"type": "integer", "minimum": 1},
                "pulse": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "reference_current": _POS,
                        "shot_to_shot_sigma": _NONNEG,
                        "ramp_time": _NONNEG,
                        "sample_rate": _POS,
                    },
                },
            },
        },
        "recon": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["fft", "zoom", "l1"]},
                "bands": _nullable({"type": "array", "items": _BAND}),
                "factors": _nullable({"type": "array", "items": {"type": "integer", "minimum": 1}}),
                "lambda": {"oneOf": [_POS, {"type": "null"}]},
                "lambda_rel": _POS,
                "max_iters": {"type": "integer", "minimum": 1},
                "tol": _POS,
                "accelerated": {"type": "boolean"},
                "sample_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "sample_seed": {"type": "integer", "minimum": 0},
                "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "min_separation": {"type": "integer", "minimum": 1},
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "signal_band": {"oneOf": [_BAND, {"type": "null"}]},
                "noise_band": {"oneOf": [_BAND, {"type": "null"}]},
                "expected_t2": _POS,
                "window_length": {"oneOf": [{"type": "integer", "minimum": 2}, {"type": "null"}]},
                "hop": {"oneOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
                "window": {"enum": ["rect", "hann"]},
                "fit": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "description": "",
    "stages": ["field", "synth", "recon"],
    "output_dir": "nvtomo-out",
    "geometry": {
        "currents": {"I1": 0.08, "I2": 0.08, "I3": 0.08},
        "quantization_axis": [-0.5773502691896258, -0.5773502691896258, -0.5773502691896258],
        "gyromagnetic_ratio": 28.025e9,
        "focus": [0.431e-6, 2.32e-6, -6e-6],
        "field_map": {"extent": 20e-6, "points": 81, "depth": -6e-6},
    },
    "ensemble": {},
    "sequence": {
        "channels": ["I1"],
        "n_points": [600],
        "dt": [10e-9],
        "offset": None,
        "quadratures": ["x", "y"],
        "readout_noise_sigma": 0.0,
        "seed": 0,
        "repetitions": 1,
        "pulse": {
            "reference_current": 0.08,
            "shot_to_shot_sigma": 0.0,
            "ramp_time": 0.0,
            "sample_rate": 1e9,
        },
    },
    "recon": {
        "mode": "fft",
        "bands": None,
        "factors": None,
        "lambda": None,
        "lambda_rel": 0.01,
        "max_iters": 1000,
        "tol": 1e-8,
        "accelerated": False,
        "sample_fraction": 0.25,
        "sample_seed": 0,
        "threshold": 0.1,
        "min_separation": 2,
    },
    "analysis": {
        "signal_band": None,
        "noise_band": None,
        "expected_t2": 8.64e-6,
        "window_length": None,
        "hop": None,
        "window": "rect",
        "fit": True,
    },
}

U_DEFAULTS = {
    "arm_length": 5e-6,
    "arm_width": 0.5e-6,
    "subdivisions": 10,
    "feedline_length": 1e-3,
    "plane_z": 0.0,
}

RANDOM_DEFAULTS = {"center": DEFAULTS["geometry"]["focus"], "extent": 1e-6, "coherence_time": 20e-6, "seed": 0}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem found."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("currents",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    geometry: dict
    ensemble: dict
    sequence: dict
    recon: dict
    analysis: dict
    output_dir: str
    stages: list[str]
    description: str = ""
    base_dir: Path = field(default_factory=Path.cwd)

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "stages": list(self.stages),
            "output_dir": self.output_dir,
            "geometry": self.geometry,
            "ensemble": self.ensemble,
            "sequence": self.sequence,
            "recon": self.recon,
            "analysis": self.analysis,
        }

    def config_hash(self) -> str:
        doc = self.to_dict()
        doc.pop("output_dir")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _path_of(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def _semantic_errors(doc: dict, base_dir: Path) -> list[str]:
    errors = []
    geo = doc.get("geometry", {})
    if "u_structure" in geo and "assembly_file" in geo:
        errors.append("geometry: 'u_structure' and 'assembly_file' are mutually exclusive")
    if "assembly_file" in geo:
        p = Path(geo["assembly_file"])
        p = p if p.is_absolute() else base_dir / p
        if not p.is_file():
            errors.append(f"geometry.assembly_file: file not found: {p}")
    ens = doc.get("ensemble", {})
    kinds = [k for k in ("spins", "random", "frequency_targets") if k in ens]
    if len(kinds) > 1:
        errors.append(f"ensemble: {', '.join(kinds)} are mutually exclusive")
    seq = doc.get("sequence", {})
    if seq:
        k = len(seq.get("channels", DEFAULTS["sequence"]["channels"]))
        for key in ("n_points", "dt", "offset"):
            if key in seq and seq[key] is not None and len(seq[key]) != k:
                errors.append(f"sequence.{key}: expected {k} entries (one per channel), got {len(seq[key])}")
    rec = doc.get("recon", {})
    if rec.get("mode") == "zoom" and not rec.get("bands"):
        errors.append("recon.bands: required when recon.mode is 'zoom'")
    for key in ("bands",):
        for i, band in enumerate(rec.get(key) or []):
            if band[0] >= band[1]:
                errors.append(f"recon.{key}.{i}: lower edge must be below upper edge")
    ana = doc.get("analysis", {})
    for key in ("signal_band", "noise_band"):
        band = ana.get(key)
        if band and band[0] >= band[1]:
            errors.append(f"analysis.{key}: lower edge must be below upper edge")
    return errors


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    base_dir = Path.cwd() if base_dir is None else Path(base_dir)
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = [
        f"{_path_of(e)}: {e.message}"
        for e in sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    ]
    if isinstance(doc, dict):
        errors += _semantic_errors(doc, base_dir)
    if errors:
        raise ConfigError(errors)
    merged = _merge(DEFAULTS, doc)
    geo = merged["geometry"]
    if "assembly_file" not in geo:
        geo["u_structure"] = _merge(U_DEFAULTS, geo.get("u_structure", {}))
    ens = merged["ensemble"]
    if not any(k in ens for k in ("spins", "random", "frequency_targets")):
        ens["random"] = {"count": 5}
    if "random" in ens:
        ens["random"] = _merge(RANDOM_DEFAULTS, ens["random"])
    seq = merged["sequence"]
    if seq["offset"] is None:
        seq["offset"] = [0.0] * len(seq["channels"])
    k = len(seq["channels"])
    late = []
    for key in ("n_points", "dt"):
        if len(seq[key]) != k:
            late.append(f"sequence.{key}: expected {k} entries (one per channel), got {len(seq[key])}")
    if late:
        raise ConfigError(late)
    return RunConfig(
        geometry=geo,
        ensemble=ens,
        sequence=seq,
        recon=merged["recon"],
        analysis=merged["analysis"],
        output_dir=merged["output_dir"],
        stages=list(merged["stages"]),
        description=merged["description"],
        base_dir=base_dir,
    )


def validate_config(path: str | Path) -> RunConfig:
    """Read, validate and default a JSON run configuration.

    Raises :class:`ConfigError` listing every schema and semantic problem, or a
    single parse error with line context.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config: {exc.strerror}"]) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}: {context.strip()!r}"]) from None
    return parse_config(doc, path.parent)
