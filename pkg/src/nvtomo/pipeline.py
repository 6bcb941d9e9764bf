"""Stage orchestration: field, synth, recon, analyze; manifest, lock file, plot export."""

from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as _io
from .analysis import (
    LocalizationError,
    band_snr,
    fit_gaussian_decay,
    frequency_resolution,
    localize,
    spatial_resolution,
    spectrogram,
)
from .config import RunConfig
from .fieldmap import (
    QuantizationAxis,
    SingularityError,
    WireAssembly,
    build_u_structure,
    channel_field,
    channel_frequencies,
    frequency_jacobian,
    sensitivity,
)
from .recon import (
    SpectralImage,
    complex_combine,
    image_from_grids,
    l1_reconstruct,
    peak_extract,
    plan_zoom,
    unfold,
    write_peaks_csv,
)
from .sequencer import (
    CurrentPulseModel,
    SequenceSpec,
    SignalGrid,
    Spin,
    SpinEnsemble,
    random_ensemble,
    synthesize,
    undersample_grid,
)

log = logging.getLogger(__name__)

STAGES = ("field", "synth", "recon", "analyze")
LOCK_NAME = ".nvtomo.lock"
MANIFEST_NAME = "manifest.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {message}")


class LockError(RuntimeError):
    pass


@dataclass
class RunResult:
    out_dir: Path
    stages: list[str]
    files: dict[str, str] = field(default_factory=dict)


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock file in ``out_dir``; a second holder gets :class:`LockError`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        holder = lock.read_text().strip() if lock.exists() else "?"
        raise LockError(
            f"{out_dir} is locked by process {holder}; remove {lock} if that run is gone"
        ) from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield lock
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# --- building blocks from config -----------------------------------------------


def build_assembly(cfg: RunConfig) -> WireAssembly:
    geo = cfg.geometry
    if "assembly_file" in geo:
        return WireAssembly.load(cfg.resolve(geo["assembly_file"]))
    return build_u_structure(**geo["u_structure"])


def build_axis(cfg: RunConfig) -> QuantizationAxis:
    return QuantizationAxis(np.array(cfg.geometry["quantization_axis"]), cfg.geometry["gyromagnetic_ratio"])


def _currents(cfg: RunConfig, asm: WireAssembly) -> dict[str, float]:
    cur = dict(cfg.geometry["currents"])
    missing = [c for c in asm.labels if c not in cur]
    if missing:
        raise ValueError(f"geometry.currents lacks channels {missing}")
    return cur


def build_ensemble(cfg: RunConfig, asm: WireAssembly, qaxis: QuantizationAxis) -> SpinEnsemble:
    ens = cfg.ensemble
    if "spins" in ens:
        return SpinEnsemble(
            [Spin(s["position"], s["coherence_times"], s.get("weight", 1.0)) for s in ens["spins"]]
        )
    if "random" in ens:
        r = ens["random"]
        return random_ensemble(
            r["count"], r["center"], r["extent"], {c: r["coherence_time"] for c in asm.labels}, r["seed"]
        )
    # place spins where the fields produce the requested frequencies
    I0 = cfg.sequence["pulse"]["reference_current"]
    currents = {c: I0 for c in asm.labels}
    spins = []
    for t in ens["frequency_targets"]:
        loc = localize(t["frequencies_hz"], asm, currents, qaxis, cfg.geometry["focus"])
        t2 = t.get("coherence_time", 20e-6)
        spins.append(Spin(loc.position, {c: t2 for c in asm.labels}, t.get("weight", 1.0)))
    return SpinEnsemble(spins)


def build_sequence(cfg: RunConfig) -> SequenceSpec:
    s = cfg.sequence
    return SequenceSpec.regular(
        s["channels"],
        s["n_points"],
        s["dt"],
        s["offset"],
        quadratures=tuple(s["quadratures"]),
        readout_noise_sigma=s["readout_noise_sigma"],
        seed=s["seed"],
        repetitions=s["repetitions"],
    )


def build_zoom_plan(cfg: RunConfig):
    rec = cfg.recon
    if rec["mode"] != "zoom":
        return None
    bands = rec["bands"]
    if len(bands) != len(cfg.sequence["channels"]):
        raise ValueError("recon.bands needs one band per sequence channel")
    return plan_zoom(bands, cfg.sequence["dt"], rec["factors"])


# --- stages --------------------------------------------------------------------


def stage_field(cfg: RunConfig, out: Path) -> list[Path]:
    asm = build_assembly(cfg)
    qaxis = build_axis(cfg)
    currents = _currents(cfg, asm)
    asm.save(out / "assembly.json")
    written = [out / "assembly.json"]
    focus = np.array(cfg.geometry["focus"])
    jac = frequency_jacobian(asm, currents, qaxis, focus)
    freqs = channel_frequencies(asm, currents, qaxis, focus) / (2 * np.pi)
    report = {
        "focus_m": focus.tolist(),
        "channels": {
            c: {"sensitivity_khz_per_nm": sensitivity(jac, c), "frequency_hz": float(freqs[k])}
            for k, c in enumerate(asm.labels)
        },
    }
    _io.write_json(out / "sensitivity.json", report)
    written.append(out / "sensitivity.json")

    fm = cfg.geometry["field_map"]
    n, ext = fm["points"], fm["extent"]
    step = ext / (n - 1)
    xs = focus[0] - ext / 2 + step * np.arange(n)
    ys = focus[1] - ext / 2 + step * np.arange(n)
    Y, X = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([X, Y, np.full_like(X, fm["depth"])], axis=-1)
    for c in asm.labels:
        B = channel_field(asm, c, currents[c], pts.reshape(-1, 3)).reshape(n, n, 3)
        base = out / f"field_{c}"
        _io.write_raw(base.with_suffix(".f64"), np.linalg.norm(B, axis=-1))
        _io.write_json(
            base.with_suffix(".json"),
            {
                "kind": "field_map",
                "quantity": "field_magnitude_T",
                "channel": c,
                "current_A": currents[c],
                "depth_m": fm["depth"],
                "rank": 2,
                "shape": [n, n],
                "axes": [
                    {"name": "y_m", "step": step, "offset": float(ys[0])},
                    {"name": "x_m", "step": step, "offset": float(xs[0])},
                ],
            },
        )
        written += [base.with_suffix(".f64"), base.with_suffix(".json")]
    return written


def stage_synth(cfg: RunConfig, out: Path) -> list[Path]:
    asm = build_assembly(cfg)
    qaxis = build_axis(cfg)
    ensemble = build_ensemble(cfg, asm, qaxis)
    pulse = CurrentPulseModel(**cfg.sequence["pulse"])
    spec = build_sequence(cfg)
    written = []
    plan = build_zoom_plan(cfg)
    if plan is not None:
        spec = undersample_grid(spec, plan.factors)
        for msg in plan.diagnostics:
            log.warning(msg)
        _io.write_json(out / "zoom_plan.json", plan.to_dict())
        written.append(out / "zoom_plan.json")
    _io.write_json(out / "ensemble.json", ensemble.to_dict())
    written.append(out / "ensemble.json")
    grids = synthesize(asm, qaxis, ensemble, pulse, spec)
    for quad, grid in grids.items():
        written += grid.save(out / f"signal_{quad}")
    return written


def load_signals(out: Path) -> dict[str, SignalGrid]:
    grids = {}
    for quad in ("x", "y"):
        if (out / f"signal_{quad}.json").exists():
            grids[quad] = SignalGrid.load(out / f"signal_{quad}")
    if not grids:
        raise FileNotFoundError(f"no signal grids in {out}; run the synth stage first")
    return grids


def _l1_image(cfg: RunConfig, grids: dict[str, SignalGrid]) -> SpectralImage:
    rec = cfg.recon
    g0 = next(iter(grids.values()))
    if "x" in grids and "y" in grids:
        full = complex_combine(grids["x"], grids["y"])
    else:
        full = g0.data - g0.data.mean()
    rng = np.random.default_rng(rec["sample_seed"])
    count = max(1, int(round(rec["sample_fraction"] * full.size)))
    flat = np.sort(rng.choice(full.size, size=count, replace=False))
    mask = np.zeros(full.size, dtype=bool)
    mask[flat] = True
    mask = mask.reshape(full.shape)
    y = full[mask]
    lam = rec["lambda"]
    if lam is None:
        back = np.zeros(full.shape, dtype=complex)
        back[mask] = y
        lam = rec["lambda_rel"] * float(np.abs(np.fft.fftn(back, norm="ortho")).max())
    return l1_reconstruct(
        y,
        mask,
        full.shape,
        lam,
        max_iters=rec["max_iters"],
        tol=rec["tol"],
        accelerated=rec["accelerated"],
        dt=[a.dt for a in g0.axes],
        channels=g0.channels,
    )


def stage_recon(cfg: RunConfig, out: Path) -> list[Path]:
    grids = load_signals(out)
    mode = cfg.recon["mode"]
    if mode == "l1":
        image = _l1_image(cfg, grids)
        if not image.meta["converged"]:
            log.warning("L1 solver stopped after %d iterations without converging", image.meta["iterations"])
    else:
        image = image_from_grids(grids)
        if mode == "zoom":
            image = unfold(image, build_zoom_plan(cfg))
    written = image.save(out / "image")
    peaks = peak_extract(image, cfg.recon["threshold"], cfg.recon["min_separation"])
    write_peaks_csv(out / "peaks.csv", peaks, [a.channel for a in image.axes])
    return written + [out / "peaks.csv"]


def stage_analyze(cfg: RunConfig, out: Path) -> list[Path]:
    ana = cfg.analysis
    if ana["signal_band"] is None or ana["noise_band"] is None:
        raise ValueError("analysis.signal_band and analysis.noise_band are required")
    grids = load_signals(out)
    grid = grids.get("x") or next(iter(grids.values()))
    if grid.data.ndim != 1:
        raise ValueError(f"analysis needs a 1D signal, got rank {grid.data.ndim}")
    dt = grid.axes[0].dt
    W = ana["window_length"] or max(2, int(round(ana["expected_t2"] / 4 / dt)))
    hop = ana["hop"] or max(1, W // 4)
    spec = spectrogram(grid.data, dt, W, hop, t0=grid.axes[0].offset, window=ana["window"])
    curve = band_snr(spec, ana["signal_band"], ana["noise_band"])
    written = spec.save(out / "spectrogram")
    curve.save_csv(out / "snr.csv")
    written.append(out / "snr.csv")
    if ana["fit"]:
        fit = fit_gaussian_decay(curve)
        _io.write_json(out / "fit.json", fit.to_dict())
        written.append(out / "fit.json")
        # resolution at the focus for the analysed channel
        asm = build_assembly(cfg)
        channel = grid.axes[0].channel
        jac = frequency_jacobian(asm, _currents(cfg, asm), build_axis(cfg), np.array(cfg.geometry["focus"]))
        sens = sensitivity(jac, channel)
        _io.write_json(
            out / "resolution.json",
            {
                "channel": channel,
                "T2_s": fit.T2,
                "frequency_resolution_hz": frequency_resolution(fit.T2),
                "sensitivity_khz_per_nm": sens,
                "spatial_resolution_nm": spatial_resolution(fit.T2, sens),
            },
        )
        written.append(out / "resolution.json")
    return written


_RUNNERS = {"field": stage_field, "synth": stage_synth, "recon": stage_recon, "analyze": stage_analyze}


def _limit_threads(threads: int | None):
    if threads is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        log.debug("threadpoolctl unavailable; --threads only recorded")
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def _hash_outputs(out: Path) -> dict[str, str]:
    files = {}
    for p in sorted(out.rglob("*")):
        if not p.is_file() or p.name in (MANIFEST_NAME, LOCK_NAME) or p.name.endswith(".tmp"):
            continue
        files[p.relative_to(out).as_posix()] = _io.sha256_file(p)
    return files


def run_pipeline(
    cfg: RunConfig,
    stages=None,
    out_dir: str | Path | None = None,
    seed: int | None = None,
    threads: int | None = None,
) -> RunResult:
    """Run ``stages`` (default: the config's) into ``out_dir`` under a lock.

    Writes ``run_config.json`` and ``manifest.json`` (sha256 of every output,
    config hash, versions).  Failures raise :class:`StageError`.
    """
    stages = list(cfg.stages if stages is None else stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}; choose from {list(STAGES)}")
    stages = [s for s in STAGES if s in stages]
    if seed is not None:
        cfg = replace(cfg, sequence=dict(cfg.sequence, seed=int(seed)))
    out = cfg.resolve(cfg.output_dir) if out_dir is None else Path(out_dir)
    timings = {}
    with output_lock(out), _limit_threads(threads):
        _io.write_json(out / "run_config.json", cfg.to_dict())
        for name in stages:
            log.info("running stage %s", name)
            t0 = time.perf_counter()
            try:
                _RUNNERS[name](cfg, out)
            except (ValueError, KeyError, FileNotFoundError, LocalizationError, SingularityError, RuntimeError) as exc:
                raise StageError(name, str(exc)) from exc
            timings[name] = time.perf_counter() - t0
            log.info("stage %s done in %.3f s", name, timings[name])
        manifest_path = out / MANIFEST_NAME
        previous = {}
        if manifest_path.exists():
            with contextlib.suppress(json.JSONDecodeError):
                previous = json.loads(manifest_path.read_text()).get("stages", {})
        previous.update({k: {"wall_clock_s": v} for k, v in timings.items()})
        files = _hash_outputs(out)
        _io.write_json(
            manifest_path,
            {
                "package_version": __version__,
                "numpy_version": np.__version__,
                "config_hash": cfg.config_hash(),
                "seed": cfg.sequence["seed"],
                "threads": threads,
                "stages": previous,
                "files": files,
            },
        )
    return RunResult(out, stages, files)


# --- plot export ---------------------------------------------------------------


def _load_artifact(path: str | Path):
    """Array plus per-axis (name, values) from any saved header/raw pair."""
    base = _io.basename(path)
    head_path = base.with_name(base.name + _io.HEADER_SUFFIX)
    try:
        head = json.loads(head_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{head_path}: unreadable artifact header ({exc})") from None
    if not isinstance(head, dict) or "shape" not in head or "axes" not in head:
        raise ValueError(f"{head_path}: not an array artifact header")
    shape = head["shape"]
    if not shape or int(np.prod(shape)) == 0:
        raise ValueError(f"{head_path}: empty array")
    if "quadrature" in head:
        grid = SignalGrid.load(base)
        axes = [(f"{a.channel}_s", grid.times(k)) for k, a in enumerate(grid.axes)]
        return grid.data, axes, grid.t_eff
    if "provenance" in head:
        img = SpectralImage.load(base)
        axes = [(f"f_{a.channel}_hz", img.frequencies(k)) for k, a in enumerate(img.axes)]
        return img.power, axes, None
    data = _io.read_raw(base.with_name(base.name + _io.RAW_SUFFIX), shape)
    axes = [(a["name"], a["offset"] + a["step"] * np.arange(n)) for a, n in zip(head["axes"], shape)]
    return data, axes, None


def _matrix_csv(data: np.ndarray, ax0, ax1) -> str:
    header = [f"{ax0[0]}\\{ax1[0]}"] + [repr(float(v)) for v in ax1[1]]
    return _io.csv_text(header, ([v0] + list(row) for v0, row in zip(ax0[1], data)))


def export_plotdata(artifact: str | Path, kind: str, out_dir: str | Path) -> list[Path]:
    """Write plot-ready CSV for a saved artifact.

    ``timeseries`` needs rank 1, ``heatmap`` rank 2 and ``volume`` rank 3
    (three maximum-intensity projections).  Nothing is written on error.
    """
    data, axes, t_eff = _load_artifact(artifact)
    if not np.all(np.isfinite(data)):
        raise ValueError("artifact holds non-finite values")
    need = {"timeseries": 1, "heatmap": 2, "volume": 3}
    if kind not in need:
        raise ValueError(f"unknown export kind {kind!r}")
    if data.ndim != need[kind]:
        raise ValueError(f"{kind} export needs a rank-{need[kind]} artifact, got rank {data.ndim}")
    stem = _io.basename(artifact).name
    out = Path(out_dir)
    docs: dict[Path, str] = {}
    if kind == "timeseries":
        header = [axes[0][0]] + (["t_eff_s"] if t_eff is not None else []) + ["value"]
        rows = []
        for i, v in enumerate(data):
            row = [axes[0][1][i]] + ([t_eff[i, 0]] if t_eff is not None else []) + [v]
            rows.append(row)
        docs[out / f"{stem}_timeseries.csv"] = _io.csv_text(header, rows)
    elif kind == "heatmap":
        docs[out / f"{stem}_heatmap.csv"] = _matrix_csv(data, axes[0], axes[1])
    else:
        for k in range(3):
            rest = [axes[j] for j in range(3) if j != k]
            docs[out / f"{stem}_mip_{k}.csv"] = _matrix_csv(data.max(axis=k), rest[0], rest[1])
    for path, text in docs.items():
        _io.atomic_write_text(path, text)
    return list(docs)
