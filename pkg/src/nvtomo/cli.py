"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 output locked.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources

import numpy as np

from . import __version__
from .analysis import LocalizationError, localize
from .config import ConfigError, parse_config, validate_config
from .pipeline import (
    STAGES,
    LockError,
    StageError,
    build_assembly,
    build_axis,
    export_plotdata,
    run_pipeline,
)
from .recon import plan_zoom

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_LOCK = 0, 2, 3, 4

log = logging.getLogger("nvtomo")


def demo_names() -> list[str]:
    root = resources.files("nvtomo") / "demos"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_demo(name: str):
    path = resources.files("nvtomo") / "demos" / f"{name}.json"
    if not path.is_file():
        raise ConfigError([f"unknown demo {name!r}; available: {', '.join(demo_names())}"])
    return parse_config(json.loads(path.read_text()))


def _vector3(text: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected X,Y,Z")
    return [float(v) for v in parts]


def _stage_list(text: str | None):
    if text is None:
        return None
    stages = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError([f"--stages: unknown stage(s) {bad}; choose from {list(STAGES)}"])
    return stages


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="JSON run configuration")
    p.add_argument("--stages", help="comma-separated stage list, e.g. field,synth,recon")
    p.add_argument("--seed", type=int, help="noise seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="cap on BLAS/FFT worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvtomo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("field", "field maps and focus sensitivities"),
        ("synth", "synthesize echo signals"),
        ("recon", "spectral image and peaks from saved signals"),
        ("analyze", "spectrogram, band SNR and coherence fit"),
        ("run", "run several stages (default: the config's list)"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name in ("recon", "run"):
            p.add_argument("--mode", choices=["fft", "zoom", "l1"])
            p.add_argument("--lambda", dest="lam", type=float, help="L1 penalty (absolute)")
            p.add_argument("--tol", type=float)
            p.add_argument("--max-iters", type=int)
            p.add_argument("--threshold", type=float, help="peak threshold, fraction of max power")

    p = sub.add_parser("zoom-plan", help="undersampling factors for frequency bands")
    p.add_argument("--band", nargs=2, type=float, action="append", metavar=("LO", "HI"), required=True)
    p.add_argument("--dt", type=float, nargs="+", required=True, help="full-sample step per axis (s)")
    p.add_argument("--factors", type=int, nargs="+")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("localize", help="position from measured channel frequencies")
    p.add_argument("--config", help="geometry source (default: U structure)")
    p.add_argument("--freq", action="append", required=True, metavar="CHANNEL=HZ")
    p.add_argument("--guess", type=_vector3, help="start point X,Y,Z (m); default: focus")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("demo", help="run a packaged demonstration")
    p.add_argument("name", nargs="?")
    p.add_argument("--list", action="store_true")
    _common(p, config_required=False)

    p = sub.add_parser("export", help="plot-ready CSV from a saved artifact")
    p.add_argument("artifact")
    p.add_argument("--kind", choices=["timeseries", "heatmap", "volume"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_recon_flags(cfg, args):
    over = {}
    for attr, key in [("mode", "mode"), ("lam", "lambda"), ("tol", "tol"), ("max_iters", "max_iters"), ("threshold", "threshold")]:
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = v
    if not over:
        return cfg
    doc = cfg.to_dict()
    doc["recon"].update(over)
    return parse_config(doc, cfg.base_dir)


def _run(args, cfg, default_stages) -> int:
    stages = _stage_list(args.stages) or default_stages
    result = run_pipeline(cfg, stages, args.out, args.seed, args.threads)
    print(json.dumps({"out_dir": str(result.out_dir), "stages": result.stages, "files": len(result.files)}))
    return EXIT_OK


def _dispatch(args) -> int:
    cmd = args.command
    if cmd in ("field", "synth", "recon", "analyze", "run"):
        cfg = validate_config(args.config)
        if cmd in ("recon", "run"):
            cfg = _apply_recon_flags(cfg, args)
        return _run(args, cfg, None if cmd == "run" else [cmd])
    if cmd == "demo":
        if args.list or not args.name:
            for n in demo_names():
                print(n)
            return EXIT_OK
        return _run(args, load_demo(args.name), None)
    if cmd == "zoom-plan":
        bands = [tuple(b) for b in args.band]
        dts = args.dt if len(args.dt) > 1 else args.dt * len(bands)
        if len(dts) != len(bands):
            raise ConfigError(["--dt: give one step or one per --band"])
        try:
            plan = plan_zoom(bands, dts, args.factors)
        except ValueError as exc:
            raise ConfigError([str(exc)]) from None
        print(json.dumps(plan.to_dict(), indent=2))
        return EXIT_OK
    if cmd == "localize":
        cfg = validate_config(args.config) if args.config else parse_config({})
        measured = {}
        for item in args.freq:
            label, _, value = item.partition("=")
            try:
                measured[label] = float(value)
            except ValueError:
                raise ConfigError([f"--freq {item!r}: expected CHANNEL=HZ"]) from None
        asm = build_assembly(cfg)
        unknown = [c for c in measured if c not in asm.channels]
        if unknown:
            raise ConfigError([f"--freq: channels {unknown} not in assembly"])
        guess = args.guess or cfg.geometry["focus"]
        try:
            loc = localize(measured, asm, cfg.geometry["currents"], build_axis(cfg), np.array(guess))
        except LocalizationError as exc:
            raise StageError("localize", str(exc)) from None
        print(json.dumps(loc.to_dict(), indent=2))
        return EXIT_OK
    if cmd == "export":
        try:
            paths = export_plotdata(args.artifact, args.kind, args.out)
        except (ValueError, FileNotFoundError) as exc:
            raise StageError("export", str(exc)) from None
        for p in paths:
            print(p)
        return EXIT_OK
    raise AssertionError(cmd)  # pragma: no cover


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except LockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LOCK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
