"""Command-line front end.

Commands
--------
``synth``             write the built-in synthetic ground-truth field
``ingest``            aggregate a trajectory file (native CSV or raw NGSIM) into a field
``estimate``          reconstruct a field from detector rows with ASM or ADMM
``sweep-coverage``    relative error versus number of detectors
``sweep-wavespeeds``  ADMM relative error and objective versus number of wave-speed pairs

Settings come from an optional ``key = value`` file (``--config``) and from
flags; flags win.  Exit codes: 0 success, 1 invalid input or configuration,
2 runtime or solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import dataclass, fields as dc_fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .admm import AdmmParams, DivergenceError
from .asm import AsmParams
from .evaluation import SWEEP_COLUMNS, coverage_sweep, evaluate, wavespeed_sweep, write_table
from .grid import (
    GridSpec,
    SpeedField,
    aggregate_samples,
    convert_ngsim,
    detector_mask,
    equally_spaced_detectors,
    read_field,
    read_trajectory_samples,
    write_field,
    write_mask,
)
from .pipeline import METHODS, EstimationConfig, run_estimation
from .synth import demo_spec, generate_field

logger = logging.getLogger("gasm")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending key."""


# -- configuration ----------------------------------------------------------

def _floats(text: str) -> tuple:
    return tuple(float(s) for s in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(s) for s in text.replace(",", " ").split())


def _pairs(text: str) -> tuple:
    """``"-15:80, -12.5:70"`` -> ``((-15.0, 80.0), (-12.5, 70.0))``."""
    out = []
    for item in text.replace(",", " ").split():
        c_cong, sep, c_free = item.partition(":")
        if not sep:
            raise ValueError(f"expected c_cong:c_free, got {item!r}")
        out.append((float(c_cong), float(c_free)))
    return tuple(out)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


@dataclass(frozen=True)
class RunConfig:
    """Every setting a command can use.  Field names double as config keys."""

    # inputs
    field: Optional[str] = None
    trajectories: Optional[str] = None
    ngsim: Optional[str] = None
    lane: Optional[int] = None
    # grid used when aggregating trajectories
    x_min: float = 0.0
    t_min: float = 0.0
    dx: float = 10.0
    dt: float = 1.0
    n_x: Optional[int] = None
    n_t: Optional[int] = None
    # time window in seconds applied to the input field
    t_start: Optional[float] = None
    t_stop: Optional[float] = None
    # detectors
    detectors: Optional[int] = 4
    detector_rows: Optional[tuple] = None
    # smoothing
    wave_speeds: tuple = (80.0, -15.0)
    sigma: Optional[float] = None
    tau: Optional[float] = None
    kernel_shape: str = "exponential"
    cutoff_radius: float = 6.0
    # fusion
    method: str = "admm"
    v_thr: float = 60.0
    delta_v: float = 20.0
    beta: float = 1.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iters: int = 5000
    # sweeps
    detector_counts: tuple = (1, 2, 3, 4, 5, 6, 7)
    speed_pairs: tuple = ((-15.0, 80.0),)
    # synthetic field
    seed: int = 7
    free_speed: Optional[float] = None
    congested_speed: Optional[float] = None
    noise_std: Optional[float] = None
    # outputs
    out: str = "out"
    trace: bool = False
    heatmaps: bool = True
    v_max: float = 120.0

    def estimation_config(self) -> EstimationConfig:
        return EstimationConfig(
            wave_speeds=tuple(self.wave_speeds),
            sigma=self.sigma,
            tau=self.tau,
            kernel_shape=self.kernel_shape,
            cutoff_radius=self.cutoff_radius,
            asm=AsmParams(self.v_thr, self.delta_v),
            admm=AdmmParams(self.beta, self.eps_abs, self.eps_rel, self.max_iters),
        )


_PARSERS = {
    "field": str, "trajectories": str, "ngsim": str, "lane": int,
    "x_min": float, "t_min": float, "dx": float, "dt": float, "n_x": int, "n_t": int,
    "t_start": _opt_float, "t_stop": _opt_float,
    "detectors": int, "detector_rows": _ints,
    "wave_speeds": _floats, "sigma": _opt_float, "tau": _opt_float,
    "kernel_shape": str, "cutoff_radius": float,
    "method": str, "v_thr": float, "delta_v": float,
    "beta": float, "eps_abs": float, "eps_rel": float, "max_iters": int,
    "detector_counts": _ints, "speed_pairs": _pairs,
    "seed": int, "free_speed": float, "congested_speed": float, "noise_std": float,
    "out": str, "trace": _bool, "heatmaps": _bool, "v_max": float,
}
assert set(_PARSERS) == {f.name for f in dc_fields(RunConfig)}


def parse_value(key: str, text: str):
    if key not in _PARSERS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _PARSERS[key](text.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from None


def load_config(path) -> dict:
    """Read a ``key = value`` file (``#`` comments, no sections)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return {key: parse_value(key, text) for key, text in cp["run"].items()}


def validate(cfg: RunConfig) -> RunConfig:
    def bad(key, why):
        raise ConfigError(f"config key {key!r}: {why}")

    if cfg.method not in METHODS:
        bad("method", f"must be one of {', '.join(METHODS)}")
    if cfg.kernel_shape not in ("exponential", "gaussian"):
        bad("kernel_shape", "must be exponential or gaussian")
    if len(cfg.wave_speeds) == 0:
        bad("wave_speeds", "must not be empty")
    if any(c == 0 for c in cfg.wave_speeds):
        bad("wave_speeds", "wave speeds must be non-zero")
    for key in ("sigma", "tau"):
        v = getattr(cfg, key)
        if v is not None and not v > 0:
            bad(key, "must be positive")
    if not cfg.cutoff_radius > 0:
        bad("cutoff_radius", "must be positive")
    if not cfg.delta_v > 0:
        bad("delta_v", "must be positive")
    if not cfg.beta > 0:
        bad("beta", "must be positive")
    if not (cfg.eps_abs > 0 and cfg.eps_rel > 0):
        bad("eps_abs" if not cfg.eps_abs > 0 else "eps_rel", "must be positive")
    if cfg.max_iters < 1:
        bad("max_iters", "must be at least 1")
    if cfg.detectors is not None and cfg.detectors < 1:
        bad("detectors", "must be at least 1")
    if cfg.detector_rows is not None and len(cfg.detector_rows) == 0:
        bad("detector_rows", "must not be empty")
    if len(cfg.detector_counts) == 0:
        bad("detector_counts", "must not be empty")
    if len(cfg.speed_pairs) == 0:
        bad("speed_pairs", "must not be empty")
    if not cfg.v_max > 0:
        bad("v_max", "must be positive")
    if not (cfg.dx > 0 and cfg.dt > 0):
        bad("dx" if not cfg.dx > 0 else "dt", "must be positive")
    if cfg.t_start is not None and cfg.t_stop is not None and not cfg.t_stop > cfg.t_start:
        bad("t_stop", "must exceed t_start")
    return cfg


# -- heatmaps ---------------------------------------------------------------

# speed 0 -> dark red, 0.5 v_max -> yellow, v_max -> dark green
COLORMAP_STOPS = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
COLORMAP_RGB = np.array([
    [128, 0, 0],
    [255, 0, 0],
    [255, 255, 0],
    [0, 200, 0],
    [0, 100, 0],
], dtype=float)


def speed_colors(values: np.ndarray, v_max: float) -> np.ndarray:
    """RGB ``uint8`` image for a speed matrix; values are clipped to
    ``[0, v_max]`` and missing cells are black."""
    s = np.clip(np.nan_to_num(values, nan=0.0) / v_max, 0.0, 1.0)
    rgb = np.stack([np.interp(s, COLORMAP_STOPS, COLORMAP_RGB[:, ch]) for ch in range(3)], axis=-1)
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[np.isnan(values)] = 0
    return rgb


def write_heatmap(path, fld: SpeedField, v_max: float) -> None:
    """Binary PPM (P6): one pixel per cell, time along the width, space along
    the height with the largest position on the top row."""
    rgb = speed_colors(fld.values, v_max)[::-1]
    height, width = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


# -- shared steps -----------------------------------------------------------

def _grid_from(cfg: RunConfig) -> GridSpec:
    if cfg.n_x is None or cfg.n_t is None:
        raise ConfigError("config keys 'n_x' and 'n_t' are required to aggregate trajectories")
    return GridSpec(cfg.x_min, cfg.t_min, cfg.dx, cfg.dt, cfg.n_x, cfg.n_t)


def _time_window(fld: SpeedField, cfg: RunConfig) -> SpeedField:
    if cfg.t_start is None and cfg.t_stop is None:
        return fld
    g = fld.grid
    start = 0 if cfg.t_start is None else int(round((cfg.t_start - g.t_min) / g.dt))
    stop = g.n_t if cfg.t_stop is None else int(round((cfg.t_stop - g.t_min) / g.dt))
    if not 0 <= start < stop <= g.n_t:
        raise ConfigError(f"config keys 't_start'/'t_stop': window [{cfg.t_start}, {cfg.t_stop}) "
                          f"outside the field's time range [{g.t_min}, {g.t_max})")
    return fld.window(start, stop)


def load_truth(cfg: RunConfig) -> SpeedField:
    """The ground-truth field named by exactly one input key, time-windowed."""
    given = [k for k in ("field", "trajectories") if getattr(cfg, k)]
    if len(given) != 1:
        raise ConfigError("exactly one of the config keys 'field' or 'trajectories' must be set")
    if cfg.field:
        fld = read_field(cfg.field)
        if not fld.is_dense:
            raise ConfigError(f"config key 'field': {cfg.field} has missing cells")
    else:
        _, t, x, v = read_trajectory_samples(cfg.trajectories)
        fld, _ = aggregate_samples(t, x, v, _grid_from(cfg))
    return _time_window(fld, cfg)


def _mask_for(truth: SpeedField, cfg: RunConfig):
    if cfg.detector_rows is not None:
        return detector_mask(truth.grid, cfg.detector_rows)
    return detector_mask(truth.grid, equally_spaced_detectors(truth.grid, cfg.detectors))


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"config key 'out': cannot create {out}: {exc}") from None
    return out


def _write_kv(path, rows: Sequence[tuple]) -> None:
    write_table(path, ("key", "value"), rows)


# -- commands ---------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    spec = demo_spec(cfg.seed)
    overrides = {k: getattr(cfg, k) for k in ("free_speed", "congested_speed", "noise_std")
                 if getattr(cfg, k) is not None}
    if overrides:
        try:
            spec = replace(spec, **overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    truth = generate_field(spec)
    out = _outdir(cfg)
    write_field(out / "truth.txt", truth)
    if cfg.heatmaps:
        write_heatmap(out / "truth.ppm", truth, cfg.v_max)
    logger.info("wrote %s (%d x %d)", out / "truth.txt", *truth.grid.shape)
    return EXIT_OK


def cmd_ingest(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    src = cfg.trajectories
    if cfg.ngsim:
        if src:
            raise ConfigError("set only one of the config keys 'ngsim' or 'trajectories'")
        src = out / "trajectories.csv"
        rows = convert_ngsim(cfg.ngsim, src, lane=cfg.lane)
        logger.info("converted %d NGSIM rows to %s", rows, src)
    if not src:
        raise ConfigError("config key 'trajectories' (or 'ngsim') is required for ingest")
    grid = _grid_from(cfg)
    _, t, x, v = read_trajectory_samples(src)
    fld, stats = aggregate_samples(t, x, v, grid)
    write_field(out / "field.txt", fld)
    _write_kv(out / "ingest.tsv", [
        ("n_x", grid.n_x), ("n_t", grid.n_t),
        ("samples_used", stats.samples_used),
        ("samples_skipped", stats.samples_skipped),
        ("cells_filled", stats.cells_filled),
    ])
    if cfg.heatmaps:
        write_heatmap(out / "field.ppm", fld, cfg.v_max)
    logger.info("wrote %s; %d samples skipped, %d cells filled",
                out / "field.txt", stats.samples_skipped, stats.cells_filled)
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    truth = load_truth(cfg)
    mask = _mask_for(truth, cfg)
    out = _outdir(cfg)
    trace_rows = []
    trace = (lambda *row: trace_rows.append(row)) if cfg.trace and cfg.method == "admm" else None
    try:
        est = run_estimation(truth, mask, cfg.method, cfg.estimation_config(), trace=trace)
    finally:
        if trace is not None:
            write_table(out / "trace.tsv", ("iter", "objective", "r_primal", "r_dual"), trace_rows)

    write_field(out / "estimate.txt", est.field)
    write_mask(out / "mask.txt", mask)
    for i, w in enumerate(est.weights):
        write_field(out / f"weights_{i}.txt", SpeedField.unchecked(truth.grid, w))
    report = evaluate(est.field, truth, cfg.v_thr)
    rows = [
        ("method", est.method),
        ("relative_error", report.relative_error),
        ("cell_count", report.cell_count),
        ("negative_speed_cells", report.negative_speed_cells),
        ("observed_rows", " ".join(map(str, mask.observed_rows()))),
        ("wave_speeds", " ".join(repr(float(c)) for c in cfg.wave_speeds)),
    ]
    rows += [(f"relative_error_{label}", err) for label, err in report.per_region_errors.items()]
    if est.admm is not None:
        r = est.admm
        rows += [("converged", r.converged), ("iters", r.iters), ("objective", r.objective),
                 ("r_primal", r.final_residuals[0]), ("r_dual", r.final_residuals[1])]
    _write_kv(out / "report.tsv", rows)
    if cfg.heatmaps:
        write_heatmap(out / "truth.ppm", truth, cfg.v_max)
        write_heatmap(out / "input.ppm", SpeedField.unchecked(truth.grid, np.where(mask.mask, truth.values, np.nan)),
                      cfg.v_max)
        write_heatmap(out / "estimate.ppm", est.field, cfg.v_max)
    logger.info("%s relative error %.5f", est.method, report.relative_error)
    return EXIT_OK


def _sweep_rows(method, points):
    return [(method, *(getattr(p, c) for c in SWEEP_COLUMNS)) for p in points]


def cmd_sweep_coverage(cfg: RunConfig, methods: Sequence[str]) -> int:
    truth = load_truth(cfg)
    out = _outdir(cfg)
    rows = []
    for method in methods:
        points = coverage_sweep(truth, cfg.detector_counts, method, cfg.estimation_config())
        rows += _sweep_rows(method, points)
        for p in points:
            logger.info("%s detectors=%d relative error %.5f", method, p.key, p.relative_error)
    write_table(out / "coverage.tsv", ("method", *SWEEP_COLUMNS), rows)
    return EXIT_OK


def cmd_sweep_wavespeeds(cfg: RunConfig) -> int:
    truth = load_truth(cfg)
    mask = _mask_for(truth, cfg)
    out = _outdir(cfg)
    points = wavespeed_sweep(truth, mask, cfg.speed_pairs, cfg.estimation_config())
    for p in points:
        logger.info("m=%d relative error %.5f objective %.6g", p.key, p.relative_error, p.objective)
    write_table(out / "wavespeeds.tsv", ("method", *SWEEP_COLUMNS), _sweep_rows("admm", points))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit code 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value settings file; flags override it")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, help="seed of the synthetic field")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    inputs = argparse.ArgumentParser(add_help=False)
    src = inputs.add_mutually_exclusive_group()
    src.add_argument("--field", metavar="PATH", help="ground-truth field in the native text format")
    src.add_argument("--trajectories", metavar="PATH", help="trajectory CSV aggregated onto the configured grid")

    estimation = argparse.ArgumentParser(add_help=False)
    estimation.add_argument("--wave-speeds", metavar="LIST", help="comma-separated wave speeds in km/h")
    estimation.add_argument("--beta", type=float, help="ADMM penalty parameter")

    detectors = argparse.ArgumentParser(add_help=False)
    det = detectors.add_mutually_exclusive_group()
    det.add_argument("--detectors", type=int, metavar="N", help="number of equally spaced detector rows")
    det.add_argument("--detector-rows", metavar="LIST", help="explicit comma-separated detector rows")

    parser = _Parser(prog="gasm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="write the synthetic ground-truth field")

    p = sub.add_parser("ingest", parents=[common], help="aggregate trajectories into a field")
    p.add_argument("--trajectories", metavar="PATH", help="native trajectory CSV")
    p.add_argument("--ngsim", metavar="PATH", help="raw NGSIM trajectory file to convert first")
    p.add_argument("--lane", type=int, help="keep only this NGSIM lane")

    p = sub.add_parser("estimate", parents=[common, inputs, estimation, detectors],
                       help="estimate a field from detector rows")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--trace", action="store_true", default=None, help="write the ADMM residual trace")

    p = sub.add_parser("sweep-coverage", parents=[common, inputs, estimation],
                       help="relative error versus detector count")
    p.add_argument("--method", choices=METHODS, help="default: both methods")
    p.add_argument("--counts", metavar="LIST", help="comma-separated detector counts")

    p = sub.add_parser("sweep-wavespeeds", parents=[common, inputs, estimation, detectors],
                       help="ADMM error versus number of wave-speed pairs")
    p.add_argument("--pairs", metavar="LIST", help="c_cong:c_free pairs, e.g. -15:80,-12.5:70")
    return parser


# flag destination -> config key, for flags holding raw text
_TEXT_FLAGS = {"wave_speeds": "wave_speeds", "detector_rows": "detector_rows",
               "counts": "detector_counts", "pairs": "speed_pairs"}
_TYPED_FLAGS = ("out", "seed", "field", "trajectories", "ngsim", "lane", "beta", "detectors",
                "method", "trace")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then ``--set`` overrides, then flags."""
    values = load_config(args.config) if args.config else {}
    for item in args.set:
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        values[key.strip()] = parse_value(key.strip(), text)
    for dest, key in _TEXT_FLAGS.items():
        text = getattr(args, dest, None)
        if text is not None:
            values[key] = parse_value(key, text)
    for dest in _TYPED_FLAGS:
        v = getattr(args, dest, None)
        if v is not None:
            values[dest] = v
    if getattr(args, "detectors", None) is not None:
        values["detector_rows"] = None
    elif getattr(args, "detector_rows", None) is not None:
        values["detectors"] = None
    return validate(RunConfig(**values))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        if args.command == "sweep-coverage":
            return cmd_sweep_coverage(cfg, [args.method] if args.method else list(METHODS))
        return cmd_sweep_wavespeeds(cfg)
    except DivergenceError as exc:
        print(f"gasm: solver failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ValueError, OSError) as exc:
        print(f"gasm: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"gasm: runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
