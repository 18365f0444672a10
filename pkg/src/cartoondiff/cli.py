"""Command-line front end.

Exit codes: 0 success, 2 usage, 3 I/O, 4 file format, 5 numerical failure.
Options are resolved as flags > config file (``key = value``) > defaults;
the thread count can also come from ``CARTOONDIFF_THREADS``.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .diffusivity import from_name
from .edges import detect_edges, detect_edges_slices, edge_map_from_volume
from .errors import (
    ConvergenceError,
    DegenerateMeanError,
    DominanceError,
    FormatError,
    NotSettledError,
    StabilityError,
)
from .grid import ImageVolume, load_pgm, load_raw3d, normalize, save_pgm, save_raw3d
from .params import _score, estimate_gamma, parse_p_grid, tune_p
from .solver import Auto, FilterConfig, filter_run
from .stopping import settling_time

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5

THREADS_ENV = "CARTOONDIFF_THREADS"
PROG = "cartoondiff"

log = logging.getLogger(PROG)

DIFFUSIVITIES = ("proposed", "perona-malik", "regularized", "linear")


class UsageError(Exception):
    pass


# --- option converters (shared by flags and the config file) ---------------------

def _positive_float(text):
    x = float(text)
    if not (x > 0 and math.isfinite(x)):
        raise ValueError(f"expected a positive number, got {text!r}")
    return x


def _nonneg_int(text):
    x = int(text)
    if x < 0:
        raise ValueError(f"expected a nonnegative integer, got {text!r}")
    return x


def _threads(text):
    x = int(text)
    if x < 1:
        raise ValueError(f"thread count must be >= 1, got {text!r}")
    return x


def _auto_or(conv):
    def parse(text):
        text = str(text).strip()
        return "auto" if text.lower() == "auto" else conv(text)
    parse.__name__ = conv.__name__
    return parse


def _diffusivity(text):
    key = text.strip().lower().replace("_", "-")
    if key not in DIFFUSIVITIES:
        raise ValueError(f"unknown diffusivity {text!r} (choose from {', '.join(DIFFUSIVITIES)})")
    return key


def _unit(text):
    x = float(text)
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"expected a value in [0, 1], got {text!r}")
    return x


CONVERTERS = {
    "k": _positive_float,
    "p": float,
    "gamma": _auto_or(_positive_float),
    "steps": _auto_or(_nonneg_int),
    "diffusivity": _diffusivity,
    "picard": _nonneg_int,
    "tau": _positive_float,
    "eps": _positive_float,
    "threshold": _positive_float,
    "sigma": _positive_float,
    "p_grid": str,
    "alpha": _unit,
    "tolerance": _nonneg_int,
    "threads": _threads,
    "a": _diffusivity,
    "b": _diffusivity,
}

DEFAULTS = {
    "k": 200.0,
    "p": 2.5,
    "gamma": "auto",
    "steps": "auto",
    "diffusivity": "proposed",
    "picard": 0,
    "tau": None,
    "eps": None,
    "threshold": 0.02,
    "sigma": 1.0,
    "p_grid": "1.5:0.5:20",
    "alpha": 0.5,
    "tolerance": 0,
    "threads": None,
    "a": "proposed",
    "b": "linear",
}


def read_config(path) -> dict:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    out = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if not sep or not key:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        if key not in CONVERTERS:
            raise UsageError(f"{path}:{lineno}: unknown option {key!r}")
        try:
            out[key] = CONVERTERS[key](value.strip())
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
    return out


def resolve_options(args, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        opts.update(read_config(args.config))
    env = environ.get(THREADS_ENV)
    if env:
        try:
            opts["threads"] = _threads(env)
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV}: {exc}") from None
    opts.update({key: val for key, val in vars(args).items() if key in DEFAULTS})
    if opts["threads"] is None:
        opts["threads"] = os.cpu_count() or 1
    return opts


# --- file I/O ---------------------------------------------------------------------------

def _is_raw(path: Path) -> bool:
    return path.suffix.lower() == ".hdr"


def read_volume(path) -> ImageVolume:
    """PGM, or a raw volume given by its ``.hdr`` header (payload in the sibling ``.raw``)."""
    path = Path(path)
    if _is_raw(path):
        v = load_raw3d(path.read_text(), path.with_suffix(".raw").read_bytes())
        if v.data.min() < 0.0 or v.data.max() > 1.0:
            v = normalize(v)
        return v
    return load_pgm(path.read_bytes())


def write_volume(path, v: ImageVolume, dtype: str = "f32") -> None:
    path = Path(path)
    if _is_raw(path):
        header, payload = save_raw3d(v, dtype=dtype)
        path.write_text(header)
        path.with_suffix(".raw").write_bytes(payload)
    else:
        path.write_bytes(save_pgm(v))


# --- pipeline pieces ---------------------------------------------------------------

class _Gamma:
    """Lazily estimated gamma, computed at most once per command."""

    def __init__(self, v, setting):
        self.v, self.setting, self._value = v, setting, None

    def __call__(self) -> float:
        if self._value is None:
            self._value = estimate_gamma(self.v) if self.setting == "auto" else float(self.setting)
        return self._value


def build_diffusivity(name: str, opts: dict, gamma: _Gamma):
    kw = {"p": opts["p"]}
    if name == "proposed":
        kw["gamma"] = gamma()
    elif name == "perona-malik":
        kw["tau"] = opts["tau"] if opts["tau"] is not None else math.sqrt(gamma())
    elif name == "regularized":
        kw["eps"] = opts["eps"] if opts["eps"] is not None else math.sqrt(gamma())
    return from_name(name, **kw)


def _steps(opts):
    return Auto(threshold=opts["threshold"]) if opts["steps"] == "auto" else int(opts["steps"])


def _edge_map(v: ImageVolume, sigma: float):
    if v.ndim == 2:
        return detect_edges(v, sigma=sigma).mask
    if v.ndim == 3:
        return detect_edges_slices(v, sigma=sigma)
    raise FormatError("edge detection needs a 2-D image or 3-D volume")


def _read_truth(path, v):
    truth = edge_map_from_volume(read_volume(path))
    if truth.dims != v.dims:
        raise FormatError(f"ground truth is {truth.dims}, image is {v.dims}")
    return truth


# --- commands ---------------------------------------------------------------------------

def cmd_filter(args, opts, out):
    v = read_volume(args.input)
    gamma = _Gamma(v, opts["gamma"])
    spec = build_diffusivity(opts["diffusivity"], opts, gamma)
    cfg = FilterConfig(k=opts["k"], steps=_steps(opts), diffusivity=spec, picard_depth=opts["picard"])
    result, diag = filter_run(v, cfg)
    write_volume(args.output, result)
    if args.diagnostics != "none":
        dpath = Path(args.diagnostics) if args.diagnostics else Path(args.output).with_suffix(".csv")
        dpath.write_text(diag.to_csv())
    print(f"steps={diag.steps} k={opts['k']!r} diffusivity={opts['diffusivity']}", file=out)
    return EXIT_OK


def cmd_settle(args, opts, out):
    v = read_volume(args.input)
    res = settling_time(v, opts["k"], threshold=opts["threshold"])
    print(f"n={res.n} T={res.T!r} ratio={res.ratio!r}", file=out)
    return EXIT_OK


def cmd_estimate_gamma(args, opts, out):
    v = read_volume(args.input)
    print(repr(estimate_gamma(v)), file=out)
    return EXIT_OK


def cmd_tune(args, opts, out):
    v = read_volume(args.input)
    if v.ndim != 2:
        raise FormatError("tuning works on 2-D images")
    truth = _read_truth(args.truth, v)
    try:
        grid = parse_p_grid(opts["p_grid"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    gamma = None if opts["gamma"] == "auto" else opts["gamma"]
    if opts["steps"] == "auto":
        n = settling_time(v, opts["k"], threshold=opts["threshold"]).n
    else:
        n = opts["steps"]
    report = tune_p(v, truth, grid, opts["k"], opts["alpha"], gamma=gamma, n=n,
                    tolerance=opts["tolerance"], threads=opts["threads"],
                    edge_kw={"sigma": opts["sigma"]})
    if args.output:
        Path(args.output).write_text(report.to_csv())
        print(report.summary(), file=out)
    else:
        out.write(report.to_csv())
        print(report.summary(), file=sys.stderr)
    for flag in report.flags:
        print(f"{PROG}: warning: {flag}", file=sys.stderr)
    return EXIT_OK


def cmd_edges(args, opts, out):
    v = read_volume(args.input)
    mask = _edge_map(v, opts["sigma"])
    write_volume(args.output, ImageVolume(mask.astype(np.float64), v.spacing), dtype="u8")
    print(f"edges={int(np.count_nonzero(mask))}", file=out)
    return EXIT_OK


def cmd_compare(args, opts, out):
    v = read_volume(args.input)
    if v.ndim != 2:
        raise FormatError("compare works on 2-D images")
    truth = _read_truth(args.truth, v)
    gamma = _Gamma(v, opts["gamma"])
    steps = _steps(opts)
    if isinstance(steps, Auto):
        steps = settling_time(v, opts["k"], threshold=steps.threshold).n
    for label in ("a", "b"):
        name = opts[label]
        spec = build_diffusivity(name, opts, gamma)
        cfg = FilterConfig(k=opts["k"], steps=steps, diffusivity=spec, picard_depth=opts["picard"])
        result, _ = filter_run(v, cfg)
        precision, recall, f, _ = _score(truth, result, opts["alpha"], opts["tolerance"],
                                         {"sigma": opts["sigma"]})
        print(f"{label}={name} P={precision:.6f} R={recall:.6f} F={f:.6f} n={steps}", file=out)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------------

def _opt(parser, *names, key, help):
    parser.add_argument(*names, dest=key, type=CONVERTERS[key], default=argparse.SUPPRESS,
                        help=f"{help} (default: {DEFAULTS[key]})")


def build_parser() -> argparse.ArgumentParser:
    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("--config", metavar="FILE", help="'key = value' option file; flags take precedence")
    _opt(base, "--threads", key="threads",
         help=f"worker threads for the p sweep, also read from ${THREADS_ENV}; default is the CPU count")

    time_opts = argparse.ArgumentParser(add_help=False)
    _opt(time_opts, "--k", key="k", help="time step")
    _opt(time_opts, "--threshold", key="threshold", help="settling threshold on the relative distance to the mean")

    run_opts = argparse.ArgumentParser(add_help=False)
    _opt(run_opts, "--gamma", key="gamma", help="diffusivity threshold, 'auto' estimates it from the gradient MAD")
    _opt(run_opts, "--steps", key="steps", help="number of steps, 'auto' uses the settling time")

    model_opts = argparse.ArgumentParser(add_help=False)
    _opt(model_opts, "--p", key="p", help="decay exponent of the proposed and regularized diffusivities")
    _opt(model_opts, "--diffusivity", key="diffusivity", help="one of " + ", ".join(DIFFUSIVITIES))
    _opt(model_opts, "--picard", key="picard", help="extra fixed-point iterations per step (0 = semi-implicit)")
    _opt(model_opts, "--tau", key="tau", help="Perona-Malik contrast parameter; unset means sqrt(gamma)")
    _opt(model_opts, "--eps", key="eps", help="regularization of the power diffusivity; unset means sqrt(gamma)")

    edge_opts = argparse.ArgumentParser(add_help=False)
    _opt(edge_opts, "--sigma", key="sigma", help="Gaussian scale of the edge detector")

    score_opts = argparse.ArgumentParser(add_help=False)
    _opt(score_opts, "--alpha", key="alpha", help="F-measure weight")
    _opt(score_opts, "--tolerance", key="tolerance", help="edge match distance in pixels")

    parser = argparse.ArgumentParser(prog=PROG, description="Edge-preserving nonlinear diffusion filter.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("filter", parents=[base, time_opts, run_opts, model_opts],
                       help="filter an image or volume")
    p.add_argument("input", help="input .pgm or .hdr")
    p.add_argument("output", help="output .pgm or .hdr")
    p.add_argument("--diagnostics", metavar="CSV", default=None,
                   help="per-step diagnostics file, 'none' to skip (default: output with .csv suffix)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("settle", parents=[base, time_opts], help="print the settling step count")
    p.add_argument("input")
    p.set_defaults(func=cmd_settle)

    p = sub.add_parser("estimate-gamma", aliases=["estimate_gamma"], parents=[base],
                       help="print the MAD estimate of gamma")
    p.add_argument("input")
    p.set_defaults(func=cmd_estimate_gamma)

    p = sub.add_parser("tune", parents=[base, time_opts, run_opts, edge_opts, score_opts],
                       help="choose p by F-measure against ground-truth edges")
    p.add_argument("input")
    p.add_argument("truth", help="edge map, nonzero pixels are edges")
    _opt(p, "--p-grid", key="p_grid", help="start:step:stop or a comma list")
    p.add_argument("-o", "--output", metavar="CSV", help="report file (default: stdout)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("edges", parents=[base, edge_opts], help="write a Canny edge map")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_edges)

    p = sub.add_parser("compare", parents=[base, time_opts, run_opts, model_opts, edge_opts, score_opts],
                       help="F-measures of two diffusivities on the same input")
    p.add_argument("input")
    p.add_argument("truth", help="edge map, nonzero pixels are edges")
    _opt(p, "--a", key="a", help="first diffusivity")
    _opt(p, "--b", key="b", help="second diffusivity")
    p.set_defaults(func=cmd_compare)
    return parser


def _fail(code, msg):
    print(f"{PROG}: error: {msg}", file=sys.stderr)
    return code


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING, format=f"{PROG}: %(levelname)s: %(message)s")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            opts = resolve_options(args)
            code = args.func(args, opts, out)
        for w in caught:
            print(f"{PROG}: warning: {w.message}", file=sys.stderr)
        return code
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except FormatError as exc:
        return _fail(EXIT_FORMAT, exc)
    except (NotSettledError, DegenerateMeanError, DominanceError, ConvergenceError,
            StabilityError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, exc)
    except OSError as exc:
        return _fail(EXIT_IO, exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, exc)
