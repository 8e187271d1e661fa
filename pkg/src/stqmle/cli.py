"""Command-line entry point: ``stqmle {simulate,fit,mc-study,bench}``.

Settings come from three layers, later ones winning: built-in defaults, a
flat ``key = value`` config file (``--config``), then command-line flags.
The thread count can also be set through ``STQMLE_THREADS``.

Exit codes: 0 on success, 1 for unreadable or malformed inputs, 2 for model
or configuration errors (infeasible parameters, singular design, empty
Monte Carlo summary).
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, DimensionMismatch, InputError, StqmleError, SymmetryError
from .inference import default_block_side, infer, theta_subsampling_se
from .io import (
    file_checksum,
    read_config,
    read_coords_csv,
    read_matrix_market,
    read_panel_csv,
    write_coords_csv,
    write_json,
    write_matrix_market,
    write_panel_csv,
    atomic_write_text,
)
from .kernels import BACKEND
from .model import (
    DependenceParams,
    ModelParams,
    SpatialWeights,
    feasibility_check,
    load_weights_cache,
    save_weights_cache,
)
from .optimizer import OptimizerConfig, fit
from .simulate import (
    PRESETS,
    SimulationDesign,
    grid_adjacency,
    grid_coords,
    make_grid_weights,
    run_monte_carlo,
    simulate_panel,
)

log = logging.getLogger("stqmle")

EXIT_OK = 0
EXIT_IO = 1
EXIT_MODEL = 2

# config key -> parser; anything else in a config file is rejected
_FLOAT_LIST = lambda s: tuple(float(v) for v in str(s).replace(" ", "").split(",") if v)  # noqa: E731
_INT_LIST = lambda s: tuple(int(v) for v in str(s).replace(" ", "").split(",") if v)  # noqa: E731


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


CONFIG_KEYS = {
    # simulation design
    "preset": str,
    "n": int,
    "T": int,
    "order": str,
    "innovation": str,
    "df": float,
    "burn_in": int,
    "reps": int,
    "beta": _FLOAT_LIST,
    "lambda": float,
    "gamma": float,
    "rho": float,
    "sigma2": float,
    # optimizer
    "max_iters": int,
    "grad_tol": float,
    "step_tol": float,
    "initial_theta": _FLOAT_LIST,
    "feasibility": str,
    "gradient": str,
    "multistart": _bool,
    "joint": _bool,
    # inference
    "level": float,
    "subsample": _bool,
    "block_side": float,
    "min_block_cells": int,
    # run plumbing
    "seed": int,
    "threads": int,
    "log_level": str,
    "weights_cache": _bool,
    "diagnostics": _bool,
    # benchmark
    "sides": _INT_LIST,
    "repeats": int,
    "strip_width": int,
    "strip_lengths": _INT_LIST,
    "compare_backends": _bool,
}

DEFAULTS = {
    "preset": "default",
    "n": 10,
    "T": 5,
    "order": "first",
    "innovation": "gaussian",
    "df": math.inf,
    "burn_in": 200,
    "reps": 100,
    "level": 0.95,
    "subsample": False,
    "min_block_cells": 100,
    "seed": 0,
    "log_level": "WARNING",
    "weights_cache": False,
    "diagnostics": False,
    "sides": (50, 100, 200),
    "repeats": 3,
    "strip_width": 25,
    "strip_lengths": (),
    "compare_backends": True,
}

COMMAND_DEFAULTS = {"bench": {"T": 10}}

_OPT_KEYS = ("max_iters", "grad_tol", "step_tol", "initial_theta", "feasibility", "gradient", "multistart", "joint")


def _parse_config(raw: dict, path) -> dict:
    out = {}
    for key, text in raw.items():
        if key not in CONFIG_KEYS:
            raise InputError(f"unknown config key {key!r}", path)
        try:
            out[key] = CONFIG_KEYS[key](text)
        except ValueError as exc:
            raise InputError(f"bad value for {key!r}: {exc}", path) from None
    return out


def default_threads():
    env = os.environ.get("STQMLE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"STQMLE_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError("STQMLE_THREADS must be positive")
        return n
    return os.cpu_count() or 1


def resolve_settings(args) -> dict:
    """Merge defaults, the config file and flags into one dict."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    if args.config is not None:
        cfg.update(_parse_config(read_config(args.config), args.config))
    for key in CONFIG_KEYS:
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    if os.environ.get("STQMLE_THREADS"):
        cfg["threads"] = default_threads()
    cfg.setdefault("threads", default_threads())
    if cfg["threads"] < 1:
        raise ConfigError("threads must be positive")
    if not 0.0 < cfg["level"] < 1.0:
        raise ConfigError(f"level must lie in (0, 1), got {cfg['level']}")
    return cfg


def optimizer_config(cfg: dict) -> OptimizerConfig:
    kw = {k: cfg[k] for k in _OPT_KEYS if k in cfg}
    kw["seed"] = cfg["seed"]
    try:
        return OptimizerConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def simulation_design(cfg: dict) -> SimulationDesign:
    name = cfg["preset"]
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    beta, theta, sigma2 = PRESETS[name]
    beta = cfg.get("beta", beta)
    theta = tuple(cfg.get(key, v) for key, v in zip(("lambda", "gamma", "rho"), theta))
    sigma2 = cfg.get("sigma2", sigma2)
    overridden = any(key in cfg for key in ("beta", "lambda", "gamma", "rho", "sigma2"))
    try:
        params = ModelParams(np.array(beta, dtype=np.float64), DependenceParams(*theta), sigma2)
        return SimulationDesign(
            n=cfg["n"],
            T=cfg["T"],
            params=params,
            order=cfg["order"],
            innovation=cfg["innovation"],
            df=cfg["df"],
            burn_in=cfg["burn_in"],
            n_reps=cfg["reps"],
            seed=cfg["seed"],
            preset=f"{name}+overrides" if overridden else name,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _versions():
    out = {
        "stqmle": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "backend": BACKEND,
    }
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


class Run:
    """Collects inputs and outputs of one command and writes ``manifest.json``."""

    def __init__(self, command, out_dir, settings, argv):
        self.command = command
        self.out = Path(out_dir)
        self.settings = settings
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = {}
        self.started = time.time()

    def add_input(self, role, path):
        if path is not None:
            self.inputs[role] = {"path": str(path), "sha256": file_checksum(path)}

    def path(self, name):
        return self.out / name

    def wrote(self, name):
        self.outputs[name] = file_checksum(self.path(name))

    def write_text(self, name, text):
        atomic_write_text(self.path(name), text)
        self.wrote(name)

    def write_json(self, name, obj):
        write_json(self.path(name), obj)
        self.wrote(name)

    def finish(self, status, error=None):
        doc = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "error": error,
            "settings": self.settings,
            "seed": self.settings.get("seed"),
            "versions": _versions(),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": time.time() - self.started,
        }
        write_json(self.path("manifest.json"), doc)


@contextlib.contextmanager
def _executor(threads):
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            yield ex
    else:
        yield None


def _load_weights(path, coords, use_cache):
    w = read_matrix_market(path)
    cache_path = Path(str(path) + ".stqmle.json")
    sw = load_weights_cache(cache_path, w, coords) if use_cache else None
    if sw is None:
        sw = SpatialWeights.from_sparse(w, coords=coords)
        if use_cache:
            try:
                save_weights_cache(sw, cache_path)
            except OSError as exc:
                log.warning("could not write weights cache %s: %s", cache_path, exc)
    else:
        log.info("loaded ordering and spectrum bounds from %s", cache_path)
    return sw


def _weights_summary(w: SpatialWeights):
    out = {"N": w.N, "bandwidth": w.bandwidth, "d_min": w.d_min, "d_max": w.d_max, "checksum": w.checksum}
    if w.eig is not None:
        out["lanczos"] = {
            "residuals": list(w.eig.residuals),
            "restarts": w.eig.restarts,
            "matvecs": w.eig.matvecs,
            "seed": w.eig.seed,
        }
    return out


def cmd_fit(args, run: Run) -> int:
    s = run.settings
    if args.weights is None or args.panel is None:
        raise ConfigError("fit needs --weights and --panel")
    run.add_input("weights", args.weights)
    run.add_input("panel", args.panel)
    run.add_input("coords", args.coords)
    coords = read_coords_csv(args.coords) if args.coords else None
    t0 = time.perf_counter()
    w = _load_weights(args.weights, coords, s["weights_cache"])
    t_weights = time.perf_counter() - t0
    data = read_panel_csv(args.panel, expected_N=w.N)
    cfg = optimizer_config(s)
    t0 = time.perf_counter()
    params, diag = fit(data, w, cfg)
    t_fit = time.perf_counter() - t0
    t0 = time.perf_counter()
    report = infer(data, params, w, alpha=1.0 - s["level"])
    if s["subsample"]:
        if coords is None:
            raise ConfigError("subsample = true needs --coords")
        side = s.get("block_side") or default_block_side(w.N)
        with _executor(s["threads"]) as ex:
            sub = theta_subsampling_se(data, w, cfg, side, min_cells=s["min_block_cells"], executor=ex)
        report.theta_se = sub.se
        report.subsampling = sub
        report.methods["theta_se"] = f"spatial block subsampling (side {side})"
    t_inf = time.perf_counter() - t0
    if not diag.converged:
        report.caveats.append(f"optimizer stopped with status {diag.status!r}")
    doc = {
        "estimates": params.to_dict(),
        "inference": report.to_dict(),
        "loglik": diag.loglik_trace[-1] if diag.loglik_trace else None,
        "diagnostics": diag.to_dict(),
        "weights": _weights_summary(w),
        "timings": {"weights_s": t_weights, "fit_s": t_fit, "inference_s": t_inf},
        "N": data.N,
        "T": data.T,
        "k": data.k,
    }
    run.write_json("fit.json", doc)
    run.write_text("coefficients.csv", report.coefficients_csv())
    if s["diagnostics"]:
        run.write_json(
            "weights_diagnostics.json",
            {**_weights_summary(w), "permutation": w.permutation.forward.tolist()},
        )
    print(report.coefficients_csv(), end="")
    return EXIT_OK


def cmd_simulate(args, run: Run) -> int:
    design = simulation_design(run.settings)
    w_sparse = grid_adjacency(design.n, design.order)
    w = SpatialWeights.from_sparse(w_sparse, coords=grid_coords(design.n))
    verdict = feasibility_check(w, design.params.theta)
    if not verdict.feasible:
        from .errors import InfeasibleTheta

        raise InfeasibleTheta(
            f"true theta {design.params.theta.to_dict()} violates {', '.join(verdict.violated)}",
            verdict.violated,
        )
    data = simulate_panel(design, w)
    write_matrix_market(run.path("weights.mtx"), w_sparse)
    run.wrote("weights.mtx")
    write_panel_csv(run.path("panel.csv"), data)
    run.wrote("panel.csv")
    write_coords_csv(run.path("coords.csv"), grid_coords(design.n))
    run.wrote("coords.csv")
    run.write_json("design.json", {**design.to_dict(), "d_min": w.d_min, "d_max": w.d_max})
    return EXIT_OK


def cmd_mc_study(args, run: Run) -> int:
    s = run.settings
    design = simulation_design(s)
    cfg = optimizer_config(s)
    w = make_grid_weights(design.n, design.order)
    with _executor(s["threads"]) as ex:
        summary = run_monte_carlo(design, cfg, w, executor=ex, level=s["level"])
    run.write_text("summary.csv", summary.to_csv())
    run.write_json("summary.json", summary.to_dict(include_raw=True))
    if summary.empty:
        log.error("empty Monte Carlo summary: %d replications requested, none succeeded", summary.n_requested)
        return EXIT_MODEL
    print(summary.to_csv(), end="")
    return EXIT_OK


def cmd_bench(args, run: Run) -> int:
    from . import bench

    s = run.settings
    cfg = optimizer_config(s)

    def progress(p):
        log.info("%s: median fit %.3fs over %d runs", p.label, p.median_fit_time, len(p.fit_times))

    ladders = [bench.grid_ladder(s["sides"], s["T"], s["repeats"], cfg, progress)]
    if s["strip_lengths"]:
        ladders.append(bench.strip_ladder(s["strip_lengths"], s["strip_width"], s["T"], s["repeats"], cfg, progress))
    doc = {"ladders": [lad.to_dict() for lad in ladders]}
    if s["compare_backends"]:
        doc["backends"] = bench.compare_backends(n=min(s["sides"]))
    rows = [",".join(bench.CSV_HEADER)]
    for lad in ladders:
        rows.extend(",".join(str(v) for v in r) for r in lad.csv_rows())
    run.write_text("timing.csv", "\n".join(rows) + "\n")
    run.write_json("bench.json", doc)
    for lad in ladders:
        if lad.slope is None:
            print(f"{lad.name}: {lad.note}")
        else:
            print(f"{lad.name}: log-log slope of median fit time vs N = {lad.slope:.3f}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "mc-study": cmd_mc_study, "bench": cmd_bench}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="worker processes (env STQMLE_THREADS)")
    common.add_argument("--level", type=float, help="confidence level (default 0.95)")
    common.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")

    design = argparse.ArgumentParser(add_help=False)
    design.add_argument("--preset", choices=sorted(PRESETS))
    design.add_argument("--n", type=int, help="grid side (N = n^2)")
    design.add_argument("--T", type=int, help="number of time points")
    design.add_argument("--order", choices=["first", "second"])
    design.add_argument("--sigma2", type=float)
    design.add_argument("--burn-in", dest="burn_in", type=int)

    p = argparse.ArgumentParser(prog="stqmle", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit a panel and report inference")
    f.add_argument("--weights", type=Path, help="Matrix Market weight matrix")
    f.add_argument("--panel", type=Path, help="long CSV cell_id,time,y,x1..xk")
    f.add_argument("--coords", type=Path, help="CSV cell_id,x,y (needed for subsampling)")
    f.add_argument("--subsample", action="store_const", const=True, help="theta SEs by block subsampling")
    f.add_argument("--weights-cache", dest="weights_cache", action="store_const", const=True)
    f.add_argument("--diagnostics", action="store_const", const=True, help="write weights_diagnostics.json")

    sub.add_parser("simulate", parents=[common, design], help="write weights and a simulated panel")

    m = sub.add_parser("mc-study", parents=[common, design], help="Monte Carlo study")
    m.add_argument("--reps", type=int)

    b = sub.add_parser("bench", parents=[common], help="timing ladder and backend comparison")
    b.add_argument("--sides", type=_INT_LIST, help="comma-separated grid sides")
    b.add_argument("--T", type=int)
    b.add_argument("--repeats", type=int)
    b.add_argument("--strip-lengths", dest="strip_lengths", type=_INT_LIST)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    try:
        settings = resolve_settings(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    level = str(settings["log_level"]).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    run = Run(args.command, args.out, settings, argv)
    try:
        code = COMMANDS[args.command](args, run)
    except (InputError, SymmetryError, DimensionMismatch, OSError) as exc:
        code, err = EXIT_IO, f"{type(exc).__name__}: {exc}"
    except (StqmleError, ValueError) as exc:
        code, err = EXIT_MODEL, f"{type(exc).__name__}: {exc}"
    else:
        err = None
    if err is not None:
        print(f"error: {err}", file=sys.stderr)
    try:
        run.finish("ok" if code == EXIT_OK else "failed", err)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
