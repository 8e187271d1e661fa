"""Timing and memory benchmarks: fit-time scaling ladders and a backend comparison.

Memory is reported two ways. ``tracemalloc`` sees allocations made through
Python and numpy but not those made inside numba's runtime, so the process
high-water mark from ``getrusage`` is reported alongside it. The latter is
cumulative over the process, which is why ladders run in ascending order.
"""

from __future__ import annotations

import math
import resource
import statistics
import sys
import time
import tracemalloc
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels import load_backend
from .likelihood import LikelihoodWorkspace, concentrated_loglik
from .model import SpatialWeights
from .optimizer import OptimizerConfig, fit
from .simulate import SimulationDesign, make_grid_weights, make_strip_weights, simulate_panel

DEFAULT_SIDES = (50, 100, 200)
DEFAULT_T = 10


def _max_rss_bytes():
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    # kilobytes on Linux, bytes on macOS
    return rss if sys.platform == "darwin" else rss * 1024


@dataclass
class BenchPoint:
    label: str
    N: int
    T: int
    bandwidth: int
    setup_time: float
    loglik_time: float
    fit_times: list
    fit_iterations: int
    factorizations: int
    tracemalloc_peak: int
    max_rss: int

    @property
    def median_fit_time(self):
        return statistics.median(self.fit_times)

    def to_dict(self):
        out = asdict(self)
        out["median_fit_time"] = self.median_fit_time
        return out


@dataclass
class LadderResult:
    name: str
    points: list
    slope: float | None = None
    intercept: float | None = None
    note: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "name": self.name,
            "points": [p.to_dict() for p in self.points],
            "slope": self.slope,
            "intercept": self.intercept,
            "note": self.note,
            **self.extra,
        }

    def csv_rows(self):
        for p in self.points:
            yield (
                self.name,
                p.label,
                p.N,
                p.T,
                p.bandwidth,
                p.setup_time,
                p.loglik_time,
                p.median_fit_time,
                p.fit_iterations,
                p.factorizations,
                p.tracemalloc_peak,
                p.max_rss,
            )


CSV_HEADER = (
    "ladder",
    "label",
    "N",
    "T",
    "bandwidth",
    "setup_s",
    "loglik_s",
    "median_fit_s",
    "iterations",
    "factorizations",
    "tracemalloc_peak_bytes",
    "max_rss_bytes",
)


def loglog_slope(Ns, times):
    """Least-squares slope of ``log(time)`` on ``log(N)``; None with fewer than two sizes."""
    Ns = np.asarray(Ns, dtype=np.float64)
    if np.unique(Ns).size < 2:
        return None, None
    slope, intercept = np.polyfit(np.log(Ns), np.log(np.asarray(times, dtype=np.float64)), 1)
    return float(slope), float(intercept)


def bench_point(w: SpatialWeights, label, T=DEFAULT_T, repeats=3, preset="default", seed=0, cfg=None, setup_time=0.0):
    """Time one likelihood evaluation and ``repeats`` full fits on simulated data."""
    cfg = cfg or OptimizerConfig()
    n_side = max(2, math.isqrt(w.N))
    design = SimulationDesign.from_preset(preset, n=n_side, T=T, seed=seed)
    data = simulate_panel(design, w)
    theta = design.params.theta
    # warm the JIT and the likelihood caches once outside the timed region
    concentrated_loglik(data, theta, w, LikelihoodWorkspace(w, theta))
    w.clear_cache()
    t0 = time.perf_counter()
    concentrated_loglik(data, theta, w, LikelihoodWorkspace(w, theta))
    loglik_time = time.perf_counter() - t0
    times, diag = [], None
    for _ in range(repeats):
        w.clear_cache()
        t0 = time.perf_counter()
        _, diag = fit(data, w, cfg)
        times.append(time.perf_counter() - t0)
    w.clear_cache()
    tracemalloc.start()
    try:
        fit(data, w, cfg)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    w.clear_cache()
    return BenchPoint(
        label=label,
        N=w.N,
        T=T,
        bandwidth=w.bandwidth,
        setup_time=setup_time,
        loglik_time=loglik_time,
        fit_times=times,
        fit_iterations=diag.iterations,
        factorizations=diag.factorizations,
        tracemalloc_peak=int(peak),
        max_rss=int(_max_rss_bytes()),
    )


def _finish(name, points, extra=None):
    slope, intercept = loglog_slope([p.N for p in points], [p.median_fit_time for p in points])
    note = "" if slope is not None else "slope omitted: the ladder has fewer than two distinct sizes"
    return LadderResult(name, points, slope, intercept, note, extra or {})


def grid_ladder(sides=DEFAULT_SIDES, T=DEFAULT_T, repeats=3, cfg=None, log=None):
    """Square ``n x n`` grids: the bandwidth grows like ``sqrt(N)``."""
    points = []
    for n in sorted(sides):
        t0 = time.perf_counter()
        w = make_grid_weights(n)
        setup = time.perf_counter() - t0
        points.append(bench_point(w, f"grid {n}x{n}", T, repeats, cfg=cfg, setup_time=setup))
        if log:
            log(points[-1])
    return _finish("grid", points)


def strip_ladder(lengths=(100, 400, 1600), width=25, T=DEFAULT_T, repeats=3, cfg=None, log=None):
    """``width x length`` strips: the bandwidth stays at ``width`` as ``N`` grows."""
    points = []
    for m in sorted(lengths):
        t0 = time.perf_counter()
        w = make_strip_weights(width, m)
        setup = time.perf_counter() - t0
        points.append(bench_point(w, f"strip {width}x{m}", T, repeats, cfg=cfg, setup_time=setup))
        if log:
            log(points[-1])
    return _finish("strip", points, {"width": width})


def _best_of(fn, repeats):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def compare_backends(n=100, repeats=3, lam=0.1):
    """Time the banded kernels of each backend on ``I - lam W`` for an ``n x n`` grid.

    Also reports the largest disagreement between backends, which should sit
    at round-off level.
    """
    w = make_grid_weights(n)
    band = w.W.shifted(1.0, lam).band
    rhs = np.random.default_rng(0).standard_normal((w.N, 3))
    out = {"N": w.N, "bandwidth": w.bandwidth, "backends": {}}
    results = {}
    for name in ("numba", "numpy"):
        try:
            mod = load_backend(name)
        except ImportError as exc:
            out["backends"][name] = {"error": str(exc)}
            continue
        L, info = mod.band_cholesky(band)
        aux = mod.solve_prepare(L)
        results[name] = (mod.band_spmv(band, rhs), L, mod.band_cholesky_solve(L, rhs, aux))
        out["backends"][name] = {
            "spmv_s": _best_of(lambda: mod.band_spmv(band, rhs), repeats),
            "product_s": _best_of(lambda: mod.band_product(band, band, 2 * w.bandwidth), repeats),
            "cholesky_s": _best_of(lambda: mod.band_cholesky(band), repeats),
            "solve_s": _best_of(lambda: mod.band_cholesky_solve(L, rhs, aux), repeats),
            "cholesky_info": int(info),
        }
    if len(results) == 2:
        a, b = results["numba"], results["numpy"]
        out["max_abs_diff"] = {
            "spmv": float(np.max(np.abs(a[0] - b[0]))),
            "cholesky": float(np.max(np.abs(a[1] - b[1]))),
            "solve": float(np.max(np.abs(a[2] - b[2]))),
        }
    return out
