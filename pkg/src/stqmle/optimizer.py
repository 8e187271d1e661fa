"""Constrained quasi-Newton maximisation of the profiled quasi log-likelihood.

The search runs over ``theta = (lam, gamma, rho)`` with ``beta`` and ``sigma2``
profiled out. Iterates never leave the stationary polytope: every trial step is
halved until it is strictly inside, then an Armijo test is applied.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InfeasibleStart, InfeasibleTheta, MaxItersExceeded, NoAscent, NonfiniteValue
from .likelihood import (
    LikelihoodWorkspace,
    concentrated_loglik,
    gradient_beta,
    gradient_theta_split,
    prepare,
    quasi_loglik,
)
from .model import (
    EPS_FEAS,
    DependenceParams,
    ModelParams,
    PanelData,
    SpatialWeights,
    feasibility_check,
    max_feasible_step,
)

log = logging.getLogger(__name__)

_EPS3 = np.finfo(np.float64).eps ** (1.0 / 3.0)


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings for ``fit``.

    ``feasibility`` selects how trial steps are kept inside the polytope:
    ``"backtrack"`` halves from a unit step, ``"clip"`` first shortens the step
    to just inside the nearest face. ``gradient="split"`` differences the
    log-determinant part in its scalar arguments (see
    ``gradient_theta_split``); ``"direct"`` differences the whole profiled
    value in ``theta``. ``joint=True`` optimises ``beta`` and ``log sigma2``
    together with ``theta`` instead of profiling them.
    """

    max_iters: int = 200
    grad_tol: float = 1e-6
    step_tol: float = 1e-10
    initial_theta: tuple = (0.0, 0.0, 0.0)
    feasibility: str = "backtrack"
    gradient: str = "split"
    margin: float = EPS_FEAS
    seed: int = 0
    multistart: bool = False
    joint: bool = False
    initial_step: float = 0.05
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 40
    strict: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        for name in ("grad_tol", "step_tol", "margin", "initial_step", "c1"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")
        if self.feasibility not in ("backtrack", "clip"):
            raise ValueError("feasibility must be 'backtrack' or 'clip'")
        if self.gradient not in ("split", "direct"):
            raise ValueError("gradient must be 'split' or 'direct'")
        object.__setattr__(self, "initial_theta", tuple(float(v) for v in self.initial_theta))

    def to_dict(self):
        return asdict(self)


@dataclass
class FitDiagnostics:
    iterations: int = 0
    grad_norm: float = math.nan
    loglik_trace: list = field(default_factory=list)
    boundary_hits: int = 0
    timings: dict = field(default_factory=dict)
    converged: bool = False
    status: str = ""
    evaluations: int = 0
    factorizations: int = 0
    restarts: int = 0
    start: tuple = ()
    starts_tried: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def line_search_feasible(
    objective,
    x,
    direction,
    feasible,
    f0,
    g0,
    c1=1e-4,
    shrink=0.5,
    max_backtracks=40,
    alpha0=1.0,
):
    """Backtracking Armijo search restricted to a feasible set.

    Parameters
    ----------
    objective : callable
        Maps a point to the value being maximised. May raise InfeasibleTheta,
        which is treated like an infeasible trial point.
    feasible : callable
        Predicate for strict feasibility.
    f0, g0 : float, ndarray
        Value and gradient at ``x``.

    Returns
    -------
    alpha, x_new, f_new, boundary_hits
    """
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    slope = float(np.dot(g0, d))
    if not slope > 0.0:
        raise NoAscent(f"direction is not an ascent direction (slope {slope:.3g})")
    alpha = float(alpha0)
    hits = 0
    for _ in range(max_backtracks + 1):
        trial = x + alpha * d
        if not feasible(trial):
            hits += 1
            alpha *= shrink
            continue
        try:
            f = objective(trial)
        except (InfeasibleTheta, NonfiniteValue):
            hits += 1
            alpha *= shrink
            continue
        if f >= f0 + c1 * alpha * slope:
            return alpha, trial, f, hits
        alpha *= shrink
    raise NoAscent(f"no acceptable step after {max_backtracks} backtracks")


def _bfgs_ascent(objective, gradient, x0, feasible, max_step, cfg: OptimizerConfig, diag: FitDiagnostics):
    """Maximise ``objective`` from ``x0``; returns ``(x, f, g)``."""
    x = np.asarray(x0, dtype=np.float64)
    f = objective(x)
    g = gradient(x)
    diag.loglik_trace.append(f)
    n = x.size
    Hinv = None
    fresh = True
    for it in range(cfg.max_iters):
        gnorm = float(np.max(np.abs(g)))
        diag.grad_norm = gnorm
        diag.iterations = it
        if gnorm <= cfg.grad_tol * (1.0 + abs(f)):
            diag.converged = True
            diag.status = "gradient tolerance reached"
            return x, f, g
        if Hinv is None:
            Hinv = np.eye(n) * (cfg.initial_step / max(gnorm, 1e-300))
            fresh = True
        d = Hinv @ g
        if not np.dot(d, g) > 0.0:
            Hinv = np.eye(n) * (cfg.initial_step / max(gnorm, 1e-300))
            d = Hinv @ g
            fresh = True
        alpha0 = 1.0
        if cfg.feasibility == "clip":
            alpha0 = min(1.0, 0.99 * max_step(x, d))
        try:
            alpha, x_new, f_new, hits = line_search_feasible(
                objective, x, d, feasible, f, g, cfg.c1, cfg.shrink, cfg.max_backtracks, alpha0
            )
        except NoAscent:
            if not fresh:
                # quasi-Newton direction failed; retry once along the gradient
                diag.restarts += 1
                Hinv = None
                continue
            diag.status = "line search failed along the gradient"
            return x, f, g
        diag.boundary_hits += hits
        s = x_new - x
        g_new = gradient(x_new)
        diag.loglik_trace.append(f_new)
        y = g - g_new  # curvature of the minimised function -f
        sy = float(s @ y)
        small_step = float(np.max(np.abs(s))) <= cfg.step_tol * (1.0 + float(np.max(np.abs(x))))
        x, f, g = x_new, f_new, g_new
        if small_step:
            diag.iterations = it + 1
            diag.grad_norm = float(np.max(np.abs(g)))
            diag.converged = diag.grad_norm <= cfg.grad_tol * (1.0 + abs(f))
            diag.status = "step tolerance reached"
            return x, f, g
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if fresh:
                Hinv = np.eye(n) * (sy / float(y @ y))
            r = 1.0 / sy
            V = np.eye(n) - r * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + r * np.outer(s, s)
            fresh = False
        else:
            Hinv = None
    diag.iterations = cfg.max_iters
    diag.grad_norm = float(np.max(np.abs(g)))
    diag.status = "maximum iterations reached"
    return x, f, g


class _ProfiledObjective:
    """Concentrated log-likelihood over theta, scaled by 1/NT."""

    def __init__(self, data, w, margin, ws, split=True):
        self.data, self.w, self.margin, self.ws = data, w, margin, ws
        self.NT = data.N * data.T
        self.evals = 0
        self.split = split

    def feasible(self, x):
        return bool(feasibility_check(self.w, DependenceParams.from_array(x), self.margin))

    def max_step(self, x, d):
        return max_feasible_step(self.w, x, d, self.margin)

    def __call__(self, x):
        self.evals += 1
        return concentrated_loglik(self.data, DependenceParams.from_array(x), self.w, self.ws).value / self.NT

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.split:
            return gradient_theta_split(self.data, DependenceParams.from_array(x), self.w) / self.NT
        g = np.empty(3)
        h0 = _EPS3 * (1.0 + np.abs(x))
        for i in range(3):
            h = h0[i]
            for _ in range(60):
                up, dn = x.copy(), x.copy()
                up[i] += h
                dn[i] -= h
                if self.feasible(up) and self.feasible(dn):
                    break
                h *= 0.5
            else:
                raise InfeasibleTheta(f"no feasible finite-difference step at {x}")
            g[i] = (self(up) - self(dn)) / (2.0 * h)
        return g


class _JointObjective:
    """Quasi log-likelihood over ``(beta, lam, gamma, rho, log sigma2)``, scaled by 1/NT."""

    def __init__(self, data, w, margin, ws):
        self.data, self.w, self.margin, self.ws = data, w, margin, ws
        self.k = data.k
        self.NT = data.N * data.T
        self.evals = 0

    def split(self, x):
        k = self.k
        return x[:k], DependenceParams.from_array(x[k : k + 3]), math.exp(x[k + 3])

    def feasible(self, x):
        k = self.k
        if not abs(x[k + 3]) < 700.0:
            return False
        return bool(feasibility_check(self.w, DependenceParams.from_array(x[k : k + 3]), self.margin))

    def max_step(self, x, d):
        k = self.k
        return max_feasible_step(self.w, x[k : k + 3], d[k : k + 3], self.margin)

    def __call__(self, x):
        self.evals += 1
        beta, theta, s2 = self.split(x)
        return quasi_loglik(self.data, ModelParams(beta, theta, s2), self.w, self.ws).loglik / self.NT

    def gradient(self, x):
        x = np.asarray(x, dtype=np.float64)
        k = self.k
        beta, theta, s2 = self.split(x)
        params = ModelParams(beta, theta, s2)
        g = np.empty(k + 4)
        g[:k] = gradient_beta(self.data, params, self.ws) / self.NT
        H = quasi_loglik(self.data, params, self.w, self.ws).quad_form
        g[k + 3] = (-0.5 * self.NT + H / (2.0 * s2)) / self.NT
        h0 = _EPS3 * (1.0 + np.abs(x))
        for i in range(k, k + 3):
            h = h0[i]
            for _ in range(60):
                up, dn = x.copy(), x.copy()
                up[i] += h
                dn[i] -= h
                if self.feasible(up) and self.feasible(dn):
                    break
                h *= 0.5
            else:
                raise InfeasibleTheta(f"no feasible finite-difference step at {x}")
            g[i] = (self(up) - self(dn)) / (2.0 * h)
        return g


def multistart_points(w: SpatialWeights, margin=EPS_FEAS):
    """Origin plus four points halfway to the polytope boundary along the ``lam`` and ``gamma`` axes."""
    origin = np.zeros(3)
    pts = [origin]
    for axis in (0, 1):
        for sign in (1.0, -1.0):
            d = np.zeros(3)
            d[axis] = sign
            pts.append(0.5 * max_feasible_step(w, origin, d, margin) * d)
    return [tuple(float(v) for v in p) for p in pts]


def _fit_from(data, w, cfg, start, ws):
    diag = FitDiagnostics(start=tuple(start))
    if cfg.joint:
        obj = _JointObjective(data, w, cfg.margin, ws)
    else:
        obj = _ProfiledObjective(data, w, cfg.margin, ws, split=cfg.gradient == "split")
    if cfg.joint:
        theta0 = DependenceParams(*start)
        c = concentrated_loglik(data, theta0, w, ws)
        x0 = np.concatenate([c.beta_hat, theta0.as_array(), [math.log(c.sigma2_hat)]])
    else:
        x0 = np.asarray(start, dtype=np.float64)
    x, f, _ = _bfgs_ascent(obj, obj.gradient, x0, obj.feasible, obj.max_step, cfg, diag)
    diag.evaluations = obj.evals
    return x, f, diag


def fit(data: PanelData, w: SpatialWeights, cfg: OptimizerConfig | None = None):
    """Quasi-maximum-likelihood estimate of ``(beta, theta, sigma2)``.

    Returns
    -------
    params : ModelParams
    diagnostics : FitDiagnostics
        ``converged`` is False when the iteration budget ran out; the best
        point found is still returned unless ``cfg.strict`` is set.
    """
    cfg = cfg or OptimizerConfig()
    t_start = time.perf_counter()
    theta0 = DependenceParams(*cfg.initial_theta)
    verdict = feasibility_check(w, theta0, cfg.margin)
    if not verdict:
        raise InfeasibleStart(f"initial theta {theta0} is infeasible", verdict.violated)
    prepare(data, w)
    t_prep = time.perf_counter()
    cache_before = len(w._logdet)
    ws = LikelihoodWorkspace(w, theta0, cfg.margin)

    starts = [cfg.initial_theta]
    if cfg.multistart:
        starts += [p for p in multistart_points(w, cfg.margin)[1:]]
    best = None
    tried = []
    for start in starts:
        try:
            x, f, diag = _fit_from(data, w, cfg, start, ws)
        except (InfeasibleTheta, NonfiniteValue) as exc:
            if len(starts) == 1:
                raise
            log.warning("start %s failed: %s", start, exc)
            continue
        tried.append({"start": list(start), "value": f, "converged": diag.converged})
        if best is None or f > best[1]:
            best = (x, f, diag)
    if best is None:
        raise InfeasibleTheta("every multistart point failed")
    x, f, diag = best
    t_opt = time.perf_counter()

    if cfg.joint:
        k = data.k
        beta, theta, sigma2 = x[:k], DependenceParams.from_array(x[k : k + 3]), math.exp(x[k + 3])
    else:
        theta = DependenceParams.from_array(x)
        c = concentrated_loglik(data, theta, w, ws)
        beta, sigma2 = c.beta_hat, c.sigma2_hat
    params = ModelParams(beta, theta, sigma2)
    t_end = time.perf_counter()
    diag.starts_tried = tried
    diag.factorizations = max(len(w._logdet) - cache_before, 0)
    diag.config = cfg.to_dict()
    diag.timings = {
        "prepare": t_prep - t_start,
        "optimize": t_opt - t_prep,
        "finalize": t_end - t_opt,
        "total": t_end - t_start,
    }
    log.info(
        "fit finished: %s after %d iterations, |g|=%.3g, theta=%s",
        diag.status,
        diag.iterations,
        diag.grad_norm,
        theta,
    )
    if cfg.strict and not diag.converged:
        exc = MaxItersExceeded(diag.status)
        exc.params, exc.diagnostics = params, diag
        raise exc
    return params, diag
