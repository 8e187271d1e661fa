"""Synthetic grids, designs and panels, plus a Monte Carlo driver.

Random streams are derived from one integer seed with ``SeedSequence`` spawn
keys: ``(0,)`` for the design matrix and ``(1, r)`` for replication ``r``. A
replication therefore does not depend on how many others run or in which
process.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import InfeasibleTheta, StqmleError
from .model import DependenceParams, ModelParams, PanelData, SpatialWeights, feasibility_check
from .sparse_band import SymSparseMatrix, band_spmv, banded_cholesky

log = logging.getLogger(__name__)

DEFAULT_BURN_IN = 200
FAILURE_FLAG_FRACTION = 0.01

# beta, (lam, gamma, rho), sigma2
PRESETS = {
    "default": ((1.0, 0.5), (0.05, 0.7, -0.03), 0.1),
    "table": ((1.0, 0.5), (0.05, -0.03, 0.1), 1.0),
}

_ORDERS = {"first": "first", "rook": "first", "1": "first", "second": "second", "queen": "second", "2": "second"}


def lattice_adjacency(rows, cols, order="first") -> SymSparseMatrix:
    """Binary adjacency of a ``rows x cols`` lattice in row-major cell order."""
    kind = _ORDERS.get(str(order).lower())
    if kind is None:
        raise ValueError(f"unknown neighbourhood order {order!r}")
    if rows < 1 or cols < 1:
        raise ValueError("lattice sides must be positive")
    ch_r = sp.diags([1.0, 1.0], [-1, 1], shape=(rows, rows), format="csr")
    ch_c = sp.diags([1.0, 1.0], [-1, 1], shape=(cols, cols), format="csr")
    W = sp.kron(sp.identity(rows, format="csr"), ch_c) + sp.kron(ch_r, sp.identity(cols, format="csr"))
    if kind == "second":
        W = W + sp.kron(ch_r, ch_c)
    return SymSparseMatrix(sp.csr_array(W))


def grid_adjacency(n, order="first") -> SymSparseMatrix:
    """Binary adjacency of an ``n x n`` lattice in row-major cell order."""
    if n < 1:
        raise ValueError("grid side must be positive")
    return lattice_adjacency(n, n, order)


def lattice_coords(rows, cols):
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.column_stack([r + 1, c + 1]).astype(np.float64)


def grid_coords(n):
    return lattice_coords(n, n)


def make_grid_weights(n, order="first", **kwargs) -> SpatialWeights:
    """Grid weights with RCM ordering, cached spectrum bounds and cell coordinates."""
    if n < 2:
        raise ValueError("grid side must be at least 2")
    return SpatialWeights.from_sparse(grid_adjacency(n, order), coords=grid_coords(n), **kwargs)


def make_strip_weights(rows, cols, order="first", **kwargs) -> SpatialWeights:
    """Weights of a ``rows x cols`` strip; bandwidth stays near ``min(rows, cols)``."""
    return SpatialWeights.from_sparse(
        lattice_adjacency(rows, cols, order), coords=lattice_coords(rows, cols), **kwargs
    )


def make_design_matrix(N, T, seed=0, k=2):
    """Intercept plus ``k - 1`` standard normal covariates, shape (N, k, T)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    X = np.empty((N, k, T))
    X[:, 0, :] = 1.0
    if k > 1:
        X[:, 1:, :] = rng.standard_normal((N, k - 1, T))
    return X


@dataclass(frozen=True)
class SimulationDesign:
    """Everything needed to regenerate a Monte Carlo study."""

    n: int
    T: int
    params: ModelParams
    order: str = "first"
    innovation: str = "gaussian"
    df: float = math.inf
    burn_in: int = DEFAULT_BURN_IN
    n_reps: int = 100
    seed: int = 0
    preset: str = "custom"

    def __post_init__(self):
        if self.n < 2 or self.T < 1:
            raise ValueError("need n >= 2 and T >= 1")
        if self.burn_in < 0 or self.n_reps < 0:
            raise ValueError("burn_in and n_reps must be non-negative")
        if self.innovation not in ("gaussian", "student_t"):
            raise ValueError(f"unknown innovation family {self.innovation!r}")
        if self.innovation == "student_t" and not self.df > 4.0:
            raise ValueError("student_t innovations need df > 4 (finite fourth moment)")
        if self.params.k < 1:
            raise ValueError("design needs at least one regressor")

    @classmethod
    def from_preset(cls, name="default", n=10, T=5, **kwargs):
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        beta, theta, sigma2 = PRESETS[name]
        params = ModelParams(np.array(beta), DependenceParams(*theta), sigma2)
        return cls(n=n, T=T, params=params, preset=name, **kwargs)

    @property
    def N(self):
        return self.n * self.n

    def to_dict(self):
        return {
            "n": self.n,
            "N": self.N,
            "T": self.T,
            "order": self.order,
            "innovation": self.innovation,
            "df": None if math.isinf(self.df) else self.df,
            "burn_in": self.burn_in,
            "n_reps": self.n_reps,
            "seed": self.seed,
            "preset": self.preset,
            "params": self.params.to_dict(),
        }


def _innovations(design, rng, steps, N):
    s = math.sqrt(design.params.sigma2)
    if design.innovation == "gaussian":
        return s * rng.standard_normal((steps, N))
    scale = s * math.sqrt((design.df - 2.0) / design.df)
    return scale * rng.standard_t(design.df, size=(steps, N))


def simulate_errors(w: SpatialWeights, theta: DependenceParams, innovations):
    """Run ``S U_t = R U_{t-1} + V_t`` from ``U_0 = 0``.

    ``innovations`` has shape (steps, N) in the original cell order; the
    return value has the same shape and order.
    """
    verdict = feasibility_check(w, theta)
    if not verdict:
        raise InfeasibleTheta(f"theta {theta} is outside the stationary region", verdict.violated)
    fac = banded_cholesky(w.W.shifted(1.0, theta.lam))
    V = np.asarray(innovations, dtype=np.float64)[:, w.permutation.forward]
    U = np.empty_like(V)
    prev = np.zeros(w.N)
    for t in range(V.shape[0]):
        rhs = V[t] + theta.gamma * prev
        if theta.rho != 0.0:
            rhs += theta.rho * band_spmv(w.W, prev)
        prev = fac.solve(rhs)
        U[t] = prev
    out = np.empty_like(U)
    out[:, w.permutation.forward] = U
    return out


def simulate_panel(design: SimulationDesign, w: SpatialWeights | None = None, X=None, rep=0) -> PanelData:
    """Draw replication ``rep`` of ``design``; ``w`` and ``X`` are rebuilt when omitted."""
    if w is None:
        w = make_grid_weights(design.n, design.order)
    N, T = w.N, design.T
    if X is None:
        X = make_design_matrix(N, T, design.seed, design.params.k)
    rng = np.random.default_rng(np.random.SeedSequence(design.seed, spawn_key=(1, rep)))
    V = _innovations(design, rng, design.burn_in + T, N)
    U = simulate_errors(w, design.params.theta, V)[design.burn_in :].T
    Y = np.einsum("nkt,k->nt", X, design.params.beta) + U
    return PanelData(Y, X)


PARAM_NAMES_THETA = ("lambda", "gamma", "rho", "sigma2")


@dataclass
class MonteCarloSummary:
    """Aggregated replication results; per-parameter arrays follow ``names``."""

    names: list
    truth: np.ndarray
    estimates: np.ndarray
    plugin_se: np.ndarray
    covered: np.ndarray
    times: np.ndarray
    n_requested: int
    failures: list = field(default_factory=list)
    design: dict = field(default_factory=dict)
    level: float = 0.95

    @property
    def n_ok(self):
        return self.estimates.shape[0]

    @property
    def empty(self):
        return self.n_ok == 0

    @property
    def failure_flag(self):
        return self.n_requested > 0 and len(self.failures) > FAILURE_FLAG_FRACTION * self.n_requested

    @property
    def k(self):
        return self.plugin_se.shape[1] if self.plugin_se.ndim == 2 else 0

    def _stat(self, fn):
        if self.empty:
            return np.full(len(self.names), np.nan)
        return fn(self.estimates)

    @property
    def bias(self):
        return self._stat(lambda e: e.mean(axis=0) - self.truth)

    @property
    def mse(self):
        return self._stat(lambda e: np.mean((e - self.truth) ** 2, axis=0))

    @property
    def sd(self):
        if self.n_ok < 2:
            return np.full(len(self.names), np.nan)
        return self.estimates.std(axis=0, ddof=1)

    @property
    def bias_se(self):
        return self.sd / math.sqrt(max(self.n_ok, 1))

    @property
    def mean_plugin_se(self):
        out = np.full(len(self.names), np.nan)
        if not self.empty:
            out[: self.k] = self.plugin_se.mean(axis=0)
        return out

    @property
    def coverage(self):
        out = np.full(len(self.names), np.nan)
        if not self.empty:
            out[: self.k] = self.covered.mean(axis=0)
        return out

    @property
    def mean_time(self):
        return float(self.times.mean()) if self.times.size else math.nan

    def column(self, name):
        return self.estimates[:, self.names.index(name)]

    def correlation(self, a, b):
        return float(np.corrcoef(self.column(a), self.column(b))[0, 1])

    def rows(self):
        bias, mse, sd, pse, cov = self.bias, self.mse, self.sd, self.mean_plugin_se, self.coverage
        return [
            {
                "parameter": name,
                "true": float(self.truth[j]),
                "bias": float(bias[j]),
                "mse": float(mse[j]),
                "sd": float(sd[j]),
                "plugin_se": float(pse[j]),
                "coverage": float(cov[j]),
                "mean_time": self.mean_time,
            }
            for j, name in enumerate(self.names)
        ]

    def to_csv(self):
        buf = io.StringIO()
        cols = ["parameter", "true", "bias", "mse", "sd", "plugin_se", "coverage", "mean_time"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in row.items()})
        return buf.getvalue()

    def to_dict(self, include_raw=False):
        out = {
            "design": self.design,
            "n_requested": self.n_requested,
            "n_ok": self.n_ok,
            "empty": self.empty,
            "failure_flag": self.failure_flag,
            "failures": self.failures,
            "level": self.level,
            "summary": self.rows(),
        }
        if include_raw:
            out["estimates"] = self.estimates.tolist()
            out["plugin_se"] = self.plugin_se.tolist()
            out["times"] = self.times.tolist()
        return out


def _replicate(args):
    """One Monte Carlo replication; returns a tuple or the raised error."""
    from .inference import beta_covariance, critical_value
    from .optimizer import fit

    design, cfg, rep, w, X, alpha = args
    try:
        data = simulate_panel(design, w, X, rep)
        t0 = time.perf_counter()
        params, diag = fit(data, w, cfg)
        cov = beta_covariance(data, params.theta, params.sigma2, w)
        elapsed = time.perf_counter() - t0
    except StqmleError as exc:
        return rep, exc
    se = np.sqrt(np.diag(cov))
    z = critical_value(alpha)
    covered = np.abs(params.beta - design.params.beta) <= z * se
    est = np.concatenate([params.beta, params.theta.as_array(), [params.sigma2]])
    return rep, (est, se, covered, elapsed, diag.converged)


def run_monte_carlo(design: SimulationDesign, cfg=None, w=None, executor=None, level=0.95, reps=None):
    """Fit every replication of ``design`` and aggregate bias, MSE, SD, SE and coverage.

    ``executor`` (any ``concurrent.futures`` executor) spreads replications
    over workers; results are gathered in replication order, so the summary
    does not depend on the worker count.
    """
    if w is None:
        w = make_grid_weights(design.n, design.order)
    k = design.params.k
    names = [f"beta{j}" for j in range(k)] + list(PARAM_NAMES_THETA)
    truth = np.concatenate([design.params.beta, design.params.theta.as_array(), [design.params.sigma2]])
    rep_ids = list(range(design.n_reps)) if reps is None else list(reps)
    X = make_design_matrix(w.N, design.T, design.seed, k)
    alpha = 1.0 - level
    jobs = [(design, cfg, r, w, X, alpha) for r in rep_ids]
    mapper = executor.map if executor is not None else map
    est, ses, cov, times, failures = [], [], [], [], []
    for rep, out in mapper(_replicate, jobs):
        if isinstance(out, Exception):
            log.warning("replication %d failed: %s", rep, out)
            failures.append({"rep": rep, "error": f"{type(out).__name__}: {out}"})
            continue
        e, s, c, t, converged = out
        if not converged:
            log.info("replication %d stopped before meeting the gradient tolerance", rep)
        est.append(e)
        ses.append(s)
        cov.append(c)
        times.append(t)
    p = len(names)
    summary = MonteCarloSummary(
        names=names,
        truth=truth,
        estimates=np.array(est).reshape(-1, p),
        plugin_se=np.array(ses).reshape(-1, k),
        covered=np.array(cov, dtype=bool).reshape(-1, k),
        times=np.array(times),
        n_requested=len(rep_ids),
        failures=failures,
        design=design.to_dict(),
        level=level,
    )
    if summary.empty:
        log.warning("Monte Carlo summary is empty (%d replications requested)", len(rep_ids))
    elif summary.failure_flag:
        log.warning("%d of %d replications failed", len(failures), len(rep_ids))
    return summary


def with_reps(design: SimulationDesign, n_reps: int) -> SimulationDesign:
    return replace(design, n_reps=n_reps)
