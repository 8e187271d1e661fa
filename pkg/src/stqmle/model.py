"""Model parameters, spatial weights and the operator matrices built from them.

The error process is ``S(lam) U_t = R(theta) U_{t-1} + V_t`` with
``S = I - lam W`` and ``R = rho W + gamma I``.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, NotPositiveDefinite
from .sparse_band import (
    BandedSymMatrix,
    ExtremeEigs,
    Permutation,
    SymSparseMatrix,
    apply_permutation,
    band_product,
    band_spmv,
    banded_cholesky,
    extreme_eigenvalues,
    rcm_order,
)
from .sparse_band.lanczos import DEFAULT_SEED, DEFAULT_TOL

EPS_FEAS = 1e-6
CACHE_SCHEMA = 1
_LOGDET_CACHE_SIZE = 512


@dataclass(frozen=True)
class DependenceParams:
    """Spatio-temporal dependence parameters ``(lam, gamma, rho)``."""

    lam: float
    gamma: float
    rho: float

    def __post_init__(self):
        for name in ("lam", "gamma", "rho"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v}")
            object.__setattr__(self, name, v)

    def as_array(self):
        return np.array([self.lam, self.gamma, self.rho])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (3,):
            raise DimensionMismatch(f"theta must have 3 entries, got shape {a.shape}")
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @classmethod
    def zero(cls):
        return cls(0.0, 0.0, 0.0)

    def to_dict(self):
        return {"lambda": self.lam, "gamma": self.gamma, "rho": self.rho}


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter vector: regression coefficients, dependence and innovation variance."""

    beta: np.ndarray
    theta: DependenceParams
    sigma2: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        s2 = float(self.sigma2)
        if not s2 > 0.0 or not math.isfinite(s2):
            raise ValueError(f"sigma2 must be positive and finite, got {s2}")
        object.__setattr__(self, "sigma2", s2)

    @property
    def k(self):
        return self.beta.size

    def to_dict(self):
        return {"beta": self.beta.tolist(), **self.theta.to_dict(), "sigma2": self.sigma2}


@dataclass(frozen=True, eq=False)
class PanelData:
    """Responses ``Y`` (N, T) and design ``X`` (N, k, T) in the original cell order."""

    Y: np.ndarray
    X: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        Y = np.array(self.Y, dtype=np.float64)
        X = np.array(self.X, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim == 2:
            X = X[:, None, :]
        if Y.ndim != 2 or X.ndim != 3:
            raise DimensionMismatch(f"Y must be (N, T) and X (N, k, T); got {Y.shape} and {X.shape}")
        if X.shape[0] != Y.shape[0] or X.shape[2] != Y.shape[1]:
            raise DimensionMismatch(f"Y {Y.shape} and X {X.shape} disagree on N or T")
        if Y.shape[0] < 1 or Y.shape[1] < 1 or X.shape[1] < 1:
            raise DimensionMismatch("panel needs N >= 1, T >= 1 and k >= 1")
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
            raise ValueError("panel contains missing or non-finite values")
        Y.setflags(write=False)
        X.setflags(write=False)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)

    @property
    def N(self):
        return self.Y.shape[0]

    @property
    def T(self):
        return self.Y.shape[1]

    @property
    def k(self):
        return self.X.shape[1]

    def subset(self, cells):
        """Panel restricted to the given cells (original indices)."""
        cells = np.asarray(cells, dtype=np.int64)
        return PanelData(self.Y[cells], self.X[cells])

    def permuted(self, p: Permutation):
        if len(p) != self.N:
            raise DimensionMismatch(f"permutation of length {len(p)} for N={self.N}")
        return PanelData(self.Y[p.forward], self.X[p.forward])


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    """Symmetric weight matrix in bandwidth-reducing order with cached spectrum bounds.

    ``W`` is stored permuted: ``W[i, j] = W_orig[perm.forward[i], perm.forward[j]]``.
    ``coords`` (optional, original order) enables spatial block subsampling.
    """

    W: BandedSymMatrix
    permutation: Permutation
    d_min: float
    d_max: float
    checksum: str = ""
    coords: np.ndarray | None = None
    eig: ExtremeEigs | None = None
    source: SymSparseMatrix | None = field(default=None, repr=False)
    _logdet: OrderedDict = field(default_factory=OrderedDict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.permutation) != self.W.dim:
            raise DimensionMismatch("permutation length differs from dim(W)")
        if np.any(self.W.diagonal() != 0.0):
            raise ValueError("weight matrix must have a zero diagonal")
        if self.coords is not None:
            c = np.asarray(self.coords, dtype=np.float64)
            if c.shape[0] != self.W.dim:
                raise DimensionMismatch(f"coords has {c.shape[0]} rows for N={self.W.dim}")
            object.__setattr__(self, "coords", c)

    @classmethod
    def from_sparse(
        cls,
        w: SymSparseMatrix,
        reorder=True,
        tol=DEFAULT_TOL,
        seed=DEFAULT_SEED,
        coords=None,
        bounds=None,
        permutation=None,
    ):
        """Reorder ``w`` with RCM and compute its extreme eigenvalues.

        ``bounds`` and ``permutation`` skip the corresponding step (used when
        loading a weights cache).
        """
        if np.any(w.diagonal() != 0.0):
            raise ValueError("weight matrix must have a zero diagonal")
        if permutation is None:
            permutation = rcm_order(w) if reorder else Permutation.identity(w.dim)
        banded = apply_permutation(w, permutation)
        eig = None
        if bounds is None:
            eig = extreme_eigenvalues(w, tol, seed=seed)
            bounds = (eig.d_min, eig.d_max)
        return cls(
            banded,
            permutation,
            float(bounds[0]),
            float(bounds[1]),
            checksum=matrix_checksum(w),
            coords=coords,
            eig=eig,
            source=w,
        )

    @property
    def N(self):
        return self.W.dim

    @property
    def bandwidth(self):
        return self.W.bandwidth

    def to_original(self, v):
        """Map rows from banded order back to the original cell order."""
        v = np.asarray(v)
        out = np.empty_like(v)
        out[self.permutation.forward] = v
        return out

    def to_banded(self, v):
        return np.asarray(v)[self.permutation.forward]

    def log_det_identity_minus(self, x):
        """``log det(I - x W)``, memoised on ``x``.

        Raises NotPositiveDefinite when ``I - x W`` is not positive definite.
        """
        x = float(x)
        cache = self._logdet
        if x in cache:
            cache.move_to_end(x)
            val = cache[x]
        else:
            if x == 0.0:
                val = 0.0
            else:
                try:
                    val = banded_cholesky(self.W.shifted(1.0, x)).log_det
                except NotPositiveDefinite as exc:
                    val = exc
            cache[x] = val
            if len(cache) > _LOGDET_CACHE_SIZE:
                cache.popitem(last=False)
        if isinstance(val, NotPositiveDefinite):
            raise val
        return val

    def log_det_shifted(self, a, c):
        """``log det(a I - c W)`` for ``a > 0``."""
        if not a > 0.0:
            raise NotPositiveDefinite(0, a)
        return self.N * math.log(a) + self.log_det_identity_minus(c / a)

    def clear_cache(self):
        self._logdet.clear()


def matrix_checksum(w: SymSparseMatrix) -> str:
    h = hashlib.sha256()
    csr = w.csr
    h.update(np.int64(w.dim).tobytes())
    h.update(np.ascontiguousarray(csr.indptr, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(csr.indices, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(csr.data, dtype=np.float64).tobytes())
    return h.hexdigest()


def save_weights_cache(w: SpatialWeights, path):
    """Write the JSON sidecar holding ordering and spectrum bounds of ``w``."""
    from .io import atomic_write_text

    doc = {
        "schema": CACHE_SCHEMA,
        "N": w.N,
        "bandwidth": w.bandwidth,
        "d_min": w.d_min,
        "d_max": w.d_max,
        "permutation": w.permutation.forward.tolist(),
        "checksum": w.checksum,
        "lanczos_seed": w.eig.seed if w.eig is not None else None,
    }
    atomic_write_text(path, json.dumps(doc))


def load_weights_cache(path, w: SymSparseMatrix, coords=None):
    """Rebuild SpatialWeights from a sidecar; None if missing or stale."""
    path = Path(path)
    if not path.exists():
        return None
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError):
        return None
    if doc.get("schema") != CACHE_SCHEMA or doc.get("N") != w.dim:
        return None
    if doc.get("checksum") != matrix_checksum(w):
        return None
    return SpatialWeights.from_sparse(
        w,
        bounds=(doc["d_min"], doc["d_max"]),
        permutation=Permutation(np.asarray(doc["permutation"], dtype=np.int64)),
        coords=coords,
    )


def build_S(w: SpatialWeights, lam) -> BandedSymMatrix:
    """``I - lam W`` in banded order."""
    return w.W.shifted(1.0, float(lam))


def build_R(w: SpatialWeights, theta: DependenceParams) -> BandedSymMatrix:
    """``rho W + gamma I`` in banded order."""
    return w.W.lincomb(theta.rho, None, theta.gamma)


def build_G(w: SpatialWeights, theta: DependenceParams) -> BandedSymMatrix:
    """``S^2 - R^2``, the precision of ``S U_1`` up to ``sigma2``."""
    S = build_S(w, theta.lam)
    R = build_R(w, theta)
    return band_product(S, S).lincomb(1.0, band_product(R, R), -1.0)


def apply_A(w: SpatialWeights, theta: DependenceParams, v, s_factor=None):
    """``A v = R S^{-1} v``; ``s_factor`` is an optional Cholesky factor of S."""
    if s_factor is None:
        s_factor = banded_cholesky(build_S(w, theta.lam))
    x = s_factor.solve(v)
    return theta.gamma * x + theta.rho * band_spmv(w.W, x)


@dataclass(frozen=True)
class HalfSpace:
    """Linear constraint ``normal . (lam, gamma, rho) < bound``."""

    normal: tuple
    bound: float
    label: str

    def slack(self, theta):
        t = theta.as_array() if isinstance(theta, DependenceParams) else np.asarray(theta)
        return self.bound - float(np.dot(self.normal, t))


@dataclass(frozen=True)
class FeasibilityVerdict:
    feasible: bool
    violated: tuple = ()
    min_slack: float = math.inf

    def __bool__(self):
        return self.feasible


def polytope_constraints(w: SpatialWeights) -> list[HalfSpace]:
    """The six half-spaces whose intersection is the stationary parameter set.

    Each spectrum-bound inequality is multiplied through by the eigenvalue bound
    so that the constraints stay linear in ``(lam, gamma, rho)``.
    """
    lo, hi = w.d_min, w.d_max
    return [
        HalfSpace((0.0, 1.0, 0.0), 1.0, "gamma < 1"),
        HalfSpace((0.0, -1.0, 0.0), 1.0, "gamma > -1"),
        HalfSpace((hi, 1.0, hi), 1.0, "lambda + rho < (1 - gamma) / d_max"),
        HalfSpace((lo, 1.0, lo), 1.0, "lambda + rho > (1 - gamma) / d_min"),
        HalfSpace((hi, -1.0, -hi), 1.0, "lambda - rho < (1 + gamma) / d_max"),
        HalfSpace((lo, -1.0, -lo), 1.0, "lambda - rho > (1 + gamma) / d_min"),
    ]


def feasibility_check(w: SpatialWeights, theta: DependenceParams, margin=EPS_FEAS) -> FeasibilityVerdict:
    """O(1) membership test of ``theta`` in the polytope shrunk by ``margin``."""
    slacks = [(h.slack(theta), h.label) for h in polytope_constraints(w)]
    violated = tuple(label for s, label in slacks if not s > margin)
    return FeasibilityVerdict(not violated, violated, min(s for s, _ in slacks))


def max_feasible_step(w: SpatialWeights, theta, direction, margin=EPS_FEAS) -> float:
    """Largest ``alpha`` keeping ``theta + alpha * direction`` inside the shrunk polytope."""
    t = theta.as_array() if isinstance(theta, DependenceParams) else np.asarray(theta, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    alpha = math.inf
    for h in polytope_constraints(w):
        rate = float(np.dot(h.normal, d))
        if rate > 0.0:
            alpha = min(alpha, (h.bound - margin - float(np.dot(h.normal, t))) / rate)
    return max(alpha, 0.0)
