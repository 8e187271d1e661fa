"""Quasi log-likelihood of the spatio-temporal regression in O(NT) per evaluation.

For a residual panel ``e`` (N, T) the quadratic form of the inverse covariance
splits into four sums over time slices::

    H = |S e_1|^2 - |R e_1|^2 + sum_{t>=2} |S e_t|^2
        + sum_{t<=T-1} |R e_t|^2 - 2 sum_{t<=T-1} (R e_t)'(S e_{t+1})

Only ``W Y`` and ``W X`` are needed to form ``S e`` and ``R e``, so they are
computed once per (panel, weights) pair. The determinant of
``K = (I - A^2)^{-1}`` with ``A = R S^{-1}`` follows from
``S^2 - R^2 = (S - R)(S + R)``, giving three banded log-determinants of
matrices of the form ``a I - c W``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InfeasibleTheta, NonfiniteValue, NotPositiveDefinite, SingularDesign
from .model import (
    EPS_FEAS,
    DependenceParams,
    ModelParams,
    PanelData,
    SpatialWeights,
    feasibility_check,
)
from .sparse_band import band_spmv

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
_FD_SCALE = np.finfo(np.float64).eps ** (1.0 / 3.0)


@dataclass(frozen=True, eq=False)
class PreparedPanel:
    """Panel in banded order with ``Z = [Y, X]`` (N, k+1, T) and ``W Z``."""

    Z: np.ndarray
    WZ: np.ndarray

    @property
    def N(self):
        return self.Z.shape[0]

    @property
    def T(self):
        return self.Z.shape[2]

    @property
    def k(self):
        return self.Z.shape[1] - 1


def prepare(data: PanelData, w: SpatialWeights) -> PreparedPanel:
    """Align ``data`` to the banded order of ``w`` and precompute ``W [Y, X]``.

    The result is memoised on the panel object.
    """
    if data.N != w.N:
        raise DimensionMismatch(f"panel has N={data.N}, weights have N={w.N}")
    key = id(w)
    hit = data._cache.get(key)
    if hit is not None and hit[0] is w:
        return hit[1]
    Z = np.concatenate([data.Y[:, None, :], data.X], axis=1)[w.permutation.forward]
    Z = np.ascontiguousarray(Z)
    n, m, t = Z.shape
    WZ = band_spmv(w.W, Z.reshape(n, m * t)).reshape(n, m, t)
    Z.setflags(write=False)
    WZ.setflags(write=False)
    prep = PreparedPanel(Z, WZ)
    data._cache[key] = (w, prep)
    return prep


class LikelihoodWorkspace:
    """Log-determinants at one ``theta``; reused by value, gradient and GLS steps.

    ``version`` increments whenever ``theta`` changes through ``update``.
    """

    def __init__(self, w: SpatialWeights, theta: DependenceParams, margin=EPS_FEAS):
        self.weights = w
        self.margin = margin
        self.version = 0
        self._set(theta)

    def _set(self, theta):
        verdict = feasibility_check(self.weights, theta, self.margin)
        if not verdict:
            raise InfeasibleTheta(f"theta {theta} is outside the stationary region", verdict.violated)
        w = self.weights
        lam, gamma, rho = theta.lam, theta.gamma, theta.rho
        try:
            logdet_S = w.log_det_shifted(1.0, lam)
            logdet_SmR = w.log_det_shifted(1.0 - gamma, lam + rho)
            logdet_SpR = w.log_det_shifted(1.0 + gamma, lam - rho)
        except NotPositiveDefinite as exc:
            raise InfeasibleTheta(f"theta {theta} gives an indefinite operator: {exc}", ("cholesky",)) from exc
        self.theta = theta
        self.logdet_S = logdet_S
        self.logdet_G = logdet_SmR + logdet_SpR
        self.logdet_K = 2.0 * logdet_S - self.logdet_G
        self.version += 1

    def update(self, theta: DependenceParams):
        if theta != self.theta:
            self._set(theta)
        return self


@dataclass(frozen=True)
class LikelihoodValue:
    loglik: float
    sigma2_hat: float
    quad_form: float
    logdet_K: float
    logdet_S_abs: float


@dataclass(frozen=True)
class ConcentratedValue:
    value: float
    beta_hat: np.ndarray
    sigma2_hat: float
    quad_form: float
    logdet_K: float
    logdet_S_abs: float

    def __iter__(self):
        return iter((self.value, self.beta_hat, self.sigma2_hat))


def _workspace(w, theta, ws):
    if ws is None:
        return LikelihoodWorkspace(w, theta)
    if ws.weights is not w:
        raise ValueError("workspace was built for different weights")
    return ws.update(theta)


def _transform(prep: PreparedPanel, theta: DependenceParams):
    """``S Z`` and ``R Z`` for every slice."""
    SZ = prep.Z - theta.lam * prep.WZ
    RZ = theta.gamma * prep.Z + theta.rho * prep.WZ
    return SZ, RZ


def _four_sums(se, re):
    """Quadratic form for residual slices ``S e`` and ``R e`` of shape (N, T)."""
    total = np.sum(se[:, 0] ** 2) - np.sum(re[:, 0] ** 2)
    if se.shape[1] > 1:
        total += np.sum(se[:, 1:] ** 2) + np.sum(re[:, :-1] ** 2)
        total -= 2.0 * np.sum(re[:, :-1] * se[:, 1:])
    return float(total)


def _gram(SZ, RZ):
    """Matrix ``M`` with ``[1, -beta] M [1, -beta]' = H(beta)``."""
    M = SZ[:, :, 0].T @ SZ[:, :, 0] - RZ[:, :, 0].T @ RZ[:, :, 0]
    if SZ.shape[2] > 1:
        M += np.tensordot(SZ[:, :, 1:], SZ[:, :, 1:], axes=([0, 2], [0, 2]))
        M += np.tensordot(RZ[:, :, :-1], RZ[:, :, :-1], axes=([0, 2], [0, 2]))
        C = np.tensordot(RZ[:, :, :-1], SZ[:, :, 1:], axes=([0, 2], [0, 2]))
        M -= C + C.T
    return 0.5 * (M + M.T)


def _residual_slices(prep, theta, beta):
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.size != prep.k:
        raise DimensionMismatch(f"beta has {beta.size} entries, design has k={prep.k}")
    coef = np.concatenate([[1.0], -beta])
    e = np.einsum("nmt,m->nt", prep.Z, coef)
    we = np.einsum("nmt,m->nt", prep.WZ, coef)
    return e - theta.lam * we, theta.gamma * e + theta.rho * we


def quad_form(data: PanelData, beta, ws: LikelihoodWorkspace) -> float:
    """``(Y - X beta)' Sigma^{-1} (Y - X beta)`` up to ``sigma2`` at the workspace ``theta``."""
    prep = prepare(data, ws.weights)
    se, re = _residual_slices(prep, ws.theta, beta)
    return _four_sums(se, re)


def log_det_K(ws: LikelihoodWorkspace) -> float:
    return ws.logdet_K


def _loglik(N, T, sigma2, H, ws):
    NT = N * T
    val = -0.5 * NT * math.log(2.0 * math.pi * sigma2) - 0.5 * ws.logdet_K + T * ws.logdet_S - H / (2.0 * sigma2)
    if not math.isfinite(val):
        raise NonfiniteValue(
            f"log-likelihood is not finite (H={H!r}, sigma2={sigma2!r}, logdet_K={ws.logdet_K!r})"
        )
    return val


def quasi_loglik(data: PanelData, params: ModelParams, w: SpatialWeights, ws=None) -> LikelihoodValue:
    """Gaussian quasi log-likelihood at ``params``."""
    ws = _workspace(w, params.theta, ws)
    prep = prepare(data, w)
    se, re = _residual_slices(prep, params.theta, params.beta)
    H = _four_sums(se, re)
    val = _loglik(prep.N, prep.T, params.sigma2, H, ws)
    return LikelihoodValue(val, H / (prep.N * prep.T), H, ws.logdet_K, ws.logdet_S)


def gls_system(data: PanelData, theta: DependenceParams, w: SpatialWeights):
    """``(X' Sigma^{-1} X, X' Sigma^{-1} Y)`` up to ``sigma2``."""
    M = _gram(*_transform(prepare(data, w), theta))
    return M[1:, 1:], M[1:, 0]


def _solve_gls(XtX, XtY):
    cond = np.linalg.cond(XtX)
    if not cond <= COND_LIMIT:
        raise SingularDesign(f"GLS normal equations are ill-conditioned (cond={cond:.3g})", cond)
    return np.linalg.solve(XtX, XtY)


def concentrated_loglik(data: PanelData, theta: DependenceParams, w: SpatialWeights, ws=None) -> ConcentratedValue:
    """Log-likelihood with ``beta`` (GLS) and ``sigma2`` profiled out.

    Unpacks as ``(value, beta_hat, sigma2_hat)``.
    """
    ws = _workspace(w, theta, ws)
    prep = prepare(data, w)
    SZ, RZ = _transform(prep, theta)
    M = _gram(SZ, RZ)
    beta = _solve_gls(M[1:, 1:], M[1:, 0])
    coef = np.concatenate([[1.0], -beta])
    H = _four_sums(np.einsum("nmt,m->nt", SZ, coef), np.einsum("nmt,m->nt", RZ, coef))
    NT = prep.N * prep.T
    sigma2 = H / NT
    if not sigma2 > 0.0:
        raise NonfiniteValue(f"profiled variance is not positive ({sigma2!r}); the panel is fitted exactly")
    val = _loglik(prep.N, prep.T, sigma2, H, ws)
    return ConcentratedValue(val, beta, sigma2, H, ws.logdet_K, ws.logdet_S)


def gradient_beta(data: PanelData, params: ModelParams, ws: LikelihoodWorkspace):
    """Exact gradient of the log-likelihood in ``beta``: ``X' Sigma^{-1} (Y - X beta) / sigma2``."""
    ws.update(params.theta)
    prep = prepare(data, ws.weights)
    beta = params.beta
    if beta.size != prep.k:
        raise DimensionMismatch(f"beta has {beta.size} entries, design has k={prep.k}")
    M = _gram(*_transform(prep, params.theta))
    return (M[1:, 0] - M[1:, 1:] @ beta) / params.sigma2


def fd_steps(theta: DependenceParams):
    return _FD_SCALE * (1.0 + np.abs(theta.as_array()))


def gradient_theta_fd(data: PanelData, theta: DependenceParams, w: SpatialWeights, h=None, ws=None):
    """Central finite-difference gradient of the concentrated log-likelihood.

    A step that would leave the stationary region is halved until both
    stencil points are feasible; the stencil stays symmetric.
    """
    t0 = theta.as_array()
    steps = fd_steps(theta) if h is None else np.broadcast_to(np.asarray(h, dtype=np.float64), (3,)).copy()
    if ws is None:
        ws = LikelihoodWorkspace(w, theta)
    grad = np.empty(3)
    for i in range(3):
        hi = steps[i]
        for _ in range(60):
            up, dn = t0.copy(), t0.copy()
            up[i] += hi
            dn[i] -= hi
            tu, td = DependenceParams.from_array(up), DependenceParams.from_array(dn)
            if feasibility_check(w, tu) and feasibility_check(w, td):
                break
            hi *= 0.5
        else:
            raise InfeasibleTheta(f"no feasible finite-difference step for component {i} at {theta}")
        fu = concentrated_loglik(data, tu, w, ws).value
        fd = concentrated_loglik(data, td, w, ws).value
        grad[i] = (fu - fd) / (2.0 * hi)
    ws.update(theta)
    return grad


def _profiled_quad(prep, theta):
    """Minimum over ``beta`` of the quadratic form (no log-determinants needed)."""
    SZ, RZ = _transform(prep, theta)
    M = _gram(SZ, RZ)
    beta = _solve_gls(M[1:, 1:], M[1:, 0])
    coef = np.concatenate([[1.0], -beta])
    return _four_sums(np.einsum("nmt,m->nt", SZ, coef), np.einsum("nmt,m->nt", RZ, coef))


def _phi_slope(w: SpatialWeights, x):
    """Central difference of ``x -> log det(I - x W)``, step kept inside the PD range."""
    h = _FD_SCALE * (1.0 + abs(x))
    for _ in range(60):
        lo, hi = x - h, x + h
        if all(1.0 - v * d > 0.0 for v in (lo, hi) for d in (w.d_min, w.d_max)):
            try:
                return (w.log_det_identity_minus(hi) - w.log_det_identity_minus(lo)) / (2.0 * h)
            except NotPositiveDefinite:
                pass
        h *= 0.5
    raise InfeasibleTheta(f"no positive definite finite-difference step around x={x}")


def gradient_theta_split(data: PanelData, theta: DependenceParams, w: SpatialWeights):
    """Finite-difference gradient of the concentrated log-likelihood, split in two parts.

    The profiled quadratic part is differenced in ``theta`` directly (it costs
    O(kNT) per point). The log-determinant part only depends on
    ``phi(x) = log det(I - x W)`` at ``x = lam``, ``(lam + rho) / (1 - gamma)``
    and ``(lam - rho) / (1 + gamma)``, so it is differenced in those scalars and
    combined by the chain rule. This needs six banded factorizations per
    gradient instead of up to fourteen.
    """
    prep = prepare(data, w)
    N, T = prep.N, prep.T
    NT = N * T
    lam, gamma, rho = theta.lam, theta.gamma, theta.rho
    t0 = theta.as_array()

    grad = np.empty(3)
    steps = fd_steps(theta)
    for i in range(3):
        h = steps[i]
        for _ in range(60):
            up, dn = t0.copy(), t0.copy()
            up[i] += h
            dn[i] -= h
            tu, td = DependenceParams.from_array(up), DependenceParams.from_array(dn)
            if feasibility_check(w, tu) and feasibility_check(w, td):
                break
            h *= 0.5
        else:
            raise InfeasibleTheta(f"no feasible finite-difference step for component {i} at {theta}")
        qu = -0.5 * NT * math.log(_profiled_quad(prep, tu))
        qd = -0.5 * NT * math.log(_profiled_quad(prep, td))
        grad[i] = (qu - qd) / (2.0 * h)

    # value = ... + (T - 1) phi(x1) + 0.5 (N log(1 - gamma^2) + phi(x2) + phi(x3))
    a2, a3 = 1.0 - gamma, 1.0 + gamma
    x2, x3 = (lam + rho) / a2, (lam - rho) / a3
    d1 = _phi_slope(w, lam)
    d2 = _phi_slope(w, x2)
    d3 = _phi_slope(w, x3)
    grad[0] += (T - 1) * d1 + 0.5 * (d2 / a2 + d3 / a3)
    grad[1] += 0.5 * (-2.0 * N * gamma / (1.0 - gamma * gamma) + d2 * x2 / a2 - d3 * x3 / a3)
    grad[2] += 0.5 * (d2 / a2 - d3 / a3)
    return grad
