"""Dense brute-force reference implementations for small problems.

Everything here builds the full ``NT x NT`` operators, so sizes are capped by
``MAX_NT``. Intended for tests only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import multivariate_normal

from .errors import GuardExceeded, SingularDesign
from .model import DependenceParams, ModelParams, PanelData, SpatialWeights
from .sparse_band import SymSparseMatrix

MAX_NT = 2000
COND_LIMIT = 1e12


def _dense_w(W):
    if isinstance(W, SpatialWeights):
        if W.source is not None:
            return W.source.to_dense()
        inv = W.permutation.inverse
        return W.W.to_dense()[np.ix_(inv, inv)]
    if isinstance(W, SymSparseMatrix):
        return W.to_dense()
    return np.asarray(W, dtype=np.float64)


def _guard(N, T):
    if N * T > MAX_NT:
        raise GuardExceeded(f"dense oracle limited to NT <= {MAX_NT}, got {N * T}")


@dataclass(frozen=True, eq=False)
class DenseModelMatrices:
    S: np.ndarray
    R: np.ndarray
    A: np.ndarray
    K: np.ndarray
    B: np.ndarray
    Omega: np.ndarray


def dense_matrices(W, theta: DependenceParams, T: int) -> DenseModelMatrices:
    Wd = _dense_w(W)
    N = Wd.shape[0]
    _guard(N, T)
    eye = np.eye(N)
    S = eye - theta.lam * Wd
    R = theta.rho * Wd + theta.gamma * eye
    A = R @ np.linalg.inv(S)
    K = np.linalg.inv(eye - A @ A)
    B = np.zeros((N * T, N * T))
    Omega = np.eye(N * T)
    Omega[:N, :N] = K
    for t in range(T):
        B[t * N : (t + 1) * N, t * N : (t + 1) * N] = S
        if t > 0:
            B[t * N : (t + 1) * N, (t - 1) * N : t * N] = -R
    return DenseModelMatrices(S, R, A, K, B, Omega)


def k_series(A, tol=1e-12, max_terms=100000):
    """``sum_j A^j A'^j`` truncated once the next term is below ``tol``."""
    K = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for _ in range(max_terms):
        term = A @ term @ A.T
        K += term
        if np.max(np.abs(term)) < tol:
            return K
    raise RuntimeError("series for K did not converge; spectral radius of A too close to 1")


def _stack(data: PanelData):
    """Time-major stacking ``(Y_1', ..., Y_T')'`` and the matching ``NT x k`` design."""
    Y = data.Y.T.reshape(-1)
    X = data.X.transpose(2, 0, 1).reshape(data.N * data.T, data.k)
    return Y, X


def dense_precision(W, theta: DependenceParams, T: int):
    """``B' Omega^{-1} B`` (inverse covariance up to ``sigma2``)."""
    m = dense_matrices(W, theta, T)
    return m.B.T @ np.linalg.solve(m.Omega, m.B), m


def dense_loglik(data: PanelData, params: ModelParams, W, check_mvn=True) -> float:
    """Quasi log-likelihood assembled from dense ``B`` and ``Omega``.

    With ``check_mvn`` the value is compared with the multivariate normal
    density of covariance ``sigma2 B^{-1} Omega B'^{-1}`` and an AssertionError
    is raised if they disagree beyond 1e-8 relative.
    """
    _guard(data.N, data.T)
    P, m = dense_precision(W, params.theta, data.T)
    Y, X = _stack(data)
    e = Y - X @ params.beta
    NT = data.N * data.T
    _, logdet_K = np.linalg.slogdet(m.K)
    _, logdet_S = np.linalg.slogdet(m.S)
    H = float(e @ P @ e)
    val = (
        -0.5 * NT * math.log(2.0 * math.pi * params.sigma2)
        - 0.5 * logdet_K
        + data.T * logdet_S
        - H / (2.0 * params.sigma2)
    )
    if check_mvn:
        Binv = np.linalg.inv(m.B)
        cov = params.sigma2 * Binv @ m.Omega @ Binv.T
        ref = multivariate_normal(mean=X @ params.beta, cov=0.5 * (cov + cov.T)).logpdf(Y)
        if abs(ref - val) > 1e-8 * max(1.0, abs(val)):
            raise AssertionError(f"structured log-likelihood {val} disagrees with MVN density {ref}")
    return val


def dense_quad_form(data: PanelData, beta, theta: DependenceParams, W) -> float:
    _guard(data.N, data.T)
    P, _ = dense_precision(W, theta, data.T)
    Y, X = _stack(data)
    e = Y - X @ np.asarray(beta, dtype=np.float64)
    return float(e @ P @ e)


def dense_log_det_K(W, theta: DependenceParams, series=False) -> float:
    m = dense_matrices(W, theta, 1)
    K = k_series(m.A) if series else m.K
    return float(np.linalg.slogdet(K)[1])


def dense_gls(data: PanelData, theta: DependenceParams, W):
    """``(X' Sigma^{-1} X)^{-1} X' Sigma^{-1} Y`` with a dense precision."""
    _guard(data.N, data.T)
    P, _ = dense_precision(W, theta, data.T)
    Y, X = _stack(data)
    XtX = X.T @ P @ X
    cond = np.linalg.cond(XtX)
    if not cond <= COND_LIMIT:
        raise SingularDesign(f"dense GLS system ill-conditioned (cond={cond:.3g})", cond)
    return np.linalg.solve(XtX, X.T @ P @ Y)


def dense_beta_covariance(data: PanelData, theta: DependenceParams, sigma2, W):
    _guard(data.N, data.T)
    P, _ = dense_precision(W, theta, data.T)
    _, X = _stack(data)
    return sigma2 * np.linalg.inv(X.T @ P @ X)


def dense_concentrated(data: PanelData, theta: DependenceParams, W):
    """Profiled value, GLS ``beta`` and ``sigma2`` computed densely."""
    beta = dense_gls(data, theta, W)
    H = dense_quad_form(data, beta, theta, W)
    sigma2 = H / (data.N * data.T)
    val = dense_loglik(data, ModelParams(beta, theta, sigma2), W, check_mvn=False)
    return val, beta, sigma2


def dense_fd_gradient(data: PanelData, theta: DependenceParams, W, h):
    """Central differences of ``dense_concentrated`` with fixed steps ``h``."""
    t0 = theta.as_array()
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (3,))
    g = np.empty(3)
    for i in range(3):
        up, dn = t0.copy(), t0.copy()
        up[i] += h[i]
        dn[i] -= h[i]
        fu = dense_concentrated(data, DependenceParams.from_array(up), W)[0]
        fd = dense_concentrated(data, DependenceParams.from_array(dn), W)[0]
        g[i] = (fu - fd) / (2.0 * h[i])
    return g


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))
