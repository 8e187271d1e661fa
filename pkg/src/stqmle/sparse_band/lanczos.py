"""Extreme eigenvalues of a sparse symmetric matrix by thick-restart Lanczos."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from ..errors import NoConvergence

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
RESTART_DIM = 20
MAX_RESTART_DIM = 160
MAX_RESTARTS = 500
# restarts without a tenfold error reduction before the basis is doubled
PATIENCE = 10
DEFAULT_SEED = 20220101


@dataclass(frozen=True)
class ExtremeEigs:
    d_min: float
    d_max: float
    residuals: tuple
    restarts: int
    matvecs: int
    seed: int
    degenerate: bool

    def __iter__(self):
        return iter((self.d_min, self.d_max))


def _orthogonalize(f, V):
    # two passes of classical Gram-Schmidt keep the basis orthogonal to round-off
    for _ in range(2):
        f -= V @ (V.T @ f)
    return f


def extreme_eigenvalues(
    matvec,
    tol=DEFAULT_TOL,
    *,
    n=None,
    restart_dim=RESTART_DIM,
    max_restart_dim=MAX_RESTART_DIM,
    max_restarts=MAX_RESTARTS,
    seed=DEFAULT_SEED,
    keep=4,
) -> ExtremeEigs:
    """Smallest and largest eigenvalues of a symmetric operator.

    Parameters
    ----------
    matvec : SymSparseMatrix, BandedSymMatrix, array or callable
        The symmetric operator. A bare callable needs ``n``.
    tol : float
        Target absolute accuracy of both eigenvalues. The error of a Ritz value
        with residual ``r`` is bounded by ``min(r, r**2 / gap)`` where ``gap``
        is the distance to the neighbouring Ritz value.
    restart_dim, max_restart_dim : int
        Initial and largest basis size. The basis is doubled whenever
        ``PATIENCE`` restarts pass without a tenfold error reduction, which
        happens when the extreme eigenvalues are tightly clustered.
    seed : int
        Seed of the pseudo-random start vector.

    Returns
    -------
    ExtremeEigs
        Unpacks as ``(d_min, d_max)``.
    """
    if n is None:
        n = matvec.dim if hasattr(matvec, "dim") else np.shape(matvec)[0]
    if hasattr(matvec, "matvec"):
        op = matvec.matvec
    elif not callable(matvec):
        mat = matvec
        op = lambda x: mat @ x  # noqa: E731
    else:
        op = matvec
    if n < 1:
        raise ValueError("operator dimension must be positive")
    m = min(restart_dim, n)
    keep_base = keep
    keep = max(1, min(keep_base, m // 4))

    rng = np.random.default_rng(seed)
    f = rng.standard_normal(n)
    # column-major so that V[:, :j] is a contiguous block
    V = np.zeros((n, m), order="F")
    AV = np.zeros((n, m), order="F")
    k = 0
    matvecs = 0
    scale = 1.0
    best = (np.nan, np.nan)
    best_res = (np.inf, np.inf)
    ref_err, since = np.inf, 0
    for restart in range(max_restarts + 1):
        j = k
        exhausted = False
        while j < m:
            f = _orthogonalize(f, V[:, :j])
            nf = np.linalg.norm(f)
            if nf <= 1e-12 * scale or (j == 0 and nf == 0.0):
                exhausted = True
                break
            V[:, j] = f / nf
            AV[:, j] = op(V[:, j])
            matvecs += 1
            f = AV[:, j].copy()
            j += 1
        if j == 0:
            # zero start vector cannot happen with a Gaussian draw unless n == 0
            raise NoConvergence("Krylov space collapsed at the first vector")
        Vj, AVj = V[:, :j], AV[:, :j]
        H = Vj.T @ AVj
        H = 0.5 * (H + H.T)
        theta, S = np.linalg.eigh(H)
        scale = max(scale, float(np.max(np.abs(theta))))
        # Ritz vectors are only formed for the retained ends of the spectrum
        sel = np.unique(np.concatenate([np.arange(min(keep, j)), np.arange(max(j - keep, 0), j)]))
        VS = Vj @ S[:, sel]
        AVS = AVj @ S[:, sel]
        res_sel = np.linalg.norm(AVS - VS * theta[sel], axis=0)
        if exhausted and j == n:
            res_sel[:] = 0.0
        res = np.full(j, np.inf)
        res[sel] = res_sel
        err = _error_bounds(theta, res)
        best = (theta[0], theta[-1])
        best_res = (res[0], res[-1])
        converged = err[0] <= tol and err[-1] <= tol
        if exhausted or converged:
            distinct = np.unique(np.round(theta / max(scale, 1e-300), 8)).size
            degenerate = bool(exhausted and distinct <= 2 and n > 2)
            if degenerate:
                warnings.warn(
                    "Krylov space became invariant with at most two distinct eigenvalues; "
                    "the weight matrix may not identify all dependence parameters",
                    RuntimeWarning,
                    stacklevel=2,
                )
            if exhausted and not converged and j < n:
                # invariant subspace reached: its Ritz values are exact eigenvalues,
                # but the start vector may miss the extremes
                log.debug("Lanczos found an invariant subspace of dimension %d", j)
            return ExtremeEigs(
                float(theta[0]),
                float(theta[-1]),
                (float(res[0]), float(res[-1])),
                restart,
                matvecs,
                seed,
                degenerate,
            )
        if j < m:
            raise NoConvergence("Krylov expansion stalled", best, best_res)
        # continuation direction: residual of the last Lanczos vector
        f = AV[:, m - 1] - Vj @ H[:, m - 1]
        worst = max(err[0], err[-1])
        if worst < 0.1 * ref_err:
            ref_err, since = worst, 0
        else:
            since += 1
        if since >= PATIENCE and m < min(max_restart_dim, n):
            m = min(2 * m, max_restart_dim, n)
            keep = max(1, min(max(keep_base, m // 5), m // 4))
            V = np.zeros((n, m), order="F")
            AV = np.zeros((n, m), order="F")
            ref_err, since = worst, 0
            log.debug("Lanczos basis grown to %d vectors after %d restarts", m, restart)
        else:
            V[:, sel.size :] = 0.0
            AV[:, sel.size :] = 0.0
        V[:, : sel.size] = VS
        AV[:, : sel.size] = AVS
        k = sel.size
    raise NoConvergence(
        f"no convergence after {max_restarts} restarts", estimates=best, residuals=best_res
    )


def _error_bounds(theta, res):
    err = res.copy()
    if theta.size > 1:
        gaps = np.empty_like(theta)
        gaps[0] = theta[1] - theta[0]
        gaps[-1] = theta[-1] - theta[-2]
        if theta.size > 2:
            gaps[1:-1] = np.minimum(np.diff(theta)[1:], np.diff(theta)[:-1])
        with np.errstate(divide="ignore"):
            quad = np.where(gaps > 0, res**2 / gaps, np.inf)
        err = np.minimum(err, quad)
    return err
