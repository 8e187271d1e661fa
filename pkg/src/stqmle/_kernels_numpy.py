"""Pure-numpy versions of the banded kernels (same storage as the numba ones).

Products work diagonal by diagonal. The Cholesky factorization and solves call
LAPACK ``dpbtrf``/``dpbtrs`` through scipy after converting to its lower band
layout ``ab[d, j] = A[j + d, j]``.
"""

import numpy as np
from scipy.linalg import lapack


def band_spmv(band, x):
    x = np.asarray(x, dtype=np.float64)
    n, w = band.shape
    b = w - 1
    col = (slice(None),) + (None,) * (x.ndim - 1)
    y = band[:, b][col] * x
    for d in range(1, min(b, n - 1) + 1):
        a = band[d:, b - d][col]
        y[d:] += a * x[: n - d]
        y[: n - d] += a * x[d:]
    return y


def _diag(band, p):
    """Full diagonal ``D[j] = A[j + p, j]`` padded with zeros to length n."""
    n, w = band.shape
    b = w - 1
    out = np.zeros(n)
    if abs(p) > b or abs(p) >= n:
        return out
    if p >= 0:
        out[: n - p] = band[p:, b - p]
    else:
        out[-p:] = band[-p:, b + p]
    return out


def band_product(a, bm, bc):
    n = a.shape[0]
    ba = a.shape[1] - 1
    bb = bm.shape[1] - 1
    full = {}
    db = {q: _diag(bm, q) for q in range(-bb, bb + 1)}
    for p in range(-ba, ba + 1):
        da = _diag(a, p)
        for q in range(-bb, bb + 1):
            s = p + q
            acc = full.setdefault(s, np.zeros(n))
            if q >= 0:
                if q < n:
                    acc[: n - q] += da[q:] * db[q][: n - q]
            elif -q < n:
                acc[-q:] += da[: n + q] * db[q][-q:]
    out = np.zeros((n, bc + 1))
    asym = 0.0
    for s in range(0, min(bc, n - 1) + 1):
        lower = full.get(s)
        if lower is None:
            continue
        out[s:, bc - s] = lower[: n - s]
        upper = full.get(-s)
        if s > 0 and upper is not None:
            asym = max(asym, float(np.max(np.abs(upper[s:] - lower[: n - s]), initial=0.0)))
    for s, v in full.items():
        if abs(s) > bc and np.any(v != 0.0):
            asym = max(asym, float(np.max(np.abs(v))))
    return out, asym


def _to_lapack(band):
    n, w = band.shape
    b = w - 1
    ab = np.zeros((w, n), order="F")
    for d in range(min(b, n - 1) + 1):
        ab[d, : n - d] = band[d:, b - d]
    return ab


def _from_lapack(ab):
    w, n = ab.shape
    b = w - 1
    out = np.zeros((n, w))
    for d in range(min(b, n - 1) + 1):
        out[d:, b - d] = ab[d, : n - d]
    return out


def band_cholesky(band):
    ab, info = lapack.dpbtrf(_to_lapack(band), lower=1, overwrite_ab=1)
    if info < 0:
        raise ValueError(f"dpbtrf rejected argument {-info}")
    L = _from_lapack(ab)
    if info > 0:
        return L, info - 1
    return L, -1


def solve_prepare(L):
    return _to_lapack(L)


def band_cholesky_solve(L, rhs, aux=None):
    ab = _to_lapack(L) if aux is None else aux
    rhs = np.asarray(rhs, dtype=np.float64)
    flat = rhs.reshape(rhs.shape[0], -1)
    x, info = lapack.dpbtrs(ab, flat, lower=1)
    if info != 0:
        raise ValueError(f"dpbtrs rejected argument {-info}")
    return x.reshape(rhs.shape)
