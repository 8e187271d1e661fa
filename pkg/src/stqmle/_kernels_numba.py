"""Numba kernels for symmetric banded matrices in row-lower storage.

``band[i, c]`` holds ``A[i, i - b + c]`` for ``c = 0..b``; the diagonal sits in
the last column and slots that fall left of column 0 are kept at zero.
"""

import math

import numpy as np
from numba import njit

_FM = {"reassoc", "contract"}


@njit(cache=True)
def _spmv2d(band, x):
    n, w = band.shape
    b = w - 1
    m = x.shape[1]
    y = np.zeros((n, m))
    for i in range(n):
        d = band[i, b]
        for r in range(m):
            y[i, r] += d * x[i, r]
        for j in range(max(0, i - b), i):
            a = band[i, j - i + b]
            if a != 0.0:
                for r in range(m):
                    y[i, r] += a * x[j, r]
                    y[j, r] += a * x[i, r]
    return y


@njit(cache=True)
def _spmv1d(band, x):
    n, w = band.shape
    b = w - 1
    y = np.empty(n)
    for i in range(n):
        y[i] = band[i, b] * x[i]
    for i in range(n):
        j0 = max(0, i - b)
        xi = x[i]
        s = 0.0
        for j in range(j0, i):
            a = band[i, j - i + b]
            s += a * x[j]
            y[j] += a * xi
        y[i] += s
    return y


def band_spmv(band, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return _spmv1d(band, np.ascontiguousarray(x))
    flat = np.ascontiguousarray(x.reshape(x.shape[0], -1))
    return _spmv2d(band, flat).reshape(x.shape)


@njit(cache=True, inline="always")
def _entry(band, b, n, i, k):
    if k < 0 or k >= n:
        return 0.0
    if k <= i:
        if i - k > b:
            return 0.0
        return band[i, k - i + b]
    if k - i > b:
        return 0.0
    return band[k, i - k + b]


@njit(cache=True)
def band_product(a, bm, bc):
    """Lower band of ``A @ B`` with bandwidth ``bc`` plus the max asymmetry seen."""
    n = a.shape[0]
    ba = a.shape[1] - 1
    bb = bm.shape[1] - 1
    out = np.zeros((n, bc + 1))
    asym = 0.0
    for i in range(n):
        for j in range(max(0, i - bc), i + 1):
            lo = max(i - ba, j - bb)
            hi = min(i + ba, j + bb)
            s = 0.0
            for k in range(max(lo, 0), min(hi, n - 1) + 1):
                s += _entry(a, ba, n, i, k) * _entry(bm, bb, n, k, j)
            out[i, j - i + bc] = s
            if j != i:
                lo = max(j - ba, i - bb)
                hi = min(j + ba, i + bb)
                t = 0.0
                for k in range(max(lo, 0), min(hi, n - 1) + 1):
                    t += _entry(a, ba, n, j, k) * _entry(bm, bb, n, k, i)
                diff = abs(s - t)
                if diff > asym:
                    asym = diff
    return out, asym


@njit(cache=True, fastmath=_FM, inline="never")
def _dot(a, b):
    # kept out of line so LLVM sees a clean reduction and vectorizes it
    s = 0.0
    for k in range(a.shape[0]):
        s += a[k] * b[k]
    return s


@njit(cache=True, fastmath=_FM)
def band_cholesky(band):
    """Up-looking banded Cholesky. Returns ``(L, info)``; ``info`` is the failing
    pivot index, or -1 on success."""
    n, w = band.shape
    b = w - 1
    L = np.zeros((n, w))
    for i in range(n):
        j0 = max(0, i - b)
        Li = L[i]
        ci = j0 - i + b
        for j in range(j0, i):
            Lj = L[j]
            cj = j0 - j + b
            m = j - j0
            s = band[i, j - i + b] - _dot(Li[ci : ci + m], Lj[cj : cj + m])
            Li[j - i + b] = s / Lj[b]
        s = band[i, b] - _dot(Li[ci:b], Li[ci:b])
        if not s > 0.0:
            return L, i
        Li[b] = math.sqrt(s)
    return L, -1


@njit(cache=True, fastmath=_FM)
def _chol_solve2d(L, r):
    n, w = L.shape
    b = w - 1
    m = r.shape[1]
    y = r.copy()
    for i in range(n):
        for j in range(max(0, i - b), i):
            a = L[i, j - i + b]
            for c in range(m):
                y[i, c] -= a * y[j, c]
        d = L[i, b]
        for c in range(m):
            y[i, c] /= d
    for i in range(n - 1, -1, -1):
        d = L[i, b]
        for c in range(m):
            y[i, c] /= d
        for j in range(max(0, i - b), i):
            a = L[i, j - i + b]
            for c in range(m):
                y[j, c] -= a * y[i, c]
    return y


@njit(cache=True, fastmath=_FM)
def _chol_solve1d(L, r):
    n, w = L.shape
    b = w - 1
    y = r.copy()
    for i in range(n):
        j0 = max(0, i - b)
        y[i] = (y[i] - _dot(L[i, j0 - i + b : b], y[j0:i])) / L[i, b]
    for i in range(n - 1, -1, -1):
        y[i] /= L[i, b]
        j0 = max(0, i - b)
        yi = y[i]
        Li = L[i]
        for j in range(j0, i):
            y[j] -= Li[j - i + b] * yi
    return y


def solve_prepare(L):
    return None


def band_cholesky_solve(L, rhs, aux=None):
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.ndim == 1:
        return _chol_solve1d(L, rhs)
    flat = np.ascontiguousarray(rhs.reshape(rhs.shape[0], -1))
    return _chol_solve2d(L, flat).reshape(rhs.shape)
