"""Symmetric sparse and banded matrix containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .. import kernels
from ..errors import DimensionMismatch, NotPositiveDefinite, SymmetryError

SYMMETRY_TOL = 1e-10


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SymSparseMatrix:
    """Structurally symmetric sparse matrix held as canonical CSR.

    Explicit zeros and duplicate coordinates are removed on construction.
    """

    csr: sp.csr_array

    def __post_init__(self):
        m = sp.csr_array(self.csr, dtype=np.float64)
        if m.shape[0] != m.shape[1]:
            raise DimensionMismatch(f"matrix must be square, got {m.shape}")
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        diff = (m - m.T).tocoo()
        if diff.nnz:
            bad = np.flatnonzero(np.abs(diff.data) > 0.0)
            if bad.size:
                k = bad[np.lexsort((diff.col[bad], diff.row[bad]))[0]]
                i, j = int(diff.row[k]), int(diff.col[k])
                raise SymmetryError(
                    f"entry ({i}, {j}) has no matching symmetric entry of equal value",
                    coordinate=(i, j),
                )
        object.__setattr__(self, "csr", m)

    @classmethod
    def from_coo(cls, n, rows, cols, vals):
        return cls(sp.coo_array((vals, (rows, cols)), shape=(n, n)).tocsr())

    @classmethod
    def from_dense(cls, a):
        return cls(sp.csr_array(np.asarray(a, dtype=np.float64)))

    @property
    def dim(self):
        return self.csr.shape[0]

    @property
    def nnz(self):
        return self.csr.nnz

    def bandwidth(self):
        coo = self.csr.tocoo()
        if coo.nnz == 0:
            return 0
        return int(np.max(np.abs(coo.row - coo.col)))

    def matvec(self, x):
        return self.csr @ x

    def diagonal(self):
        return self.csr.diagonal()

    def to_dense(self):
        return self.csr.toarray()


@dataclass(frozen=True, eq=False)
class BandedSymMatrix:
    """Symmetric banded matrix, dense inside the band.

    ``band`` has shape ``(N, b + 1)`` with ``band[i, c] = A[i, i - b + c]``;
    the diagonal is the last column.
    """

    band: np.ndarray

    def __post_init__(self):
        band = np.asarray(self.band, dtype=np.float64)
        if band.ndim != 2 or band.shape[1] < 1:
            raise DimensionMismatch(f"band must be 2-D with at least one column, got {band.shape}")
        n, w = band.shape
        b = w - 1
        band = band.copy()
        for c in range(b):
            band[: b - c, c] = 0.0
        object.__setattr__(self, "band", _readonly(_tighten(band)))

    @property
    def dim(self):
        return self.band.shape[0]

    @property
    def bandwidth(self):
        return self.band.shape[1] - 1

    @classmethod
    def identity(cls, n, scale=1.0):
        return cls(np.full((n, 1), float(scale)))

    @classmethod
    def from_sparse(cls, w: SymSparseMatrix):
        coo = sp.tril(w.csr).tocoo()
        b = int(np.max(coo.row - coo.col)) if coo.nnz else 0
        band = np.zeros((w.dim, b + 1))
        band[coo.row, coo.col - coo.row + b] = coo.data
        return cls(band)

    @classmethod
    def from_dense(cls, a, tol=0.0):
        a = np.asarray(a, dtype=np.float64)
        n = a.shape[0]
        rows, cols = np.nonzero(np.abs(np.tril(a)) > tol)
        b = int(np.max(rows - cols)) if rows.size else 0
        band = np.zeros((n, b + 1))
        band[rows, cols - rows + b] = a[rows, cols]
        return cls(band)

    def entry(self, i, j):
        if j > i:
            i, j = j, i
        if i - j > self.bandwidth:
            return 0.0
        return float(self.band[i, j - i + self.bandwidth])

    def diagonal(self):
        return self.band[:, -1].copy()

    def to_dense(self):
        n, b = self.dim, self.bandwidth
        out = np.zeros((n, n))
        for d in range(min(b, n - 1) + 1):
            v = self.band[d:, b - d]
            idx = np.arange(n - d)
            out[idx + d, idx] = v
            out[idx, idx + d] = v
        return out

    def to_sparse(self):
        return SymSparseMatrix(sp.csr_array(self.to_dense()))

    def lincomb(self, alpha, other=None, beta=0.0):
        """``alpha * self + beta * other`` (``other`` defaults to the identity)."""
        if other is None:
            other = BandedSymMatrix.identity(self.dim)
        if other.dim != self.dim:
            raise DimensionMismatch(f"dimension {self.dim} vs {other.dim}")
        b = max(self.bandwidth, other.bandwidth)
        out = np.zeros((self.dim, b + 1))
        out[:, b - self.bandwidth :] += alpha * self.band
        out[:, b - other.bandwidth :] += beta * other.band
        return BandedSymMatrix(out)

    def shifted(self, a, c):
        """``a * I - c * self``."""
        return self.lincomb(-c, None, a)

    def __matmul__(self, x):
        return band_spmv(self, x)


def _tighten(band):
    b = band.shape[1] - 1
    keep = 0
    while keep < b and not np.any(band[:, keep]):
        keep += 1
    return band[:, keep:] if keep else band


@dataclass(frozen=True)
class Permutation:
    """``forward[i]`` is the original index placed at position ``i``."""

    forward: np.ndarray
    inverse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        fwd = np.asarray(self.forward, dtype=np.int64)
        n = fwd.size
        if fwd.ndim != 1 or (n and (fwd.min() < 0 or fwd.max() >= n)) or np.unique(fwd).size != n:
            raise ValueError("forward map is not a permutation of 0..N-1")
        inv = np.empty(n, dtype=np.int64)
        inv[fwd] = np.arange(n)
        fwd.setflags(write=False)
        inv.setflags(write=False)
        object.__setattr__(self, "forward", fwd)
        object.__setattr__(self, "inverse", inv)

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    def __len__(self):
        return self.forward.size


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """Lower banded factor ``L`` with ``L L^T = A``, same storage as the input."""

    band: np.ndarray
    log_det: float
    _aux: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dim(self):
        return self.band.shape[0]

    @property
    def bandwidth(self):
        return self.band.shape[1] - 1

    def solve(self, rhs):
        if "solve" not in self._aux:
            self._aux["solve"] = kernels.solve_prepare(self.band)
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.dim:
            raise DimensionMismatch(f"rhs has {rhs.shape[0]} rows, factor has {self.dim}")
        return kernels.band_cholesky_solve(self.band, rhs, self._aux["solve"])

    def to_dense(self):
        n, b = self.dim, self.bandwidth
        out = np.zeros((n, n))
        for d in range(min(b, n - 1) + 1):
            idx = np.arange(n - d)
            out[idx + d, idx] = self.band[d:, b - d]
        return out


def apply_permutation(w: SymSparseMatrix, p: Permutation) -> BandedSymMatrix:
    if len(p) != w.dim:
        raise DimensionMismatch(f"permutation of length {len(p)} for a {w.dim}x{w.dim} matrix")
    permuted = w.csr[p.forward][:, p.forward]
    return BandedSymMatrix.from_sparse(SymSparseMatrix(permuted))


def permute_sparse(w: SymSparseMatrix, p: Permutation) -> SymSparseMatrix:
    if len(p) != w.dim:
        raise DimensionMismatch(f"permutation of length {len(p)} for a {w.dim}x{w.dim} matrix")
    return SymSparseMatrix(w.csr[p.forward][:, p.forward])


def band_spmv(a: BandedSymMatrix, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != a.dim:
        raise DimensionMismatch(f"vector has {v.shape[0]} rows, matrix is {a.dim}x{a.dim}")
    return kernels.band_spmv(a.band, v)


def band_product(a: BandedSymMatrix, b: BandedSymMatrix, tol=SYMMETRY_TOL) -> BandedSymMatrix:
    """Exact product of two commuting symmetric banded matrices."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimension {a.dim} vs {b.dim}")
    bc = min(a.bandwidth + b.bandwidth, max(a.dim - 1, 0))
    out, asym = kernels.band_product(a.band, b.band, bc)
    scale = max(1.0, float(np.max(np.abs(out), initial=0.0)))
    if asym > tol * scale:
        raise SymmetryError(f"product is not symmetric (max asymmetry {asym:.3g}); inputs do not commute")
    return BandedSymMatrix(out)


def banded_cholesky(a: BandedSymMatrix) -> CholeskyFactor:
    L, info = kernels.band_cholesky(np.ascontiguousarray(a.band))
    if info >= 0:
        raise NotPositiveDefinite(int(info))
    log_det = 2.0 * float(np.sum(np.log(L[:, -1])))
    return CholeskyFactor(_readonly(L), log_det)
