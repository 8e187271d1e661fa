"""Sparse and banded symmetric matrix kernels."""

from .lanczos import ExtremeEigs, extreme_eigenvalues
from .matrices import (
    BandedSymMatrix,
    CholeskyFactor,
    Permutation,
    SymSparseMatrix,
    apply_permutation,
    band_product,
    band_spmv,
    banded_cholesky,
    permute_sparse,
)
from .rcm import bandwidth_of, rcm_order

__all__ = [
    "BandedSymMatrix",
    "CholeskyFactor",
    "ExtremeEigs",
    "Permutation",
    "SymSparseMatrix",
    "apply_permutation",
    "band_product",
    "band_spmv",
    "banded_cholesky",
    "bandwidth_of",
    "extreme_eigenvalues",
    "permute_sparse",
    "rcm_order",
]
