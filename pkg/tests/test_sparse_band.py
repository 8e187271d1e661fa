import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from stqmle.errors import DimensionMismatch, NotPositiveDefinite, SymmetryError
from stqmle.kernels import load_backend
from stqmle.simulate import grid_adjacency
from stqmle.sparse_band import (
    BandedSymMatrix,
    Permutation,
    SymSparseMatrix,
    apply_permutation,
    band_product,
    band_spmv,
    banded_cholesky,
    bandwidth_of,
    extreme_eigenvalues,
    permute_sparse,
    rcm_order,
)

GRID10_DMAX = 4.0 * math.cos(math.pi / 11.0)


def chain(n):
    return SymSparseMatrix(sp.csr_array(sp.diags([1.0, 1.0], [-1, 1], shape=(n, n))))


def random_banded_spd(n, b, rng):
    a = np.zeros((n, n))
    for d in range(1, b + 1):
        v = rng.uniform(-1.0, 1.0, n - d)
        a += np.diag(v, d) + np.diag(v, -d)
    a += np.diag(np.abs(a).sum(axis=1) + rng.uniform(0.5, 2.0, n))
    return a


def shuffled_grid(n, seed):
    w = grid_adjacency(n)
    p = Permutation(np.random.default_rng(seed).permutation(n * n))
    return permute_sparse(w, p)


# -- SymSparseMatrix ---------------------------------------------------------


def test_sparse_drops_explicit_zeros_and_merges_duplicates():
    m = SymSparseMatrix.from_coo(3, [0, 1, 0, 1, 2], [1, 0, 1, 0, 2], [1.0, 2.0, 1.0, 0.0, 0.0])
    assert m.nnz == 2
    assert m.to_dense()[0, 1] == 2.0 and m.to_dense()[1, 0] == 2.0


def test_sparse_rejects_asymmetry_with_coordinate():
    with pytest.raises(SymmetryError) as exc:
        SymSparseMatrix.from_coo(3, [0, 1, 2], [1, 0, 0], [1.0, 1.0, 0.5])
    assert exc.value.coordinate in ((0, 2), (2, 0))


def test_sparse_rejects_unequal_values():
    with pytest.raises(SymmetryError):
        SymSparseMatrix.from_dense([[0.0, 1.0], [1.0 + 1e-15, 0.0]])


def test_sparse_requires_square():
    with pytest.raises(DimensionMismatch):
        SymSparseMatrix(sp.csr_array(np.zeros((2, 3))))


# -- RCM and permutations ------------------------------------------------------


def test_rcm_row_major_grid_bandwidth():
    w = grid_adjacency(10)
    assert w.bandwidth() == 10
    assert bandwidth_of(w, rcm_order(w)) <= 10


@pytest.mark.parametrize("n", [10, 30])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rcm_shuffled_grid_bandwidth(n, seed):
    w = shuffled_grid(n, seed)
    assert w.bandwidth() > 2 * n
    p = rcm_order(w)
    assert bandwidth_of(w, p) <= 2 * n
    assert apply_permutation(w, p).bandwidth <= 2 * n


def test_rcm_diagonal_only():
    w = SymSparseMatrix(sp.csr_array(sp.diags(np.arange(1.0, 6.0))))
    p = rcm_order(w)
    assert sorted(p.forward.tolist()) == list(range(5))
    assert bandwidth_of(w, p) == 0


def test_rcm_disconnected_components_are_bijective():
    a = sp.block_diag([grid_adjacency(3).csr, chain(4).csr, sp.csr_array((2, 2))])
    w = SymSparseMatrix(sp.csr_array(a))
    p = rcm_order(w)
    assert np.array_equal(np.sort(p.forward), np.arange(w.dim))
    assert bandwidth_of(w, p) <= 3


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), density=st.floats(0.0, 0.3), seed=st.integers(0, 10_000))
def test_rcm_is_a_permutation(n, density, seed):
    a = sp.random(n, n, density=density, random_state=seed, format="csr")
    w = SymSparseMatrix(sp.csr_array(a + a.T))
    p = rcm_order(w)
    assert np.array_equal(np.sort(p.forward), np.arange(n))
    assert np.array_equal(p.forward[p.inverse], np.arange(n))


def test_permutation_validation():
    with pytest.raises(ValueError):
        Permutation(np.array([0, 0, 1]))
    with pytest.raises(ValueError):
        Permutation(np.array([0, 3, 1]))


def test_apply_permutation_identity_and_swap():
    w = grid_adjacency(3)
    b = apply_permutation(w, Permutation.identity(9))
    assert np.array_equal(b.to_dense(), w.to_dense())
    assert b.bandwidth == 3
    pair = SymSparseMatrix.from_dense([[1.0, 2.0], [2.0, 3.0]])
    swapped = apply_permutation(pair, Permutation(np.array([1, 0]))).to_dense()
    assert np.array_equal(swapped, [[3.0, 2.0], [2.0, 1.0]])


def test_permutation_preserves_spectrum(rng):
    w = shuffled_grid(8, 4)
    p = rcm_order(w)
    before = np.linalg.eigvalsh(w.to_dense())
    after = np.linalg.eigvalsh(apply_permutation(w, p).to_dense())
    assert np.allclose(before, after, atol=1e-8)


# -- banded storage and kernels ------------------------------------------------


def test_banded_roundtrip_and_tight_bandwidth(rng):
    a = random_banded_spd(12, 3, rng)
    b = BandedSymMatrix.from_dense(a)
    assert b.bandwidth == 3
    assert np.array_equal(b.to_dense(), a)
    assert b.entry(0, 5) == 0.0 and b.entry(4, 2) == a[4, 2]
    assert BandedSymMatrix.identity(4).bandwidth == 0


def test_spmv_examples():
    v = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(band_spmv(BandedSymMatrix.identity(4), v), v)
    c = apply_permutation(chain(4), Permutation.identity(4))
    assert np.array_equal(band_spmv(c, np.ones(4)), [1.0, 2.0, 2.0, 1.0])


def test_spmv_matches_dense(rng):
    a = random_banded_spd(50, 6, rng)
    v = rng.standard_normal(50)
    out = band_spmv(BandedSymMatrix.from_dense(a), v)
    assert np.allclose(out, a @ v, rtol=1e-12, atol=1e-12 * np.abs(a @ v).max())
    V = rng.standard_normal((50, 3, 2))
    out = band_spmv(BandedSymMatrix.from_dense(a), V)
    assert np.allclose(out, np.einsum("ij,jkt->ikt", a, V), atol=1e-12)


def test_spmv_dimension_check():
    with pytest.raises(DimensionMismatch):
        band_spmv(BandedSymMatrix.identity(3), np.ones(4))


def test_product_examples():
    c3 = apply_permutation(chain(3), Permutation.identity(3))
    sq = band_product(c3, c3).to_dense()
    assert np.array_equal(sq, [[1.0, 0.0, 1.0], [0.0, 2.0, 0.0], [1.0, 0.0, 1.0]])
    g = apply_permutation(grid_adjacency(3), Permutation.identity(9))
    S = g.shifted(1.0, 0.1)
    dense = np.eye(9) - 0.1 * g.to_dense()
    assert np.allclose(band_product(S, S).to_dense(), dense @ dense, atol=1e-12)
    eye = BandedSymMatrix.identity(9)
    assert np.allclose(band_product(S, eye).to_dense(), S.to_dense(), atol=0)


def test_product_rejects_non_commuting(rng):
    a = BandedSymMatrix.from_dense(random_banded_spd(6, 1, rng))
    b = BandedSymMatrix.from_dense(random_banded_spd(6, 2, rng))
    with pytest.raises(SymmetryError):
        band_product(a, b)


def test_product_associates_with_spmv(rng):
    g = apply_permutation(grid_adjacency(6), Permutation.identity(36))
    A = g.shifted(1.0, 0.2)
    B = g.shifted(0.7, -0.05)
    v = rng.standard_normal(36)
    lhs = band_spmv(band_product(A, B), v)
    rhs = band_spmv(A, band_spmv(B, v))
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_cholesky_scaled_identity():
    f = banded_cholesky(BandedSymMatrix.identity(5, scale=4.0))
    assert f.log_det == pytest.approx(5 * math.log(4.0), rel=1e-14)


@pytest.mark.parametrize("n,b", [(1, 0), (7, 2), (60, 5), (200, 12)])
def test_cholesky_logdet_and_solve_match_dense(n, b, rng):
    a = random_banded_spd(n, b, rng)
    f = banded_cholesky(BandedSymMatrix.from_dense(a))
    ref = np.linalg.slogdet(a)[1]
    assert f.log_det == pytest.approx(ref, rel=1e-8, abs=1e-10)
    assert np.allclose(f.to_dense() @ f.to_dense().T, a, atol=1e-10)
    r = rng.standard_normal(n)
    assert np.allclose(f.solve(r), np.linalg.solve(a, r), atol=1e-10)
    R = rng.standard_normal((n, 4))
    assert np.allclose(f.solve(R), np.linalg.solve(a, R), atol=1e-10)


def test_cholesky_on_feasible_model_operator(grid10):
    W = grid10.W
    S = W.shifted(1.0, 0.1)
    R = W.shifted(0.7, 0.03)  # gamma I + rho W with rho = -0.03
    G = band_product(S, S).lincomb(1.0, band_product(R, R), -1.0)
    ref = np.sum(np.log(np.linalg.eigvalsh(G.to_dense())))
    assert banded_cholesky(G).log_det == pytest.approx(ref, rel=1e-8)


def test_cholesky_indefinite_raises(grid10):
    # lambda past 1/d_max makes I - lambda W indefinite
    lam = 1.2 / grid10.d_max
    with pytest.raises(NotPositiveDefinite) as exc:
        banded_cholesky(grid10.W.shifted(1.0, lam))
    assert 0 <= exc.value.pivot < grid10.N


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 60), b=st.integers(0, 8), seed=st.integers(0, 10_000))
def test_cholesky_property_logdet(n, b, seed):
    b = min(b, max(n - 1, 0))
    a = random_banded_spd(n, b, np.random.default_rng(seed))
    f = banded_cholesky(BandedSymMatrix.from_dense(a))
    assert f.log_det == pytest.approx(np.linalg.slogdet(a)[1], rel=1e-8, abs=1e-9)


# -- backend parity --------------------------------------------------------------


@pytest.mark.parametrize("n,b", [(1, 0), (9, 3), (120, 10), (500, 40)])
def test_backends_agree(n, b, rng):
    nb, npk = load_backend("numba"), load_backend("numpy")
    band = BandedSymMatrix.from_dense(random_banded_spd(n, b, rng)).band
    v = rng.standard_normal((n, 2))
    assert np.allclose(nb.band_spmv(band, v), npk.band_spmv(band, v), atol=1e-12)
    p1, a1 = nb.band_product(band, band, min(2 * b, n - 1))
    p2, a2 = npk.band_product(band, band, min(2 * b, n - 1))
    assert np.allclose(p1, p2, atol=1e-11)
    L1, i1 = nb.band_cholesky(band)
    L2, i2 = npk.band_cholesky(band)
    assert i1 == i2 == -1
    assert np.allclose(L1, L2, atol=1e-12)
    for r in (v, v[:, 0]):
        x1 = nb.band_cholesky_solve(L1, r, nb.solve_prepare(L1))
        x2 = npk.band_cholesky_solve(L2, r, npk.solve_prepare(L2))
        assert x1.shape == r.shape
        assert np.allclose(x1, x2, atol=1e-11)


def test_backends_report_same_failing_pivot():
    band = np.zeros((4, 2))
    band[:, 1] = [1.0, 1.0, -1.0, 1.0]
    assert load_backend("numba").band_cholesky(band)[1] == 2
    assert load_backend("numpy").band_cholesky(band)[1] == 2


# -- Lanczos ---------------------------------------------------------------------


def test_lanczos_grid10_analytic():
    e = extreme_eigenvalues(grid_adjacency(10))
    assert e.d_max == pytest.approx(GRID10_DMAX, abs=1e-5)
    assert e.d_min == pytest.approx(-GRID10_DMAX, abs=1e-5)


@pytest.mark.parametrize("n", [5, 12, 20])
def test_lanczos_matches_dense(n):
    w = shuffled_grid(n, n) if n != 20 else grid_adjacency(n, "second")
    ev = np.linalg.eigvalsh(w.to_dense())
    d_min, d_max = extreme_eigenvalues(w)
    assert d_min == pytest.approx(ev[0], abs=1e-8)
    assert d_max == pytest.approx(ev[-1], abs=1e-8)


def test_lanczos_small_cases():
    with pytest.warns(RuntimeWarning, match="two distinct"):
        assert tuple(extreme_eigenvalues(SymSparseMatrix(sp.csr_array((4, 4))))) == (0.0, 0.0)
    d_min, d_max = extreme_eigenvalues(chain(3))
    assert d_min == pytest.approx(-math.sqrt(2.0), abs=1e-10)
    assert d_max == pytest.approx(math.sqrt(2.0), abs=1e-10)


def test_lanczos_bounds_rayleigh_quotients(rng):
    w = shuffled_grid(15, 7)
    d_min, d_max = extreme_eigenvalues(w)
    for _ in range(100):
        x = rng.standard_normal(w.dim)
        q = x @ (w.csr @ x) / (x @ x)
        assert d_min - 1e-10 <= q <= d_max + 1e-10


def test_lanczos_is_deterministic():
    w = shuffled_grid(9, 3)
    a = extreme_eigenvalues(w)
    b = extreme_eigenvalues(w)
    assert (a.d_min, a.d_max, a.matvecs) == (b.d_min, b.d_max, b.matvecs)


def test_lanczos_clustered_extremes_on_long_strip():
    # top gap about 2e-5: the basis has to grow before the error bound is met
    from stqmle.simulate import lattice_adjacency

    e = extreme_eigenvalues(lattice_adjacency(25, 400))
    exact = 2 * math.cos(math.pi / 26) + 2 * math.cos(math.pi / 401)
    assert e.d_max == pytest.approx(exact, abs=1e-8)
    assert e.d_min == pytest.approx(-exact, abs=1e-8)
