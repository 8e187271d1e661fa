import math
import tracemalloc

import numpy as np
import pytest

from conftest import random_feasible_theta, random_panel, random_params
from stqmle.errors import DimensionMismatch, InfeasibleTheta, SingularDesign
from stqmle.likelihood import (
    LikelihoodWorkspace,
    concentrated_loglik,
    fd_steps,
    gradient_beta,
    gradient_theta_fd,
    gradient_theta_split,
    log_det_K,
    quad_form,
    quasi_loglik,
)
from stqmle.model import DependenceParams, ModelParams, PanelData, SpatialWeights
from stqmle.oracle import dense_beta_covariance, dense_fd_gradient, dense_gls, dense_log_det_K, dense_loglik, dense_quad_form
from stqmle.simulate import SimulationDesign, grid_adjacency, make_grid_weights, simulate_panel
from stqmle.sparse_band import Permutation, permute_sparse


def test_quad_form_theta_zero_is_rss(grid3, rng):
    data = random_panel(9, 4, 2, rng)
    beta = rng.standard_normal(2)
    ws = LikelihoodWorkspace(grid3, DependenceParams.zero())
    r = data.Y - np.einsum("nkt,k->nt", data.X, beta)
    assert quad_form(data, beta, ws) == pytest.approx(np.sum(r**2), rel=1e-13)


def test_quad_form_zero_residual(grid3, rng):
    X = rng.standard_normal((9, 2, 3))
    beta = np.array([1.0, -2.0])
    data = PanelData(np.einsum("nkt,k->nt", X, beta), X)
    ws = LikelihoodWorkspace(grid3, DependenceParams(0.1, 0.5, 0.05))
    assert abs(quad_form(data, beta, ws)) < 1e-20


def test_quad_form_matches_dense(grid3, rng):
    data = random_panel(9, 3, 2, rng)
    for _ in range(20):
        t = random_feasible_theta(grid3, rng)
        beta = rng.standard_normal(2)
        ws = LikelihoodWorkspace(grid3, t)
        assert quad_form(data, beta, ws) == pytest.approx(dense_quad_form(data, beta, t, grid3), rel=1e-10)


def test_quad_form_dimension_check(grid3, rng):
    data = random_panel(9, 3, 2, rng)
    with pytest.raises(DimensionMismatch):
        quad_form(data, np.ones(3), LikelihoodWorkspace(grid3, DependenceParams.zero()))


def test_log_det_K_examples(grid10):
    assert log_det_K(LikelihoodWorkspace(grid10, DependenceParams.zero())) == pytest.approx(0.0, abs=1e-12)
    ws = LikelihoodWorkspace(grid10, DependenceParams(0.0, 0.5, 0.0))
    assert log_det_K(ws) == pytest.approx(-100 * math.log(0.75), rel=1e-12)
    t = DependenceParams(0.05, 0.7, -0.03)
    ref = dense_log_det_K(grid10, t, series=True)
    assert log_det_K(LikelihoodWorkspace(grid10, t)) == pytest.approx(ref, rel=1e-8)


def test_loglik_theta_zero_iid(grid3, rng):
    data = random_panel(9, 3, 2, rng)
    p = ModelParams(np.array([0.3, 0.2]), DependenceParams.zero(), 1.0)
    r = data.Y - np.einsum("nkt,k->nt", data.X, p.beta)
    ref = -0.5 * 27 * math.log(2 * math.pi) - 0.5 * np.sum(r**2)
    assert quasi_loglik(data, p, grid3).loglik == pytest.approx(ref, rel=1e-13)


@pytest.mark.parametrize("n,T", [(3, 1), (3, 3), (4, 2), (5, 4)])
def test_loglik_matches_dense_oracle(n, T, rng):
    w = make_grid_weights(n)
    data = random_panel(w.N, T, 2, rng)
    for _ in range(15):
        p = random_params(2, random_feasible_theta(w, rng), rng)
        val = quasi_loglik(data, p, w).loglik
        assert val == pytest.approx(dense_loglik(data, p, w, check_mvn=False), rel=1e-8)


def test_loglik_infeasible_raises(grid3, rng):
    data = random_panel(9, 3, 2, rng)
    p = ModelParams(np.ones(2), DependenceParams(0.9, 0.0, 0.0), 1.0)
    with pytest.raises(InfeasibleTheta):
        quasi_loglik(data, p, grid3)


def test_workspace_reuse_and_version(grid5):
    ws = LikelihoodWorkspace(grid5, DependenceParams.zero())
    v = ws.version
    ws.update(DependenceParams.zero())
    assert ws.version == v
    ws.update(DependenceParams(0.1, 0.2, 0.0))
    assert ws.version == v + 1
    with pytest.raises(ValueError):
        quasi_loglik(random_panel(9, 2, 1, np.random.default_rng(0)), ModelParams([1.0], DependenceParams.zero(), 1.0), make_grid_weights(3), ws)


def test_concentrated_theta_zero_is_ols(grid3, rng):
    data = random_panel(9, 4, 2, rng)
    X = data.X.transpose(2, 0, 1).reshape(36, 2)
    y = data.Y.T.reshape(-1)
    beta_ols, rss = np.linalg.lstsq(X, y, rcond=None)[:2]
    c = concentrated_loglik(data, DependenceParams.zero(), grid3)
    assert np.allclose(c.beta_hat, beta_ols, atol=1e-12)
    assert c.sigma2_hat == pytest.approx(rss[0] / 36, rel=1e-12)


def test_concentrated_matches_dense_gls(grid3, rng):
    data = random_panel(9, 3, 2, rng)
    for _ in range(20):
        t = random_feasible_theta(grid3, rng)
        _, beta, _ = concentrated_loglik(data, t, grid3)
        assert np.allclose(beta, dense_gls(data, t, grid3), rtol=1e-8, atol=1e-10)


def test_concentrated_is_stationary_in_beta(grid5, rng):
    data = random_panel(25, 3, 3, rng)
    t = DependenceParams(0.1, 0.4, -0.05)
    ws = LikelihoodWorkspace(grid5, t)
    c = concentrated_loglik(data, t, grid5, ws)
    g0 = gradient_beta(data, ModelParams(np.zeros(3), t, c.sigma2_hat), ws)
    g = gradient_beta(data, ModelParams(c.beta_hat, t, c.sigma2_hat), ws)
    assert np.linalg.norm(g) <= 1e-6 * (1.0 + np.linalg.norm(g0))


def test_concentrated_dominates_profiled_points(grid5, rng):
    data = random_panel(25, 3, 2, rng)
    t = DependenceParams(0.05, 0.3, 0.02)
    top = concentrated_loglik(data, t, grid5).value
    for _ in range(100):
        p = ModelParams(rng.standard_normal(2), t, float(rng.uniform(0.1, 5.0)))
        assert quasi_loglik(data, p, grid5).loglik <= top + 1e-9


def test_singular_design(grid3, rng):
    X = np.ones((9, 2, 3))
    data = PanelData(rng.standard_normal((9, 3)), X)
    with pytest.raises(SingularDesign):
        concentrated_loglik(data, DependenceParams.zero(), grid3)


def test_gradient_beta_theta_zero(grid3, rng):
    data = random_panel(9, 3, 2, rng)
    p = ModelParams(rng.standard_normal(2), DependenceParams.zero(), 0.8)
    X = data.X.transpose(2, 0, 1).reshape(27, 2)
    y = data.Y.T.reshape(-1)
    ws = LikelihoodWorkspace(grid3, p.theta)
    assert np.allclose(gradient_beta(data, p, ws), X.T @ (y - X @ p.beta) / 0.8, atol=1e-12)


def test_gradient_theta_fd_matches_dense(grid3, rng):
    data = random_panel(9, 3, 2, rng)
    for _ in range(5):
        t = random_feasible_theta(grid3, rng, shrink=0.8)
        h = fd_steps(t)
        g = gradient_theta_fd(data, t, grid3, h=h)
        ref = dense_fd_gradient(data, t, grid3, h)
        assert np.allclose(g, ref, rtol=1e-6, atol=1e-6 * (1 + np.abs(ref).max()))


def test_gradient_theta_split_matches_direct(rng):
    w = make_grid_weights(6)
    data = random_panel(36, 4, 2, rng)
    for _ in range(5):
        t = random_feasible_theta(w, rng, shrink=0.7)
        a = gradient_theta_fd(data, t, w)
        b = gradient_theta_split(data, t, w)
        assert np.allclose(a, b, rtol=1e-5, atol=1e-5 * (1 + np.abs(a).max()))


def test_gradient_theta_stencil_symmetry(grid5, rng):
    data = random_panel(25, 3, 2, rng)
    t = DependenceParams(0.02, 0.3, 0.01)
    h = fd_steps(t)
    g1 = gradient_theta_fd(data, t, grid5, h=h)
    g2 = gradient_theta_fd(data, t, grid5, h=-h)
    assert np.allclose(g1, g2, rtol=1e-10, atol=1e-10)


def test_gradient_theta_shrinks_step_near_boundary(grid5, rng):
    data = random_panel(25, 3, 2, rng)
    t = DependenceParams(0.0, 1.0 - 2e-6, 0.0)
    g = gradient_theta_fd(data, t, grid5)
    assert np.all(np.isfinite(g))


def test_permutation_invariance(rng):
    src = grid_adjacency(5)
    p = Permutation(rng.permutation(25))
    w1 = SpatialWeights.from_sparse(src)
    w2 = SpatialWeights.from_sparse(permute_sparse(src, p))
    data = random_panel(25, 3, 2, rng)
    data2 = data.permuted(p)
    for _ in range(5):
        params = random_params(2, random_feasible_theta(w1, rng), rng)
        a = quasi_loglik(data, params, w1).loglik
        b = quasi_loglik(data2, params, w2).loglik
        assert a == pytest.approx(b, rel=1e-10)
    t = random_feasible_theta(w1, rng)
    from stqmle.inference import beta_covariance

    c1 = beta_covariance(data, t, 1.0, w1)
    c2 = beta_covariance(data2, t, 1.0, w2)
    assert np.allclose(c1, c2, rtol=1e-10, atol=1e-14)
    assert np.allclose(c1, dense_beta_covariance(data, t, 1.0, w1), rtol=1e-8)


def test_true_params_beat_perturbed_on_average():
    w = make_grid_weights(6)
    d = SimulationDesign.from_preset("default", n=6, T=5, seed=4)
    pert = ModelParams(d.params.beta + 0.2, DependenceParams(0.0, 0.5, 0.0), 0.2)
    diffs = []
    for rep in range(100):
        data = simulate_panel(d, w, rep=rep)
        diffs.append(quasi_loglik(data, d.params, w).loglik - quasi_loglik(data, pert, w).loglik)
    assert np.mean(diffs) > 0


def test_loglik_memory_is_linear():
    # Python/numpy-side allocations only; numba kernels allocate through their own runtime
    w = make_grid_weights(40)
    d = SimulationDesign.from_preset("default", n=40, T=8)
    data = simulate_panel(d, w)
    ws = LikelihoodWorkspace(w, d.params.theta)
    quasi_loglik(data, d.params, w, ws)
    tracemalloc.start()
    try:
        quasi_loglik(data, d.params, w, ws)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    N, T, k, b = w.N, data.T, data.k, w.bandwidth
    assert peak < 40 * 8 * ((k + 1) * N * T + (b + 1) * N)
    assert peak < 8 * (N * T) ** 2 / 100
