import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from stqmle.errors import InfeasibleTheta
from stqmle.model import DependenceParams, ModelParams
from stqmle.oracle import dense_matrices
from stqmle.simulate import (
    PRESETS,
    SimulationDesign,
    grid_adjacency,
    make_grid_weights,
    make_strip_weights,
    run_monte_carlo,
    simulate_errors,
    simulate_panel,
    with_reps,
)


def test_grid_degrees():
    w2 = grid_adjacency(2)
    assert np.array_equal(np.asarray(w2.csr.sum(axis=1)).ravel(), [2, 2, 2, 2])
    assert make_grid_weights(2).d_max == pytest.approx(2.0, abs=1e-10)
    deg = np.asarray(grid_adjacency(6).csr.sum(axis=1)).reshape(6, 6)
    assert np.all(deg[1:-1, 1:-1] == 4)
    q = np.asarray(grid_adjacency(6, "second").csr.sum(axis=1)).reshape(6, 6)
    assert np.all(q[1:-1, 1:-1] == 8)


def test_grid10_spectrum():
    w = make_grid_weights(10)
    assert w.d_max == pytest.approx(4 * math.cos(math.pi / 11), abs=1e-8)


def test_strip_bandwidth_is_fixed():
    bws = [make_strip_weights(6, m).bandwidth for m in (20, 80)]
    assert bws[0] == bws[1] <= 7


def test_presets_are_feasible_on_grids():
    from stqmle.model import feasibility_check

    for name, (_, theta, _) in PRESETS.items():
        for n in (10, 20, 50):
            assert feasibility_check(make_grid_weights(n), DependenceParams(*theta)), (name, n)


def test_design_validation():
    p = ModelParams(np.ones(2), DependenceParams.zero(), 1.0)
    with pytest.raises(ValueError):
        SimulationDesign(n=5, T=3, params=p, innovation="student_t", df=4.0)
    with pytest.raises(ValueError):
        SimulationDesign(n=1, T=3, params=p)
    with pytest.raises(ValueError):
        SimulationDesign.from_preset("nope")


def test_theta_zero_gives_iid_noise():
    d = SimulationDesign(n=50, T=40, params=ModelParams(np.array([1.0, 0.5]), DependenceParams.zero(), 0.3), seed=1)
    data = simulate_panel(d)
    r = data.Y - np.einsum("nkt,k->nt", data.X, d.params.beta)
    assert r.size >= 1e5
    assert r.var() == pytest.approx(0.3, rel=0.05)


def test_student_t_variance_is_standardized():
    d = SimulationDesign(
        n=50, T=40, params=ModelParams(np.ones(2), DependenceParams.zero(), 2.0), innovation="student_t", df=6.0
    )
    data = simulate_panel(d)
    r = data.Y - np.einsum("nkt,k->nt", data.X, d.params.beta)
    assert r.var() == pytest.approx(2.0, rel=0.05)


def test_reproducible_panels():
    d = SimulationDesign.from_preset("default", n=6, T=4, seed=9)
    a, b = simulate_panel(d, rep=3), simulate_panel(d, rep=3)
    assert np.array_equal(a.Y, b.Y) and np.array_equal(a.X, b.X)
    assert not np.array_equal(a.Y, simulate_panel(d, rep=4).Y)


def test_infeasible_truth_is_rejected():
    d = SimulationDesign(n=5, T=2, params=ModelParams(np.ones(2), DependenceParams(0.9, 0.0, 0.0), 1.0))
    with pytest.raises(InfeasibleTheta):
        simulate_panel(d)


def test_lag_one_autocovariance_matches_dense():
    w = make_grid_weights(3)
    t = DependenceParams(0.05, 0.6, 0.03)
    steps = 2000
    rng = np.random.default_rng(0)
    U = simulate_errors(w, t, rng.standard_normal((steps + 200, 9)))[200:]
    m = dense_matrices(w, t, 1)
    E = U @ m.S.T  # rows are (S U_t)'
    prods = np.einsum("ti,tj->tij", E[1:], E[:-1])
    # batch means absorb the serial correlation of the cross products
    batches = prods[: 40 * 49].reshape(40, 49, 9, 9).mean(axis=1)
    se = batches.std(axis=0, ddof=1) / np.sqrt(40)
    err = prods.mean(axis=0) - m.A @ m.K
    assert np.all(np.abs(err) <= 4 * se)


def test_long_run_mean_is_zero():
    w = make_grid_weights(3)
    t = DependenceParams(0.05, 0.7, -0.03)
    U = simulate_errors(w, t, np.random.default_rng(1).standard_normal((5200, 9)))[200:]
    m = dense_matrices(w, t, 1)
    Sinv = np.linalg.inv(m.S)
    var_u = np.diag(Sinv @ m.K @ Sinv.T)
    # effective sample size shrinks by the AR(1)-like factor (1 + g) / (1 - g)
    g = 0.75
    se = np.sqrt(var_u / 5000 * (1 + g) / (1 - g))
    assert np.all(np.abs(U.mean(axis=0)) <= 3 * se)


def test_monte_carlo_summary_basics():
    d = SimulationDesign.from_preset("default", n=6, T=5, seed=1, n_reps=12)
    s = run_monte_carlo(d)
    assert s.n_ok == 12 and not s.empty and not s.failure_flag
    assert np.all(s.mse + 1e-15 >= s.bias**2)
    assert s.column("beta1").shape == (12,)
    assert "coverage" in s.to_csv().splitlines()[0]
    rows = s.to_dict()["summary"]
    assert [r["parameter"] for r in rows] == ["beta0", "beta1", "lambda", "gamma", "rho", "sigma2"]


def test_monte_carlo_empty_design():
    d = SimulationDesign.from_preset("default", n=4, T=3, n_reps=0)
    s = run_monte_carlo(d)
    assert s.empty and s.n_ok == 0


def test_monte_carlo_worker_count_does_not_change_results():
    d = SimulationDesign.from_preset("default", n=5, T=4, seed=2, n_reps=6)
    serial = run_monte_carlo(d)
    with ProcessPoolExecutor(max_workers=2) as ex:
        parallel = run_monte_carlo(d, executor=ex)
    assert np.allclose(serial.estimates, parallel.estimates, rtol=0, atol=1e-10)
    sub = run_monte_carlo(d, reps=[2, 3])
    assert np.array_equal(sub.estimates, serial.estimates[2:4])
    assert with_reps(d, 3).n_reps == 3
