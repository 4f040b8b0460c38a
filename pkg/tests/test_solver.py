import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofi_flr.solver import (
    BlockCoefficients,
    BlockProblem,
    ConvergenceError,
    InnerConvergenceError,
    PreparedProblem,
    SolverConfig,
    SolverError,
    bcd_fit,
    block_update,
    kkt_residual,
    objective,
    ols_parametric,
    write_trace,
)

from oracles import fista_oracle, random_block_problem


def lam_max(problem):
    n = problem.n
    return max(np.linalg.norm(g.T @ problem.response / n) for g in problem.scaled_blocks())


def instance(seed, n=20, sizes=(3, 3), theta=0.05, parametric=0):
    rng = np.random.default_rng(seed)
    g, h, y, z = random_block_problem(rng, n, list(sizes), theta=theta, with_parametric=parametric)
    return BlockProblem(y, g, h, z)


# block update


def test_block_below_threshold_is_zero():
    rho = np.array([0.4, 0.0])
    out = block_update(np.ones(2), rho, lambda1=0.5, kappa=1.0)
    assert np.all(out == 0.0)


def test_block_one_dimensional_closed_form():
    assert block_update(np.ones(1), np.array([2.0]), lambda1=0.5)[0] == pytest.approx(1.5, abs=1e-12)


def test_block_without_lasso_is_ridge():
    omega = np.array([1.5, 2.0, 0.7])
    rho = np.array([0.3, -1.0, 2.0])
    np.testing.assert_allclose(block_update(omega, rho, 0.0), rho / omega)


@settings(max_examples=60, deadline=None)
@given(m=st.integers(1, 6), seed=st.integers(0, 10**6), lam=st.floats(0.0, 3.0),
       kappa=st.floats(1.0, 4.0), method=st.sampled_from(["newton", "fixed_point"]))
def test_block_update_stationarity(m, seed, lam, kappa, method):
    rng = np.random.default_rng(seed)
    omega = rng.uniform(0.2, 3.0, m)
    rho = rng.standard_normal(m) * 2
    b = block_update(omega, rho, lam, kappa=kappa, method=method, max_inner_iters=5000, inner_tol=1e-12)
    if np.linalg.norm(rho) <= kappa * lam:
        assert np.all(b == 0.0)
    else:
        nb = np.linalg.norm(b)
        assert nb > 0
        resid = omega * b - rho + lam * b / nb
        assert np.linalg.norm(resid) <= 1e-7 * (1 + np.linalg.norm(rho))


def test_inner_failure_carries_residual():
    omega = np.array([1e-3, 50.0])
    rho = np.array([1.0, 3.0])
    with pytest.raises(InnerConvergenceError) as info:
        block_update(omega, rho, 0.9, method="fixed_point", max_inner_iters=1)
    assert info.value.residual > 0


# full solver


def test_zero_response_gives_zero_solution():
    p = instance(0, parametric=2)
    p = BlockProblem(np.zeros(p.n), p.gammas, p.h_diags, p.parametric_design)
    co = bcd_fit(p, SolverConfig(lambda1=0.1, lambda2=0.01, theta=0.05))
    assert not any(co.active)
    np.testing.assert_array_equal(co.a, 0.0)


def test_single_block_ridge_closed_form():
    p = instance(1, n=30, sizes=(4,))
    lam2 = 0.3
    co = bcd_fit(p, SolverConfig(lambda1=0.0, lambda2=lam2, theta=0.05, outer_tol=1e-13))
    g, h = p.scaled_blocks()[0], p.h_diags[0]
    d = g.T @ g / p.n  # diagonal by construction
    b = g.T @ p.response / p.n / (np.diag(d) + lam2 / h)
    np.testing.assert_allclose(co.b[0], b, atol=1e-8)


def test_two_blocks_match_first_order_oracle():
    p = instance(2, n=20, sizes=(3, 3))
    cfg = SolverConfig(lambda1=0.3 * lam_max(p), lambda2=0.05 * lam_max(p), theta=0.05, outer_tol=1e-10)
    co = bcd_fit(p, cfg)
    ref, _ = fista_oracle(p.scaled_blocks(), p.response, cfg.lambda1, cfg.lambda2, p.h_diags)
    assert abs(objective(p, co, cfg) - ref) <= 1e-4 * abs(ref)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), frac=st.floats(0.05, 1.2), ridge=st.floats(0.0, 0.5),
       parametric=st.integers(0, 2))
def test_objective_monotone_and_kkt(seed, frac, ridge, parametric):
    p = instance(seed, n=22, sizes=(2, 3, 1), parametric=parametric)
    lm = lam_max(p)
    cfg = SolverConfig(lambda1=frac * lm, lambda2=ridge * lm, theta=0.05, outer_tol=1e-10)
    co = bcd_fit(p, cfg)
    tr = co.objective_trace
    assert np.all(np.diff(tr) <= 1e-10 * max(1.0, abs(tr[0])))
    assert kkt_residual(p, co, cfg).max <= 1e-6
    for bj, act in zip(co.b, co.active):
        assert act == bool(np.any(bj != 0))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), frac=st.floats(0.05, 1.0), kappa=st.floats(1.0, 6.0))
def test_threshold_exactness(seed, frac, kappa):
    p = instance(seed, n=18, sizes=(3, 2, 2))
    cfg = SolverConfig(lambda1=frac * lam_max(p) / kappa, lambda2=0.01, theta=0.05, kappa=kappa, outer_tol=1e-11)
    co = bcd_fit(p, cfg)
    pp = PreparedProblem(p, cfg.theta)
    resid = p.response - sum(g @ bj for g, bj in zip(p.scaled_blocks(), co.b))
    for g, bj in zip(p.scaled_blocks(), co.b):
        # score of the partial residual with block j removed
        rho = g.T @ (resid + g @ bj) / p.n
        if np.linalg.norm(rho) <= kappa * cfg.lambda1 * (1 - 1e-9):
            assert np.all(bj == 0.0)
    assert pp.null_scores().shape == (3,)
    assert kkt_residual(p, co, cfg).max <= 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), frac=st.floats(0.05, 0.9))
def test_joint_scaling(seed, frac):
    p = instance(seed, n=20, sizes=(2, 3))
    cfg = SolverConfig(lambda1=frac * lam_max(p), lambda2=0.02, theta=0.05, outer_tol=1e-13)
    co = bcd_fit(p, cfg)
    s = 2.0
    p2 = BlockProblem(s * p.response, p.gammas, p.h_diags)
    cfg2 = SolverConfig(lambda1=s * cfg.lambda1, lambda2=cfg.lambda2, theta=0.05, outer_tol=1e-13)
    co2 = bcd_fit(p2, cfg2)
    for b1, b2 in zip(co.b, co2.b):
        np.testing.assert_allclose(b2, s * b1, atol=1e-8)


def test_kkt_examples():
    p = instance(3)
    lm = lam_max(p)
    cfg = SolverConfig(lambda1=1.01 * lm, lambda2=0.1, theta=0.05)
    zero = BlockCoefficients(b=[np.zeros(m) for m in p.sizes])
    assert kkt_residual(p, zero, cfg).max == 0.0
    cfg = SolverConfig(lambda1=0.2 * lm, lambda2=0.1, theta=0.05, outer_tol=1e-12)
    co = bcd_fit(p, cfg)
    assert kkt_residual(p, co, cfg).max <= 1e-6
    j = co.active.index(True)
    bad = co.copy()
    bad.b[j][0] += 0.1
    assert kkt_residual(p, bad, cfg).max > 0


def test_parametric_block_matches_profiled_oracle():
    p = instance(4, n=24, sizes=(3, 2), parametric=3)
    lm = lam_max(p)
    cfg = SolverConfig(lambda1=0.2 * lm, lambda2=0.05 * lm, theta=0.05, outer_tol=1e-11)
    co = bcd_fit(p, cfg)
    ref, _ = fista_oracle(p.scaled_blocks(), p.response, cfg.lambda1, cfg.lambda2, p.h_diags,
                          z=p.parametric_design)
    assert abs(objective(p, co, cfg) - ref) <= 1e-6 * abs(ref)
    assert kkt_residual(p, co, cfg).parametric <= 1e-8


def test_ols_examples():
    rng = np.random.default_rng(9)
    q, _ = np.linalg.qr(rng.standard_normal((8, 3)))
    r = rng.standard_normal(8)
    np.testing.assert_allclose(ols_parametric(q, r), q.T @ r, atol=1e-12)
    np.testing.assert_allclose(ols_parametric(np.ones(8), r), [r.mean()], atol=1e-12)
    z = rng.standard_normal((10, 3))
    np.testing.assert_allclose(ols_parametric(z, r[:8].tolist() + [0.1, 0.2]),
                               np.linalg.solve(z.T @ z, z.T @ np.r_[r[:8], 0.1, 0.2]), atol=1e-10)
    with pytest.raises(SolverError):
        ols_parametric(np.column_stack([np.ones(5), np.ones(5)]), np.ones(5))


def test_iteration_limit_reports_last_iterate(tmp_path):
    p = instance(5, n=20, sizes=(3, 3, 3))
    cfg = SolverConfig(lambda1=0.05 * lam_max(p), lambda2=0.0, theta=0.05, outer_tol=1e-15, max_outer_iters=2)
    with pytest.raises(ConvergenceError) as info:
        bcd_fit(p, cfg)
    assert info.value.coefficients is not None
    assert len(info.value.objective_trace) == 2
    co = bcd_fit(p, SolverConfig(lambda1=0.05 * lam_max(p), theta=0.05))
    write_trace(co, tmp_path / "trace.csv")
    assert (tmp_path / "trace.csv").read_text().startswith("sweep,objective,active")


def test_negative_omega_rejected():
    p = instance(6, theta=0.5)
    # theta larger than the prepared H shift: Omega = 1 + (lambda2 - theta)/h can turn negative
    with pytest.raises(SolverError):
        bcd_fit(p, SolverConfig(lambda1=0.1, lambda2=0.0, theta=5.0), check=False)


def test_parametric_columns_bounded_by_n():
    with pytest.raises(ValueError):
        BlockProblem(np.zeros(3), [np.zeros((3, 1))], [np.ones(1)], parametric_design=np.zeros((3, 4)))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(kappa=0.5)
    with pytest.raises(ValueError):
        SolverConfig(lambda1=-1.0)
    cfg = SolverConfig.from_alpha(2.0, 0.25, theta=0.1)
    assert (cfg.lambda1, cfg.lambda2) == (0.5, 1.5)
