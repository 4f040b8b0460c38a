import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mofi_flr.kernels import grid
from mofi_flr.simgen import (
    SimConfig,
    SimulationTruth,
    cosine_basis,
    eigenvalues,
    gen_coefficients,
    gen_response,
    gen_scores,
    simulate,
    verify_projection_identity,
)


def test_default_configuration():
    cfg = SimConfig()
    assert (cfg.n, cfg.p, cfg.q, cfg.q0, cfg.N, cfg.n_basis) == (125, 100, 10, 5, 100, 30)
    np.testing.assert_allclose(eigenvalues(3), np.exp(-np.arange(1, 4) / 4))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(q=11, p=10)
    with pytest.raises(ValueError):
        SimConfig(rho=1.0)
    with pytest.raises(ValueError):
        SimConfig(scenario="IV")
    assert SimConfig(q=7).q0 == 3


def test_scenario_one_simple_coefficient_is_constant():
    truth = gen_coefficients(SimConfig(scenario="I"))
    beta = truth.beta_grid(50)
    for j in truth.S0:
        np.testing.assert_allclose(np.abs(beta[j]), 4 * np.exp(-0.25), rtol=1e-14)
    assert 4 * np.exp(-0.25) == pytest.approx(3.1152, abs=1e-4)


def test_scenario_two_simple_coefficient_is_cosine():
    truth = gen_coefficients(SimConfig(scenario="II"))
    t = grid(64)
    beta = truth.beta_grid(64)
    amp = 4 * np.sqrt(2) * np.exp(-0.5)
    assert amp == pytest.approx(3.431055539842827, rel=1e-14)
    for j in truth.S0:
        np.testing.assert_allclose(np.abs(beta[j]), np.abs(amp * np.cos(np.pi * t)), atol=1e-12)


@pytest.mark.parametrize("scenario, modes", [("I", [0]), ("II", [1]), ("III", [0, 1])])
def test_gamma_pattern(scenario, modes):
    cfg = SimConfig(scenario=scenario, p=20)
    truth = gen_coefficients(cfg)
    for j in range(cfg.p):
        if j < cfg.q0:
            assert np.flatnonzero(truth.gamma[j]).tolist() == modes
        elif j < cfg.q:
            assert truth.gamma[j].all()
        else:
            assert not truth.gamma[j].any()
            assert np.all(truth.coef[j] == 0.0)


def test_scenario_three_is_sum_of_one_and_two():
    cfgs = {s: SimConfig(scenario=s, p=12, seed=4) for s in ("I", "II", "III")}
    b = {s: gen_coefficients(c).beta_grid(40) for s, c in cfgs.items()}
    q0 = cfgs["I"].q0
    np.testing.assert_allclose(b["III"][:q0], b["I"][:q0] + b["II"][:q0], atol=1e-13)


def test_noiseless_single_mode_response():
    cfg = SimConfig(p=1, q=1, q0=0, n_basis=3)
    truth = gen_coefficients(cfg)
    truth = SimulationTruth(signs=np.zeros((1, 3), dtype=int), gamma=np.array([[True, False, False]]),
                            coef=np.array([[4 * np.exp(-0.25), 0.0, 0.0]]), nu=truth.nu, S=(0,), S0=(), S1=(0,))
    z = np.zeros((2, 1, 3))
    z[:, 0, 0] = 1.0
    y, clean = gen_response(truth, z, 0.0, None)
    np.testing.assert_allclose(y, 4 * np.exp(-3 / 8))
    assert 4 * np.exp(-3 / 8) == pytest.approx(2.749157115163889, rel=1e-14)
    y0, _ = gen_response(truth, np.zeros_like(z), 0.0, None)
    np.testing.assert_array_equal(y0, 0.0)


def test_reproducibility_bitwise():
    cfg = SimConfig(n=30, p=12, n_test=10, seed=12)
    a, b = simulate(cfg, 3), simulate(cfg, 3)
    for name in ("x", "y", "scores", "x_test", "y_test"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.truth.signs, b.truth.signs)
    c = simulate(cfg, 4)
    assert not np.array_equal(a.y, c.y)


def test_replicates_share_nothing_across_roles():
    cfg = SimConfig(n=20, p=3, q=2, n_test=20, seed=1)
    d = simulate(cfg)
    assert not np.allclose(d.scores[:, :, :5], d.scores_test[:, :, :5])


def test_scores_have_ar1_correlation():
    z = gen_scores(20000, 3, 1, 0.5, np.random.default_rng(0))[:, :, 0]
    c = np.corrcoef(z.T)
    assert c[0, 1] == pytest.approx(0.5, abs=0.02)
    assert c[0, 2] == pytest.approx(0.25, abs=0.02)


def test_grid_functional_matches_exact_functional():
    cfg = SimConfig(n=40, p=4, q=2, N=2000, n_test=0)
    d = simulate(cfg)
    riemann = np.einsum("jit,jt->i", d.x, d.truth.beta_grid(cfg.N)) / cfg.N
    np.testing.assert_allclose(riemann, d.y_clean, rtol=0, atol=5e-2 * np.abs(d.y_clean).max())


@pytest.mark.parametrize("n_points", [100, 1000])
def test_basis_orthonormality_riemann_error(n_points):
    phi = cosine_basis(grid(n_points), 30)
    err = np.abs(phi @ phi.T / n_points - np.eye(30)).max()
    # the right-endpoint rule is off by exactly 2/N on the diagonal
    assert err <= 2.0 / n_points + 1e-12


def test_basis_orthonormality_error_decreases():
    errs = [np.abs(cosine_basis(grid(n), 30) @ cosine_basis(grid(n), 30).T / n - np.eye(30)).max()
            for n in (100, 200, 400, 1000)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), rep=st.integers(0, 100))
def test_manifest_round_trip(seed, rep):
    truth = gen_coefficients(SimConfig(p=12, seed=seed), rep)
    back = SimulationTruth.from_manifest(truth.manifest())
    np.testing.assert_array_equal(back.coef, truth.coef)
    assert (back.S, back.S0, back.S1) == (truth.S, truth.S0, truth.S1)


def test_projection_identity_without_projection():
    assert verify_projection_identity(q=0, M0=1, n=500, reps=40) < 0.1


def test_projection_identity_rejects_degenerate():
    with pytest.raises(ValueError):
        verify_projection_identity(q=2, M0=1, n=2, reps=1)
