import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mofi_flr.kernels import (
    KernelError,
    KernelSpec,
    KernelSplit,
    bernoulli_b4,
    check_psd,
    eval_builtin_kernel,
    gaussian_kernel,
    grid,
    kernel_matrix,
    null_kernel_from_basis,
    psd_sqrt,
    sobolev_k1_series,
)

PI4 = np.pi**4
unit = st.floats(0.0, 1.0, allow_nan=False)


def test_grid_is_right_endpoint():
    np.testing.assert_array_equal(grid(4), [0.25, 0.5, 0.75, 1.0])


@pytest.mark.parametrize("t, expected", [(0.0, -1 / 30), (1.0, -1 / 30), (0.5, 7 / 240)])
def test_bernoulli_b4_values(t, expected):
    assert bernoulli_b4(t) == pytest.approx(expected, abs=1e-15)


def test_bernoulli_b4_rejects_outside_unit_interval():
    with pytest.raises(ValueError):
        bernoulli_b4(1.5)


@pytest.mark.parametrize(
    "scenario, which, s, t, expected",
    [
        ("I", "K0", 0.3, 0.8, 1 / PI4),
        ("I", "K1", 0.0, 0.0, 1 / 45),
        ("I", "K1", 0.0, 1.0, -7 / 360),
        ("II", "K0", 0.5, 0.37, 0.0),
    ],
)
def test_builtin_kernel_values(scenario, which, s, t, expected):
    assert eval_builtin_kernel(KernelSpec("sobolev", scenario), which, s, t) == pytest.approx(expected, abs=1e-14)


def test_scenario_one_complement_matches_cosine_series():
    rng = np.random.default_rng(11)
    s, t = rng.uniform(size=(2, 20))
    closed = eval_builtin_kernel(KernelSpec("sobolev", "I"), "K1", s, t)
    np.testing.assert_allclose(closed, sobolev_k1_series(s, t), rtol=0, atol=1e-8)


@pytest.mark.parametrize("t", [0.0, 0.2, 0.5, 0.93, 1.0])
def test_scenario_one_complement_annihilates_constants(t):
    spec = KernelSpec("sobolev", "I")
    val, _ = integrate.quad(lambda s: eval_builtin_kernel(spec, "K1", s, t), 0.0, 1.0, epsabs=1e-13)
    assert abs(val) <= 1e-6


def test_complement_grid_average_decays_with_grid_size():
    spec = KernelSpec("sobolev", "I")
    errs = [np.abs(kernel_matrix(spec, "K1", n).mean(axis=0)).max() for n in (50, 100, 200, 400)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0] / 4


@pytest.mark.parametrize("scenario", ["I", "II", "III"])
@pytest.mark.parametrize("n_points", [10, 100])
def test_builtin_split_adds_up_and_is_psd(scenario, n_points):
    split = KernelSplit.from_spec(KernelSpec("sobolev", scenario), n_points)
    assert np.abs(split.full - split.null_part - split.complement).max() <= 1e-12 * np.abs(split.full).max()
    for m in (split.full, split.null_part, split.complement):
        check_psd(m)
    w = np.linalg.eigvalsh(split.null_part)
    assert np.sum(w > 1e-10 * w.max()) >= split.null_dim


@settings(max_examples=50, deadline=None)
@given(s=unit, t=unit, scenario=st.sampled_from(["I", "II", "III"]))
def test_pointwise_split_identity(s, t, scenario):
    spec = KernelSpec("sobolev", scenario)
    k, k0, k1 = (eval_builtin_kernel(spec, w, s, t) for w in ("K", "K0", "K1"))
    assert abs(k - k0 - k1) <= 1e-12
    assert eval_builtin_kernel(spec, "K", s, t) == eval_builtin_kernel(spec, "K", t, s)


def test_single_anchor_null_kernel():
    scale, a = 50.0, 0.4
    g = grid(30)
    ambient = gaussian_kernel(scale, g[:, None], g[None, :])
    basis = gaussian_kernel(scale, g, a)
    split = null_kernel_from_basis(ambient, basis, np.array([[1.0]]))
    np.testing.assert_allclose(split.null_part, np.outer(basis, basis), atol=1e-14)


def test_three_anchor_null_kernel_matches_gram_formula():
    spec = KernelSpec("gaussian", scale=50.0, anchors=(0.7, 0.5, 0.3))
    split = KernelSplit.from_spec(spec, 40)
    g = grid(40)
    a = np.array(spec.anchors)
    phi = gaussian_kernel(50.0, g[:, None], a[None, :])
    gram = gaussian_kernel(50.0, a[:, None], a[None, :])
    np.testing.assert_allclose(split.null_part, phi @ np.linalg.solve(gram, phi.T), atol=1e-12)
    assert split.null_dim == 3
    pointwise = eval_builtin_kernel(spec, "K0", g[:, None], g[None, :])
    np.testing.assert_allclose(pointwise, split.null_part, atol=1e-12)


def test_leading_eigenfunction_null_kernel_is_first_spectral_term():
    full = kernel_matrix(KernelSpec("sobolev", "I"), "K", 25)
    w, v = np.linalg.eigh(full)
    # a basis function with unit RKHS norm: psi = K v / sqrt(w), <psi, psi>_K = 1
    psi = full @ v[:, -1] / np.sqrt(w[-1])
    split = null_kernel_from_basis(full, psi, np.array([[1.0]]))
    np.testing.assert_allclose(split.null_part, w[-1] * np.outer(v[:, -1], v[:, -1]), atol=1e-14)


def test_collinear_anchors_rejected():
    g = grid(20)
    ambient = gaussian_kernel(5.0, g[:, None], g[None, :])
    basis = np.column_stack([g, g])
    with pytest.raises(KernelError):
        null_kernel_from_basis(ambient, basis, np.ones((2, 2)))


def test_gaussian_spec_validation():
    with pytest.raises(KernelError):
        KernelSpec("gaussian", scale=-1.0)
    with pytest.raises(KernelError):
        KernelSpec("gaussian", scale=1.0, anchors=(0.2, 0.2))
    with pytest.raises(KernelError):
        KernelSpec("sobolev", "IV")


@pytest.mark.parametrize("m, root", [(np.eye(3), np.eye(3)), (np.diag([4.0, 9.0]), np.diag([2.0, 3.0]))])
def test_psd_sqrt_simple(m, root):
    np.testing.assert_allclose(psd_sqrt(m), root, atol=1e-14)


def test_psd_sqrt_reconstructs_sobolev_matrix():
    k = kernel_matrix(KernelSpec("sobolev", "I"), "K", 100)
    s = psd_sqrt(k)
    assert np.linalg.norm(s @ s - k) / np.linalg.norm(k) <= 1e-8


def test_psd_sqrt_rejects_indefinite():
    with pytest.raises(KernelError):
        psd_sqrt(np.diag([1.0, -0.5]))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 8), r=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_psd_sqrt_fixes_projections(n, r, seed):
    r = min(r, n)
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, r)))
    p = q @ q.T
    p = 0.5 * (p + p.T)
    assert np.abs(psd_sqrt(p) - p).max() <= 1e-10
