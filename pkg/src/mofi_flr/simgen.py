"""Synthetic functional regression data on a cosine basis.

Curves are ``X_ij(t) = sum_k z_ijk nu_k^{1/2} phi_k(t)`` with
``phi_1 = 1``, ``phi_k = sqrt(2) cos((k-1) pi t)`` and ``nu_k = exp(-k/4)``;
for every ``k`` the scores ``z_i.k`` are AR(1)-correlated across predictors.
True coefficients are ``beta_j = 4 sum_k (-1)^{u_jk} gamma_jk nu_k phi_k``
where the first ``q0`` signals are "simple" (scenario-dependent modes only)
and the next ``q - q0`` use every mode.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .kernels import SCENARIOS, grid

_ROLES = {"scores": 0, "signs": 1, "noise": 2, "test_scores": 3}


@dataclass(frozen=True)
class SimConfig:
    n: int = 125
    p: int = 100
    q: int = 10
    q0: Optional[int] = None
    rho: float = 0.5
    sigma: float = 1.0
    n_basis: int = 30
    nu_rate: float = 0.25
    scenario: str = "I"
    seed: int = 0
    N: int = 100
    n_test: int = 1000

    def __post_init__(self):
        if self.q0 is None:
            object.__setattr__(self, "q0", self.q // 2)
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if not (self.n >= 2 and self.p >= 1 and self.N >= 2 and self.n_basis >= 2):
            raise ValueError("n, N, n_basis must be >= 2 and p >= 1")
        if not 0 <= self.q0 <= self.q <= self.p:
            raise ValueError("need 0 <= q0 <= q <= p")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.sigma < 0 or self.n_test < 0 or self.nu_rate <= 0:
            raise ValueError("sigma and n_test must be non-negative, nu_rate positive")

    def as_dict(self) -> dict:
        return asdict(self)


def eigenvalues(n_basis: int, rate: float = 0.25) -> np.ndarray:
    """``nu_k = exp(-rate * k)`` for ``k = 1..n_basis``."""
    return np.exp(-rate * np.arange(1, n_basis + 1))


def cosine_basis(t, n_basis: int) -> np.ndarray:
    """``(n_basis, len(t))`` array of ``phi_k(t)``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = np.arange(n_basis)[:, None]
    out = np.sqrt(2.0) * np.cos(k * np.pi * t[None, :])
    out[0] = 1.0
    return out


def simple_modes(scenario: str) -> tuple:
    """0-based basis indices carried by a simple coefficient."""
    return {"I": (0,), "II": (1,), "III": (0, 1)}[scenario]


def stream(seed: int, replicate: int, role: str) -> np.random.Generator:
    """Independent generator per ``(replicate, role)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replicate), _ROLES[role]))
    return np.random.default_rng(ss)


@dataclass
class SimulationTruth:
    signs: np.ndarray
    gamma: np.ndarray
    coef: np.ndarray
    nu: np.ndarray
    S: tuple
    S0: tuple
    S1: tuple

    def beta_grid(self, n_points: int) -> np.ndarray:
        """``(p, N)`` true coefficient curves on the grid."""
        return self.coef @ cosine_basis(grid(n_points), self.coef.shape[1])

    def functional(self, scores: np.ndarray) -> np.ndarray:
        """Exact ``sum_j <X_ij, beta_j>`` from ``(n, p, K)`` scores."""
        return np.einsum("ijk,jk->i", scores, self.coef * np.sqrt(self.nu))

    def manifest(self) -> dict:
        return {
            "S": [j + 1 for j in self.S],
            "S0": [j + 1 for j in self.S0],
            "S1": [j + 1 for j in self.S1],
            "u": self.signs.tolist(),
            "gamma": self.gamma.astype(int).tolist(),
            "coef": self.coef.tolist(),
            "nu": self.nu.tolist(),
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "SimulationTruth":
        return cls(
            signs=np.asarray(d["u"], dtype=int),
            gamma=np.asarray(d["gamma"], dtype=bool),
            coef=np.asarray(d["coef"], dtype=float),
            nu=np.asarray(d["nu"], dtype=float),
            S=tuple(j - 1 for j in d["S"]),
            S0=tuple(j - 1 for j in d["S0"]),
            S1=tuple(j - 1 for j in d["S1"]),
        )


@dataclass
class SimulatedData:
    config: SimConfig
    replicate: int
    x: np.ndarray
    y: np.ndarray
    scores: np.ndarray
    y_clean: np.ndarray
    truth: SimulationTruth
    x_test: Optional[np.ndarray] = None
    y_test: Optional[np.ndarray] = None
    scores_test: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def gen_scores(n: int, p: int, n_basis: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """``(n, p, K)`` standard normal scores, AR(1) across predictors per mode."""
    eps = rng.standard_normal((n, p, n_basis))
    z = np.empty_like(eps)
    z[:, 0] = eps[:, 0]
    scale = np.sqrt(1.0 - rho**2)
    for j in range(1, p):
        z[:, j] = rho * z[:, j - 1] + scale * eps[:, j]
    return z


def curves_from_scores(scores: np.ndarray, nu: np.ndarray, n_points: int) -> np.ndarray:
    """``(p, n, N)`` grid curves."""
    basis = cosine_basis(grid(n_points), scores.shape[2])
    return np.einsum("ijk,kt->jit", scores * np.sqrt(nu), basis)


def gen_predictors(cfg: SimConfig, replicate: int = 0, role: str = "scores", n: Optional[int] = None):
    """Grid curves ``(p, n, N)`` and their scores ``(n, p, K)``."""
    n = cfg.n if n is None else n
    z = gen_scores(n, cfg.p, cfg.n_basis, cfg.rho, stream(cfg.seed, replicate, role))
    return curves_from_scores(z, eigenvalues(cfg.n_basis, cfg.nu_rate), cfg.N), z


def gen_coefficients(cfg: SimConfig, replicate: int = 0) -> SimulationTruth:
    rng = stream(cfg.seed, replicate, "signs")
    signs = rng.integers(0, 2, size=(cfg.p, cfg.n_basis))
    gamma = np.zeros((cfg.p, cfg.n_basis), dtype=bool)
    gamma[: cfg.q0, list(simple_modes(cfg.scenario))] = True
    gamma[cfg.q0 : cfg.q] = True
    nu = eigenvalues(cfg.n_basis, cfg.nu_rate)
    coef = 4.0 * np.where(signs == 1, -1.0, 1.0) * gamma * nu
    return SimulationTruth(
        signs=signs,
        gamma=gamma,
        coef=coef,
        nu=nu,
        S=tuple(range(cfg.q)),
        S0=tuple(range(cfg.q0)),
        S1=tuple(range(cfg.q0, cfg.q)),
    )


def gen_response(truth: SimulationTruth, scores: np.ndarray, sigma: float, rng: Optional[np.random.Generator]):
    """``(y, y_clean)`` with the noiseless part computed in coefficient space."""
    clean = truth.functional(scores)
    if sigma == 0 or rng is None:
        return clean.copy(), clean
    return clean + sigma * rng.standard_normal(clean.shape[0]), clean


def simulate(cfg: SimConfig, replicate: int = 0) -> SimulatedData:
    """One replicate: training data plus (if ``n_test > 0``) a noiseless test set."""
    x, z = gen_predictors(cfg, replicate)
    truth = gen_coefficients(cfg, replicate)
    y, clean = gen_response(truth, z, cfg.sigma, stream(cfg.seed, replicate, "noise"))
    data = SimulatedData(config=cfg, replicate=replicate, x=x, y=y, scores=z, y_clean=clean, truth=truth)
    if cfg.n_test > 0:
        x_t, z_t = gen_predictors(cfg, replicate, role="test_scores", n=cfg.n_test)
        data.x_test = x_t
        data.scores_test = z_t
        data.y_test = truth.functional(z_t)
    return data


def verify_projection_identity(q: int, M0: int, n: int, reps: int, rho: float = 0.5, n_complement: int = 5,
                               rate: float = 0.25, seed: int = 0) -> float:
    """Monte-Carlo check that projecting out the simple scores shrinks the
    complement covariance by exactly ``1 - q M0 / n``.

    Predictors share the eigenfunctions of the kernel; scores of mode ``m``
    have variance ``a_m`` and AR(1) correlation ``rho`` across predictors.
    Returns the largest entrywise deviation of the averaged projected
    covariance from ``(1 - q M0 / n) T1``, measured on the correlation scale
    of the target.
    """
    if q < 0 or M0 < 1 or n < 1 or reps < 1:
        raise ValueError("need q >= 0, M0 >= 1, n >= 1, reps >= 1")
    if q * M0 >= n:
        raise ValueError(f"q*M0 = {q * M0} must be smaller than n = {n}")
    if q == 0:
        # nothing is projected out; measure the plain complement covariance
        q_eff = 1
    else:
        q_eff = q
    n_modes = M0 + n_complement
    a = np.exp(-rate * np.arange(1, n_modes + 1))
    nu = np.exp(-rate * np.arange(1, n_modes + 1))
    rng = np.random.default_rng(seed)
    acc = np.zeros((q_eff * n_complement,) * 2)
    for _ in range(reps):
        z = gen_scores(n, q_eff, n_modes, rho, rng) * np.sqrt(a)
        w = (z[:, :, M0:] * np.sqrt(nu[M0:])).reshape(n, -1)
        if q > 0:
            zs = z[:, :, :M0].reshape(n, -1)
            coef, *_ = np.linalg.lstsq(zs, w, rcond=None)
            w_proj = w - zs @ coef
        else:
            w_proj = w
        acc += w.T @ w_proj / n
    acc /= reps
    corr = rho ** np.abs(np.subtract.outer(np.arange(q_eff), np.arange(q_eff)))
    t1 = np.einsum("jl,m,mn->jmln", corr, a[M0:] * nu[M0:], np.eye(n_complement)).reshape(acc.shape)
    target = (1.0 - q * M0 / n) * t1
    d = np.sqrt(np.diag(target))
    return float(np.abs((acc - target) / np.outer(d, d)).max())
