"""Block coordinate descent for the group elastic-net in eigen coordinates.

Each block ``j`` carries a score matrix ``Gamma_j`` (``n x M_j``) with
``Gamma_j^T Gamma_j / n = H_j - theta I`` diagonal.  With
``b_j = H_j^{1/2} c_j`` the objective is

    1/(2n) ||y - Z a - sum_j Gamma_j H_j^{-1/2} b_j||^2
        + lambda1 sum_j ||b_j|| + lambda2/2 sum_j b_j^T H_j^{-1} b_j

where ``Z a`` is an optional unpenalised parametric part.  A block whose
partial score ``rho_j`` satisfies ``||rho_j|| <= kappa * lambda1`` is set to
exactly zero; otherwise ``b_j`` solves
``Omega_j b - rho_j + lambda1 b / ||b|| = 0`` with
``Omega_j = I + (lambda2 - theta) H_j^{-1}``.

With ``kappa = 1`` every block update minimises the objective in that block,
so the objective never increases across sweeps.  With ``kappa > 1`` a block
with ``lambda1 < ||rho_j|| <= kappa * lambda1`` is zeroed although a nonzero
value would lower the objective, so the trace may rise.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import linalg

log = logging.getLogger(__name__)

OLS_COND_MAX = 1e12

_OK, _OUTER_FAIL, _INNER_FAIL = 0, 1, 2


class SolverError(RuntimeError):
    """Numerical failure inside the block solver."""


class InnerConvergenceError(SolverError):
    def __init__(self, msg, residual=np.nan, block=None):
        super().__init__(msg)
        self.residual = residual
        self.block = block


class ConvergenceError(SolverError):
    """Outer sweeps hit ``max_outer_iters``; carries the last iterate."""

    def __init__(self, msg, coefficients=None, objective_trace=None):
        super().__init__(msg)
        self.coefficients = coefficients
        self.objective_trace = objective_trace


@dataclass(frozen=True)
class SolverConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    theta: float = 1.0
    kappa: float = 1.0
    outer_tol: float = 1e-6
    inner_tol: float = 1e-8
    max_outer_iters: int = 500
    max_inner_iters: int = 200
    # "newton" solves the block equation through its scalar secular form;
    # "fixed_point" runs b <- (Omega + lambda1/||b|| I)^{-1} rho literally.
    inner_method: str = "newton"

    def __post_init__(self):
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ValueError("penalty levels must be non-negative")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not self.kappa >= 1:
            raise ValueError("kappa must be >= 1")
        if not (self.outer_tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise ValueError("iteration limits must be positive")
        if self.inner_method not in ("newton", "fixed_point"):
            raise ValueError(f"unknown inner method {self.inner_method!r}")

    @classmethod
    def from_alpha(cls, lam: float, alpha: float, **kwargs) -> "SolverConfig":
        """``lambda1 = alpha * lam``, ``lambda2 = (1 - alpha) * lam``."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        return cls(lambda1=alpha * lam, lambda2=(1.0 - alpha) * lam, **kwargs)


@dataclass
class BlockProblem:
    response: np.ndarray
    gammas: Sequence[np.ndarray]
    h_diags: Sequence[np.ndarray]
    parametric_design: Optional[np.ndarray] = None

    def __post_init__(self):
        self.response = np.asarray(self.response, dtype=float)
        n = self.response.shape[0]
        self.gammas = [np.asarray(g, dtype=float).reshape(n, -1) for g in self.gammas]
        self.h_diags = [np.asarray(h, dtype=float).ravel() for h in self.h_diags]
        if len(self.gammas) != len(self.h_diags):
            raise ValueError("need one h_diag per block")
        for g, h in zip(self.gammas, self.h_diags):
            if g.shape[1] != h.shape[0]:
                raise ValueError("h_diag length must match the block width")
            if np.any(h <= 0):
                raise ValueError("h_diag entries must be positive")
        if self.parametric_design is not None:
            z = np.asarray(self.parametric_design, dtype=float)
            if z.ndim == 1:
                z = z[:, None]
            if z.shape[0] != n:
                raise ValueError("parametric design must have one row per observation")
            if z.shape[1] > n:
                raise ValueError(f"parametric design has {z.shape[1]} columns but only {n} observations")
            self.parametric_design = z

    @classmethod
    def from_designs(cls, response, designs, parametric_design=None) -> "BlockProblem":
        return cls(response, [d.gamma for d in designs], [d.h_diag for d in designs], parametric_design)

    @property
    def n(self) -> int:
        return self.response.shape[0]

    @property
    def sizes(self) -> list[int]:
        return [g.shape[1] for g in self.gammas]

    def scaled_blocks(self) -> list[np.ndarray]:
        """``Gamma_j H_j^{-1/2}``: maps ``b_j`` to fitted values."""
        return [g / np.sqrt(h) for g, h in zip(self.gammas, self.h_diags)]

    def check_diagonal(self, theta: float, tol: float = 1e-6) -> None:
        n = self.n
        for j, (g, h) in enumerate(zip(self.gammas, self.h_diags)):
            gram = g.T @ g / n
            scale = max(h.max(), 1e-300)
            if np.abs(gram - np.diag(h - theta)).max(initial=0.0) > tol * scale:
                raise ValueError(
                    f"block {j}: Gamma^T Gamma / n must equal diag(h) - theta I; "
                    "scores must come from eigenvectors of the block covariance"
                )


@dataclass
class BlockCoefficients:
    b: list
    a: Optional[np.ndarray] = None
    n_sweeps: int = 0
    objective_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active_trace: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def active(self) -> list[bool]:
        return [bool(np.any(bj != 0)) for bj in self.b]

    def c(self, problem: BlockProblem) -> list[np.ndarray]:
        """Coefficients in the un-reparameterised eigen coordinates."""
        return [bj / np.sqrt(h) for bj, h in zip(self.b, problem.h_diags)]

    def copy(self) -> "BlockCoefficients":
        return BlockCoefficients(
            b=[bj.copy() for bj in self.b],
            a=None if self.a is None else self.a.copy(),
            n_sweeps=self.n_sweeps,
            objective_trace=self.objective_trace.copy(),
            active_trace=self.active_trace.copy(),
        )


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True)
def _solve_block(rho, omega, lam1, kappa, inner_tol, max_inner, newton, out):
    """Write the block solution into ``out``; returns (status, residual, iters)."""
    m = rho.shape[0]
    norm_rho = 0.0
    for k in range(m):
        norm_rho += rho[k] * rho[k]
    norm_rho = np.sqrt(norm_rho)
    if norm_rho <= kappa * lam1:
        for k in range(m):
            out[k] = 0.0
        return 0, 0.0, 0
    if lam1 == 0.0:
        for k in range(m):
            out[k] = rho[k] / omega[k]
        return 0, 0.0, 0

    w_min = omega[0]
    w_max = omega[0]
    for k in range(m):
        w_min = min(w_min, omega[k])
        w_max = max(w_max, omega[k])

    iters = 0
    converged = False
    if newton:
        # b(mu) = rho / (omega + mu) with mu = lam1 / ||b||; find the root of
        # psi(mu) = 1/||b(mu)|| - mu/lam1, concave and decreasing near the root
        lo = lam1 * w_min / (norm_rho - lam1)
        hi = lam1 * w_max / (norm_rho - lam1)
        mu = hi
        for it in range(max_inner):
            iters = it + 1
            s2 = 0.0
            s3 = 0.0
            for k in range(m):
                d = omega[k] + mu
                q = rho[k] / d
                s2 += q * q
                s3 += q * q / d
            nb = np.sqrt(s2)
            psi = 1.0 / nb - mu / lam1
            if psi > 0.0:
                lo = mu
            else:
                hi = mu
            dpsi = s3 / (nb * s2) - 1.0 / lam1
            step_ok = dpsi < 0.0
            mu_new = mu - psi / dpsi if step_ok else 0.5 * (lo + hi)
            if not (lo <= mu_new <= hi):
                mu_new = 0.5 * (lo + hi)
            change = abs(mu_new - mu)
            mu = mu_new
            if change <= inner_tol * (w_min + mu) or psi == 0.0:
                converged = True
                break
        for k in range(m):
            out[k] = rho[k] / (omega[k] + mu)
    else:
        nb = 0.0
        for k in range(m):
            out[k] = (1.0 - kappa * lam1 / norm_rho) * rho[k] / omega[k]
            nb += out[k] * out[k]
        nb = np.sqrt(nb)
        for it in range(max_inner):
            iters = it + 1
            diff = 0.0
            nnew = 0.0
            for k in range(m):
                v = rho[k] / (omega[k] + lam1 / nb)
                diff += (v - out[k]) ** 2
                nnew += v * v
                out[k] = v
            nnew = np.sqrt(nnew)
            rel = np.sqrt(diff) / nnew
            nb = nnew
            if rel < inner_tol:
                converged = True
                break

    nb = 0.0
    for k in range(m):
        nb += out[k] * out[k]
    nb = np.sqrt(nb)
    res = 0.0
    for k in range(m):
        r = omega[k] * out[k] - rho[k] + lam1 * out[k] / nb
        res += r * r
    res = np.sqrt(res)
    if not converged and res > 1e-8 * (1.0 + norm_rho):
        return 1, res, iters
    return 0, res, iters


@njit(cache=True)
def _bcd(GT, offsets, diag, omega, hinv, y, Z, P, b, a, lam1, lam2, kappa,
         outer_tol, inner_tol, max_outer, max_inner, newton, trace, active_trace):
    n = y.shape[0]
    n_blocks = offsets.shape[0] - 1
    d = Z.shape[1]
    # running residual eta = y - Z a - G b
    eta = y.copy()
    if d > 0:
        eta -= Z @ a
    for j in range(n_blocks):
        for k in range(offsets[j], offsets[j + 1]):
            if b[k] != 0.0:
                for i in range(n):
                    eta[i] -= GT[k, i] * b[k]
    max_m = 0
    for j in range(n_blocks):
        max_m = max(max_m, offsets[j + 1] - offsets[j])
    rho = np.empty(max_m)
    new = np.empty(max_m)

    sweeps = 0
    status = 0
    fail_block = -1
    fail_res = 0.0
    # full sweeps alternate with sweeps over the current active set; the fit
    # terminates only after a full sweep moves no block by outer_tol or more
    full = True
    for sweep in range(max_outer):
        sweeps = sweep + 1
        delta = 0.0
        if d > 0:
            partial = eta + Z @ a
            a_new = P @ partial
            da = 0.0
            for k in range(d):
                da += (a_new[k] - a[k]) ** 2
            delta = max(delta, np.sqrt(da))
            eta = partial - Z @ a_new
            a[:] = a_new
        n_active = 0
        for j in range(n_blocks):
            lo = offsets[j]
            m = offsets[j + 1] - lo
            if not full:
                nz = False
                for k in range(m):
                    if b[lo + k] != 0.0:
                        nz = True
                        break
                if not nz:
                    continue
            for k in range(m):
                s = 0.0
                for i in range(n):
                    s += GT[lo + k, i] * eta[i]
                rho[k] = s / n + diag[lo + k] * b[lo + k]
            st, res, _ = _solve_block(rho[:m], omega[lo:lo + m], lam1, kappa, inner_tol, max_inner,
                                      newton, new[:m])
            if st != 0:
                status = 2
                fail_block = j
                fail_res = res
                break
            dj = 0.0
            nz = False
            for k in range(m):
                dk = new[k] - b[lo + k]
                if dk != 0.0:
                    for i in range(n):
                        eta[i] -= GT[lo + k, i] * dk
                    b[lo + k] = new[k]
                    dj += dk * dk
                if new[k] != 0.0:
                    nz = True
            if nz:
                n_active += 1
            delta = max(delta, np.sqrt(dj))
        if status != 0:
            break
        obj = 0.0
        for i in range(n):
            obj += eta[i] * eta[i]
        obj = 0.5 * obj / n
        for j in range(n_blocks):
            s = 0.0
            q = 0.0
            for k in range(offsets[j], offsets[j + 1]):
                s += b[k] * b[k]
                q += hinv[k] * b[k] * b[k]
            obj += lam1 * np.sqrt(s) + 0.5 * lam2 * q
        trace[sweep] = obj
        active_trace[sweep] = n_active
        if delta < outer_tol:
            if full:
                break
            full = True
        else:
            full = False
    else:
        status = 1
    return sweeps, status, fail_block, fail_res


# ---------------------------------------------------------------------------


def block_update(omega_diag, rho, lambda1: float, kappa: float = 1.0, inner_tol: float = 1e-8,
                 max_inner_iters: int = 200, method: str = "newton") -> np.ndarray:
    """Solve one block: zero below the threshold, else the stationarity equation."""
    omega = np.ascontiguousarray(omega_diag, dtype=float).ravel()
    rho = np.ascontiguousarray(rho, dtype=float).ravel()
    if omega.shape != rho.shape:
        raise ValueError("omega and rho must have the same length")
    if np.any(omega <= 0):
        raise ValueError("Omega must be positive definite")
    out = np.empty_like(rho)
    status, res, iters = _solve_block(rho, omega, float(lambda1), float(kappa), float(inner_tol),
                                      int(max_inner_iters), method == "newton", out)
    if status != 0:
        raise InnerConvergenceError(
            f"block equation did not converge in {max_inner_iters} iterations (residual {res:.3e})", residual=res
        )
    return out


def omega_diags(problem: BlockProblem, config: SolverConfig) -> list[np.ndarray]:
    return [1.0 + (config.lambda2 - config.theta) / h for h in problem.h_diags]


def ols_parametric(z: np.ndarray, partial_residual: np.ndarray) -> np.ndarray:
    """Least squares ``(Z^T Z)^{-1} Z^T r`` with a conditioning guard."""
    return _ols_operator(z) @ np.asarray(partial_residual, dtype=float)


def _ols_operator(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n, d = z.shape
    if d > n:
        raise SolverError(f"parametric design has more columns ({d}) than rows ({n})")
    gram = z.T @ z
    w = np.linalg.eigvalsh(gram)
    if w[0] <= 0 or w[-1] / w[0] > OLS_COND_MAX:
        raise SolverError("parametric design is rank deficient (Z^T Z is singular)")
    return linalg.cho_solve(linalg.cho_factor(gram), z.T)


def objective(problem: BlockProblem, coeffs: BlockCoefficients, config: SolverConfig) -> float:
    resid = fitted_residual(problem, coeffs)
    pen = sum(config.lambda1 * np.linalg.norm(bj) + 0.5 * config.lambda2 * np.sum(bj**2 / h)
              for bj, h in zip(coeffs.b, problem.h_diags))
    return 0.5 * float(resid @ resid) / problem.n + pen


def fitted_residual(problem: BlockProblem, coeffs: BlockCoefficients) -> np.ndarray:
    resid = problem.response.copy()
    for g, bj in zip(problem.scaled_blocks(), coeffs.b):
        resid -= g @ bj
    if problem.parametric_design is not None and coeffs.a is not None:
        resid -= problem.parametric_design @ coeffs.a
    return resid


class PreparedProblem:
    """Penalty-independent solver inputs for one ``(problem, theta)`` pair.

    Building this once and calling :meth:`fit` along a penalty path avoids
    re-stacking the scaled design for every grid point.
    """

    def __init__(self, problem: BlockProblem, theta: float, check: bool = True):
        if check:
            problem.check_diagonal(theta)
        self.problem = problem
        self.theta = float(theta)
        sizes = problem.sizes
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        n = problem.n
        scaled = problem.scaled_blocks()
        self.GT = np.ascontiguousarray(np.vstack([g.T for g in scaled])) if scaled else np.zeros((0, n))
        self.h = np.concatenate(problem.h_diags) if sizes else np.zeros(0)
        self.hinv = 1.0 / self.h
        self.diag = np.einsum("ij,ij->i", self.GT, self.GT) / n
        self.y = np.ascontiguousarray(problem.response)
        z = problem.parametric_design
        self.has_parametric = z is not None
        if z is None:
            self.Z = np.zeros((n, 0))
            self.P = np.zeros((0, n))
        else:
            self.Z = np.ascontiguousarray(z)
            self.P = np.ascontiguousarray(_ols_operator(z))

    def null_scores(self) -> np.ndarray:
        """Per-block ``||rho_j||`` at ``b = 0`` (after the parametric fit, if any)."""
        r = self.y - self.Z @ (self.P @ self.y) if self.has_parametric else self.y
        g = self.GT @ r / self.problem.n
        return np.sqrt(np.add.reduceat(g * g, self.offsets[:-1])) if self.sizes else np.zeros(0)

    def fit(self, config: SolverConfig, warm_start: Optional[BlockCoefficients] = None) -> BlockCoefficients:
        if config.theta != self.theta:
            raise ValueError("config.theta differs from the prepared theta")
        sizes, offsets = self.sizes, self.offsets
        omega = 1.0 + (config.lambda2 - config.theta) * self.hinv
        if np.any(omega <= 0):
            raise SolverError(
                "Omega = I + (lambda2 - theta) H^{-1} has non-positive entries; increase lambda2"
            )
        d = self.Z.shape[1]
        if warm_start is not None:
            b = np.concatenate([np.asarray(bj, dtype=float) for bj in warm_start.b]) if sizes else np.zeros(0)
            a = (np.asarray(warm_start.a, dtype=float).copy() if warm_start.a is not None and d
                 else np.zeros(d))
        else:
            b = np.zeros(offsets[-1])
            a = np.zeros(d)
        if b.shape[0] != offsets[-1] or a.shape[0] != d:
            raise ValueError("warm start does not match the problem dimensions")

        trace = np.full(config.max_outer_iters, np.nan)
        active_trace = np.zeros(config.max_outer_iters, dtype=np.int64)
        sweeps, status, fail_block, fail_res = _bcd(
            self.GT, offsets, self.diag, omega, self.hinv, self.y, self.Z, self.P, b, a,
            float(config.lambda1), float(config.lambda2), float(config.kappa), float(config.outer_tol),
            float(config.inner_tol), int(config.max_outer_iters), int(config.max_inner_iters),
            config.inner_method == "newton", trace, active_trace,
        )
        coeffs = BlockCoefficients(
            b=[b[offsets[j]:offsets[j + 1]].copy() for j in range(len(sizes))],
            a=a.copy() if self.has_parametric else None,
            n_sweeps=int(sweeps),
            objective_trace=trace[:sweeps].copy(),
            active_trace=active_trace[:sweeps].copy(),
        )
        if status == _INNER_FAIL:
            raise InnerConvergenceError(
                f"block {fail_block} equation did not converge (residual {fail_res:.3e})",
                residual=fail_res, block=int(fail_block),
            )
        if status == _OUTER_FAIL:
            raise ConvergenceError(
                f"no convergence after {config.max_outer_iters} sweeps",
                coefficients=coeffs, objective_trace=coeffs.objective_trace,
            )
        log.debug("bcd converged in %d sweeps, %d active blocks", sweeps, sum(coeffs.active))
        return coeffs


def bcd_fit(problem: BlockProblem, config: SolverConfig, warm_start: Optional[BlockCoefficients] = None,
            check: bool = True) -> BlockCoefficients:
    """Cyclic block coordinate descent (ascending block order).

    With a parametric design the unpenalised coefficients are refreshed by
    least squares on the partial residual once per sweep, before the blocks.
    """
    return PreparedProblem(problem, config.theta, check=check).fit(config, warm_start)


@dataclass(frozen=True)
class KKTReport:
    per_block: np.ndarray
    parametric: float
    active: Optional[np.ndarray] = None

    @property
    def max(self) -> float:
        return float(max(self.per_block.max(initial=0.0), self.parametric))

    @property
    def inactive_slack(self) -> float:
        """Largest threshold-rule violation ``||rho_j|| - kappa*lambda1`` over zero blocks."""
        if self.active is None:
            return float("nan")
        return float(self.per_block[~self.active].max(initial=0.0))


def kkt_residual(problem: BlockProblem, coeffs: BlockCoefficients, config: SolverConfig) -> KKTReport:
    """Stationarity violations of the group elastic-net optimality conditions.

    Active blocks report ``||grad_smooth + lambda1 b/||b|| ||``; inactive
    blocks report the slack of the threshold rule, ``max(0, ||rho_j|| - kappa*lambda1)``,
    which is ordinary dual feasibility when ``kappa = 1``.
    The parametric part (if any) reports ``||Z^T r|| / n``.
    """
    resid = fitted_residual(problem, coeffs)
    n = problem.n
    out = np.zeros(len(coeffs.b))
    for j, (g, h, bj) in enumerate(zip(problem.scaled_blocks(), problem.h_diags, coeffs.b)):
        grad = -g.T @ resid / n + config.lambda2 * bj / h
        nb = np.linalg.norm(bj)
        if nb > 0:
            out[j] = np.linalg.norm(grad + config.lambda1 * bj / nb)
        else:
            out[j] = max(0.0, np.linalg.norm(grad) - config.kappa * config.lambda1)
    par = 0.0
    if problem.parametric_design is not None and coeffs.a is not None:
        par = float(np.linalg.norm(problem.parametric_design.T @ resid) / n)
    active = np.array([bool(np.any(bj != 0)) for bj in coeffs.b], dtype=bool)
    return KKTReport(per_block=out, parametric=par, active=active)


def write_trace(coeffs: BlockCoefficients, path) -> None:
    """Iteration trace CSV: sweep, objective, active-set size."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "objective", "active"])
        for k, (v, act) in enumerate(zip(coeffs.objective_trace, coeffs.active_trace), start=1):
            w.writerow([k, repr(float(v)), int(act)])
