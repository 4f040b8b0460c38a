"""Two-stage estimation: selection (Step-One), model-form identification
(Step-Two), and the elastic-net baselines.

Predictors are stacked as ``x`` with shape ``(p, n, N)``: predictor ``j``
observed for ``n`` subjects on the ``N``-point grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .kernels import KernelSplit, psd_sqrt
from .operators import (
    DesignError,
    TruncatedDesign,
    assemble_designs,
    default_truncation,
    null_basis,
    transform_predictor,
)
from .solver import (
    BlockCoefficients,
    BlockProblem,
    KKTReport,
    SolverConfig,
    bcd_fit,
    kkt_residual,
)

log = logging.getLogger(__name__)

Kernels = Union[KernelSplit, Sequence[KernelSplit]]


class KernelBank:
    """Per-predictor kernel splits with cached roots and null bases."""

    def __init__(self, kernels: Kernels, p: int):
        if isinstance(kernels, KernelSplit):
            kernels = [kernels] * p
        kernels = list(kernels)
        if len(kernels) != p:
            raise ValueError(f"need {p} kernel splits, got {len(kernels)}")
        self.splits = kernels
        self._cache: dict = {}

    def __len__(self):
        return len(self.splits)

    @property
    def n_points(self) -> int:
        return self.splits[0].n_points

    def _cached(self, j, key, fn):
        k = (id(self.splits[j]), key)
        if k not in self._cache:
            self._cache[k] = fn(self.splits[j])
        return self._cache[k]

    def root(self, j: int, part: str = "full") -> np.ndarray:
        if part == "full":
            return self._cached(j, "full", lambda s: psd_sqrt(s.full))
        return self._cached(j, "complement", lambda s: psd_sqrt(s.complement))

    def null_basis(self, j: int) -> np.ndarray:
        return self._cached(j, "phi", lambda s: null_basis(s.null_part, s.null_dim))

    def null_dim(self, j: int) -> int:
        return self.splits[j].null_dim

    def groups(self, idx: Sequence[int]) -> list[list[int]]:
        """Partition ``idx`` by shared kernel object (preserves order inside groups)."""
        out: dict = {}
        for j in idx:
            out.setdefault(id(self.splits[j]), []).append(j)
        return list(out.values())


def as_bank(kernels, p: int) -> KernelBank:
    return kernels if isinstance(kernels, KernelBank) else KernelBank(kernels, p)


def check_data(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if x.ndim != 3:
        raise ValueError(f"predictors must be stacked as (p, n, N), got shape {x.shape}")
    if x.shape[1] != y.shape[0]:
        raise ValueError(f"{x.shape[1]} curves per predictor but {y.shape[0]} responses")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("data contain non-finite values")
    return x, y


def build_designs(x_c: np.ndarray, bank: KernelBank, idx: Sequence[int], m, theta: float,
                  part: str = "full") -> list[TruncatedDesign]:
    """Designs for predictors ``idx`` (rows of the centered stack ``x_c``).

    ``m`` is an int or a callable ``j -> M_j``.
    """
    designs: dict = {}
    for group in bank.groups(idx):
        root = bank.root(group[0], part)
        sizes = {j: (m(j) if callable(m) else m) for j in group}
        for size in set(sizes.values()):
            members = [j for j in group if sizes[j] == size]
            for j, d in zip(members, assemble_designs(x_c[members], root, size, theta)):
                designs[j] = d
    return [designs[j] for j in idx]


@dataclass
class LinearFit:
    """Fitted coefficient curves and the centering needed to predict."""

    beta_hat: np.ndarray
    x_mean: np.ndarray
    y_mean: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n_points = self.beta_hat.shape[1]
        return self.y_mean + np.einsum("jit,jt->i", x - self.x_mean[:, None, :], self.beta_hat) / n_points


@dataclass
class StageOneResult(LinearFit):
    selected: tuple = ()
    f_hat: Optional[np.ndarray] = None
    coefficients: Optional[BlockCoefficients] = None
    designs: list = field(default_factory=list)
    config: Optional[SolverConfig] = None
    kkt: Optional[KKTReport] = None
    m: int = 0

    def fitted_coefficients(self) -> np.ndarray:
        """In-sample fitted values from the eigen coordinates (centered)."""
        out = np.zeros(self.designs[0].gamma.shape[0]) if self.designs else 0.0
        for d, bj in zip(self.designs, self.coefficients.b):
            out = out + d.gamma @ (bj / np.sqrt(d.h_diag))
        return out


@dataclass
class StageTwoResult(LinearFit):
    selected: tuple = ()
    simple_set: tuple = ()
    complex_set: tuple = ()
    beta0_hat: Optional[np.ndarray] = None
    beta1_hat: Optional[np.ndarray] = None
    a_hat: dict = field(default_factory=dict)
    b1_hat: dict = field(default_factory=dict)
    coefficients: Optional[BlockCoefficients] = None
    designs: list = field(default_factory=list)
    z_tilde: Optional[np.ndarray] = None
    config: Optional[SolverConfig] = None
    kkt: Optional[KKTReport] = None
    m: int = 0


# ---------------------------------------------------------------------------
# Step-One


def step1_problem(designs, y_c) -> BlockProblem:
    return BlockProblem.from_designs(y_c, designs)


def step1_curves(designs, coeffs: BlockCoefficients, bank: KernelBank, idx: Sequence[int], n_points: int):
    """``(f_hat, beta_hat)`` grid curves for predictors ``idx``."""
    p = len(bank)
    f_hat = np.zeros((p, n_points))
    beta_hat = np.zeros((p, n_points))
    for j, d, bj in zip(idx, designs, coeffs.b):
        if np.any(bj != 0):
            f_hat[j] = d.b_tilde @ (bj / np.sqrt(d.h_diag))
            beta_hat[j] = bank.root(j) @ f_hat[j] / n_points
    return f_hat, beta_hat


def run_step1(x, kernels: Kernels, y, config: SolverConfig, m: Optional[int] = None,
              warm_start: Optional[BlockCoefficients] = None) -> StageOneResult:
    """Functional elastic-net fit of every predictor against the full kernel."""
    x, y = check_data(x, y)
    p, n, n_points = x.shape
    bank = as_bank(kernels, p)
    if bank.n_points != n_points:
        raise DesignError(f"kernel grid N={bank.n_points} but predictors have N={n_points}")
    x_mean = x.mean(axis=1)
    y_mean = float(y.mean())
    x_c = x - x_mean[:, None, :]
    y_c = y - y_mean
    if m is None:
        m = default_truncation(n, n_points, max(bank.null_dim(j) for j in range(p)))
    idx = list(range(p))
    designs = build_designs(x_c, bank, idx, m, config.theta)
    problem = step1_problem(designs, y_c)
    coeffs = bcd_fit(problem, config, warm_start=warm_start)
    f_hat, beta_hat = step1_curves(designs, coeffs, bank, idx, n_points)
    selected = tuple(j for j, act in enumerate(coeffs.active) if act)
    return StageOneResult(
        beta_hat=beta_hat, x_mean=x_mean, y_mean=y_mean, selected=selected, f_hat=f_hat,
        coefficients=coeffs, designs=designs, config=config, kkt=kkt_residual(problem, coeffs, config), m=m,
    )


# ---------------------------------------------------------------------------
# Step-Two


@dataclass
class StepTwoDesign:
    """Simple-part scores ``Z~`` and complement designs for the selected set."""

    selected: tuple
    phi: list
    z_tilde: np.ndarray
    z_slices: list
    designs: list

    def problem(self, y_c) -> BlockProblem:
        return BlockProblem.from_designs(y_c, self.designs, parametric_design=self.z_tilde)


def step2_design(x_c, bank: KernelBank, selected: Sequence[int], m: int, theta: float) -> StepTwoDesign:
    selected = tuple(selected)
    n = x_c.shape[1]
    n_points = x_c.shape[2]
    total = sum(bank.null_dim(j) for j in selected)
    if total > n:
        raise DesignError(
            f"M0 * |S| = {total} exceeds n = {n}; the unpenalised simple part is not identifiable"
        )
    phi = [bank.null_basis(j) for j in selected]
    z_blocks = [x_c[j] @ ph / n_points for j, ph in zip(selected, phi)]
    bounds = np.cumsum([0] + [zb.shape[1] for zb in z_blocks])
    z_slices = [slice(bounds[k], bounds[k + 1]) for k in range(len(selected))]
    z_tilde = np.hstack(z_blocks) if z_blocks else np.zeros((n, 0))
    designs = build_designs(x_c, bank, selected, lambda j: m - bank.null_dim(j), theta, part="complement")
    return StepTwoDesign(selected=selected, phi=phi, z_tilde=z_tilde, z_slices=z_slices, designs=designs)


def step2_curves(design: StepTwoDesign, coeffs: BlockCoefficients, bank: KernelBank, p: int, n_points: int):
    beta0 = np.zeros((p, n_points))
    beta1 = np.zeros((p, n_points))
    a_hat, b1_hat = {}, {}
    for k, j in enumerate(design.selected):
        a = coeffs.a[design.z_slices[k]]
        d = design.designs[k]
        bj = coeffs.b[k]
        a_hat[j] = a.copy()
        b1_hat[j] = bj.copy()
        beta0[j] = design.phi[k] @ a
        if np.any(bj != 0):
            # grid composition matching X~ = X K1^{1/2} / N, so that
            # <X, beta1> on the grid equals Gamma1 c1 exactly
            beta1[j] = bank.root(j, "complement") @ (d.b_tilde @ (bj / np.sqrt(d.h_diag))) / n_points
    return beta0, beta1, a_hat, b1_hat


def run_step2(x, kernels: Kernels, y, selected: Sequence[int], config: SolverConfig, m: Optional[int] = None,
              warm_start: Optional[BlockCoefficients] = None) -> StageTwoResult:
    """Refit the selected predictors with an unpenalised simple part and a
    penalised complement; blocks whose complement vanishes are "simple"."""
    x, y = check_data(x, y)
    p, n, n_points = x.shape
    bank = as_bank(kernels, p)
    x_mean = x.mean(axis=1)
    y_mean = float(y.mean())
    selected = tuple(sorted(int(j) for j in selected))
    if not selected:
        zeros = np.zeros((p, n_points))
        return StageTwoResult(beta_hat=zeros, x_mean=x_mean, y_mean=y_mean, beta0_hat=zeros.copy(),
                              beta1_hat=zeros.copy(), config=config)
    if any(j < 0 or j >= p for j in selected):
        raise ValueError("selected indices out of range")
    x_c = x - x_mean[:, None, :]
    y_c = y - y_mean
    if m is None:
        m = default_truncation(n, n_points, max(bank.null_dim(j) for j in selected))
    design = step2_design(x_c, bank, selected, m, config.theta)
    problem = design.problem(y_c)
    coeffs = bcd_fit(problem, config, warm_start=warm_start)
    beta0, beta1, a_hat, b1_hat = step2_curves(design, coeffs, bank, p, n_points)
    simple = tuple(j for j, act in zip(selected, coeffs.active) if not act)
    complex_ = tuple(j for j, act in zip(selected, coeffs.active) if act)
    return StageTwoResult(
        beta_hat=beta0 + beta1, x_mean=x_mean, y_mean=y_mean, selected=selected, simple_set=simple,
        complex_set=complex_, beta0_hat=beta0, beta1_hat=beta1, a_hat=a_hat, b1_hat=b1_hat,
        coefficients=coeffs, designs=design.designs, z_tilde=design.z_tilde, config=config,
        kkt=kkt_residual(problem, coeffs, config), m=m,
    )


# ---------------------------------------------------------------------------
# Full procedure and baselines


@dataclass
class MofiResult:
    stage_one: StageOneResult
    stage_two: StageTwoResult
    tuning: dict
    strategy: str

    @property
    def beta_hat(self):
        return self.stage_two.beta_hat

    def predict(self, x):
        if not self.stage_one.selected:
            return self.stage_one.predict(x)
        return self.stage_two.predict(x)


def run_mofi(x, y, kernels: Kernels, strategy: str = "optim", grid=None, null_warning: bool = True) -> MofiResult:
    """Tune Step-One by cross-validation, then run Step-Two with penalties
    either copied from Step-One (``"fix"``) or re-tuned (``"optim"``)."""
    return run_mofi_strategies(x, y, kernels, (strategy,), grid, null_warning)[strategy]


def run_mofi_strategies(x, y, kernels: Kernels, strategies=("fix", "optim"), grid=None,
                        null_warning: bool = True) -> dict:
    """One Step-One tuning and fit shared by several Step-Two strategies.

    Returns a dict mapping each strategy to its :class:`MofiResult`.
    """
    from .tuning import TuningGrid, tune_step_one, tune_step_two

    for strategy in strategies:
        if strategy not in ("fix", "optim"):
            raise ValueError(f"strategy must be 'fix' or 'optim', got {strategy!r}")
    x, y = check_data(x, y)
    bank = as_bank(kernels, x.shape[0])
    grid = grid or TuningGrid()
    rec1 = tune_step_one(x, y, bank, grid)
    s1 = run_step1(x, bank, y, rec1.solver_config(grid), m=rec1.m)
    out = {}
    if not s1.selected:
        if null_warning:
            log.warning("Step-One selected no predictors; returning the null model")
        empty = run_step2(x, bank, y, (), rec1.solver_config(grid))
        for strategy in strategies:
            out[strategy] = MofiResult(stage_one=s1, stage_two=empty, tuning={"stage_one": rec1}, strategy=strategy)
        return out
    for strategy in strategies:
        rec2 = tune_step_two(x, y, bank, grid, rec1, s1.selected, strategy=strategy)
        s2 = run_step2(x, bank, y, s1.selected, rec2.solver_config(grid), m=rec1.m)
        out[strategy] = MofiResult(stage_one=s1, stage_two=s2, tuning={"stage_one": rec1, "stage_two": rec2},
                                   strategy=strategy)
    return out


@dataclass
class RefineResult(LinearFit):
    selected: tuple = ()
    lambda2: float = 0.0
    coefficients: Optional[BlockCoefficients] = None
    tuning: Optional[object] = None


class RidgePath:
    """Solutions of ``1/(2n) ||y - G c||^2 + lambda2/2 ||c||^2`` for any
    ``lambda2 > 0`` from one eigendecomposition of ``G^T G / n``."""

    def __init__(self, g: np.ndarray, y: np.ndarray):
        n = y.shape[0]
        w, v = np.linalg.eigh(g.T @ g / n)
        self.w = np.clip(w, 0.0, None)
        self.v = v
        self.proj = v.T @ (g.T @ y / n)

    def coef(self, lambda2: float) -> np.ndarray:
        if not lambda2 > 0 and self.w.min(initial=1.0) <= 0:
            raise ValueError("lambda2 must be positive for a rank-deficient design")
        return self.v @ (self.proj / (self.w + lambda2))


def ridge_refit(step1: StageOneResult, x, y, kernels: Kernels, lambda2: float) -> RefineResult:
    """Step-One objective restricted to the selected set with ``lambda1 = 0``.

    Without the group penalty the problem is a ridge regression on the
    concatenated scores, solved directly.
    """
    x, y = check_data(x, y)
    p, n, n_points = x.shape
    bank = as_bank(kernels, p)
    sel = tuple(step1.selected)
    x_mean = x.mean(axis=1)
    y_mean = float(y.mean())
    if not sel:
        return RefineResult(beta_hat=np.zeros((p, n_points)), x_mean=x_mean, y_mean=y_mean, lambda2=lambda2)
    x_c = x - x_mean[:, None, :]
    designs = build_designs(x_c, bank, sel, step1.m, step1.config.theta)
    c = RidgePath(np.hstack([d.gamma for d in designs]), y - y_mean).coef(lambda2)
    bounds = np.cumsum([0] + [d.m for d in designs])
    coeffs = BlockCoefficients(b=[np.sqrt(d.h_diag) * c[bounds[k]:bounds[k + 1]] for k, d in enumerate(designs)])
    _, beta_hat = step1_curves(designs, coeffs, bank, sel, n_points)
    return RefineResult(beta_hat=beta_hat, x_mean=x_mean, y_mean=y_mean, selected=sel, lambda2=lambda2,
                        coefficients=coeffs)


def fenet_refine(step1: StageOneResult, x, y, kernels: Kernels, grid=None) -> RefineResult:
    """Ridge refit on the Step-One support with ``lambda2`` chosen by CV."""
    from .tuning import TuningGrid, tune_refine

    x, y = check_data(x, y)
    bank = as_bank(kernels, x.shape[0])
    if not step1.selected:
        return ridge_refit(step1, x, y, bank, 0.0)
    grid = grid or TuningGrid()
    rec = tune_refine(x, y, bank, grid, step1)
    out = ridge_refit(step1, x, y, bank, rec.lam)
    out.tuning = rec
    return out


def prediction_identity_gap(result: Union[StageOneResult, StageTwoResult], x) -> float:
    """Max gap between grid-space and coefficient-space in-sample fits."""
    x = np.asarray(x, dtype=float)
    n_points = x.shape[2]
    x_c = x - result.x_mean[:, None, :]
    grid_fit = np.einsum("jit,jt->i", x_c, result.beta_hat) / n_points
    coef_fit = np.zeros(x.shape[1])
    if isinstance(result, StageOneResult):
        coef_fit = coef_fit + result.fitted_coefficients()
    else:
        if result.selected:
            coef_fit = coef_fit + result.z_tilde @ result.coefficients.a
            for d, bj in zip(result.designs, result.coefficients.b):
                coef_fit = coef_fit + d.gamma @ (bj / np.sqrt(d.h_diag))
    return float(np.abs(grid_fit - coef_fit).max())


__all__ = [
    "KernelBank",
    "LinearFit",
    "MofiResult",
    "RefineResult",
    "RidgePath",
    "StageOneResult",
    "StageTwoResult",
    "StepTwoDesign",
    "build_designs",
    "fenet_refine",
    "prediction_identity_gap",
    "ridge_refit",
    "run_mofi",
    "run_mofi_strategies",
    "run_step1",
    "run_step2",
    "step2_design",
    "transform_predictor",
]
