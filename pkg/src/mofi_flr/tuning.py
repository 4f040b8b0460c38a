"""K-fold cross-validation over penalty grids.

Step-One searches ``(lambda, alpha, theta, M)`` with ``lambda1 = alpha*lambda``
and ``lambda2 = (1-alpha)*lambda``; Step-Two searches ``(lambda_bar, alpha_bar)``
with ``lambda_bar`` no larger than the Step-One choice and ``alpha_bar`` in a
window around the Step-One ``alpha``.  Each lambda path is traversed in
descending order with warm starts.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .operators import default_truncation
from .pipeline import RidgePath, StageOneResult, as_bank, build_designs, check_data, step2_design
from .solver import BlockProblem, PreparedProblem, SolverConfig, SolverError

log = logging.getLogger(__name__)

_TIE_RTOL = 1e-12

# lambda2 / lambda1 = (1 - alpha) / alpha spans ten decades: the ridge level is
# measured against covariance eigenvalues while the group level is measured
# against score norms, and the two differ by many orders of magnitude
DEFAULT_ALPHAS = tuple(1.0 - 10.0 ** -k for k in range(1, 11))


class TuningError(RuntimeError):
    """No grid point could be fitted."""


def split_folds(n: int, k: int, seed: int = 0) -> list[np.ndarray]:
    """Seeded partition of ``range(n)`` into ``k`` folds whose sizes differ by at most one.

    Larger folds come first, e.g. ``n = 7, k = 5`` gives sizes ``(2, 2, 1, 1, 1)``.
    """
    if k < 2:
        raise ValueError("need at least two folds")
    if k > n:
        raise ValueError(f"cannot split {n} observations into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


def _as_tuple(v):
    return None if v is None else tuple(v)


@dataclass(frozen=True)
class TuningGrid:
    """Search grids and CV settings.

    ``alpha`` mixes the penalties as ``lambda1 = alpha*lambda`` and
    ``lambda2 = (1-alpha)*lambda``; ``kappa`` inflates the zero threshold
    (a block is dropped when ``||rho|| <= kappa*lambda1``) without adding
    shrinkage to the blocks that stay active.

    ``kappa_grid``, when given, makes kappa a cross-validated coordinate
    instead of the fixed ``kappa``; Step-Two reuses the Step-One choice.

    ``lambda_grid`` and ``theta_grid`` hold absolute values; when omitted,
    lambda runs over ``n_lambda`` log-spaced points from ``lambda_max`` down to
    ``lambda_min_ratio * lambda_max`` and theta is ``theta_factors`` times the
    largest eigenvalue among the transformed sample covariances.
    """

    lambda_grid: Optional[tuple] = None
    n_lambda: int = 20
    lambda_min_ratio: float = 1e-3
    alpha_grid: tuple = DEFAULT_ALPHAS
    theta_grid: Optional[tuple] = None
    theta_factors: tuple = (0.01, 0.1, 1.0)
    m_grid: Optional[tuple] = None
    folds: int = 5
    seed: int = 0
    kappa: float = 5.0
    kappa_grid: Optional[tuple] = None
    alpha_window: int = 2
    n_refine_lambda: int = 25
    refine_min_ratio: float = 1e-8
    outer_tol: float = 1e-6
    max_outer_iters: int = 500

    def __post_init__(self):
        for name in ("lambda_grid", "alpha_grid", "theta_grid", "theta_factors", "m_grid", "kappa_grid"):
            object.__setattr__(self, name, _as_tuple(getattr(self, name)))
        if self.lambda_grid is not None and (not self.lambda_grid or min(self.lambda_grid) <= 0):
            raise ValueError("lambda_grid must be non-empty and positive")
        if not self.alpha_grid or not all(0 < a < 1 for a in self.alpha_grid):
            raise ValueError("alpha_grid must be non-empty with values in (0, 1)")
        if self.theta_grid is not None and (not self.theta_grid or min(self.theta_grid) <= 0):
            raise ValueError("theta_grid must be non-empty and positive")
        if not self.theta_factors or min(self.theta_factors) <= 0:
            raise ValueError("theta_factors must be non-empty and positive")
        if self.m_grid is not None and (not self.m_grid or min(self.m_grid) < 1):
            raise ValueError("m_grid must be non-empty with positive entries")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.n_lambda < 1 or self.n_refine_lambda < 1:
            raise ValueError("grid sizes must be positive")
        if not (0 < self.lambda_min_ratio < 1 and 0 < self.refine_min_ratio < 1):
            raise ValueError("lambda_min_ratio and refine_min_ratio must lie in (0, 1)")
        if self.kappa < 1 or self.alpha_window < 0:
            raise ValueError("need kappa >= 1 and alpha_window >= 0")
        if self.kappa_grid is not None and (not self.kappa_grid or min(self.kappa_grid) < 1):
            raise ValueError("kappa_grid must be non-empty with values >= 1")

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @property
    def kappa_values(self) -> tuple:
        return self.kappa_grid if self.kappa_grid is not None else (self.kappa,)

    def solver_config(self, lam: float, alpha: float, theta: float, kappa: Optional[float] = None) -> SolverConfig:
        return SolverConfig.from_alpha(lam, alpha, theta=theta, kappa=self.kappa if kappa is None else kappa,
                                       outer_tol=self.outer_tol, max_outer_iters=self.max_outer_iters)


@dataclass
class TuningRecord:
    stage: str
    lam: float
    alpha: float
    theta: float
    m: int
    cv_error: float
    null_cv_error: float
    seed: int
    folds: int
    strategy: str = "cv"
    lambda_path: tuple = ()
    surface: list = field(default_factory=list)
    n_failed: int = 0
    kappa: float = 1.0

    @property
    def lambda1(self) -> float:
        return self.alpha * self.lam

    @property
    def lambda2(self) -> float:
        return (1.0 - self.alpha) * self.lam

    def solver_config(self, grid: TuningGrid) -> SolverConfig:
        return grid.solver_config(self.lam, self.alpha, self.theta, self.kappa)

    def as_dict(self) -> dict:
        return {
            "stage": self.stage, "strategy": self.strategy, "lambda": self.lam, "alpha": self.alpha,
            "lambda1": self.lambda1, "lambda2": self.lambda2, "theta": self.theta, "m": self.m, "kappa": self.kappa,
            "cv_error": _json_float(self.cv_error), "null_cv_error": _json_float(self.null_cv_error),
            "seed": self.seed, "folds": self.folds, "n_failed": self.n_failed,
        }


def _json_float(v):
    return None if v is None or not math.isfinite(v) else float(v)


def write_surface(record: TuningRecord, path) -> None:
    """CV-error surface as CSV: grid coordinates and mean held-out error."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "lambda", "alpha", "theta", "m", "kappa", "cv_error"])
        for lam, alpha, theta, m, kappa, err in record.surface:
            w.writerow([record.stage, repr(lam), repr(alpha), repr(theta), m, repr(kappa), repr(err)])


# ---------------------------------------------------------------------------
# fold bookkeeping


@dataclass
class _Split:
    """One training/held-out pair; ``test`` is empty for the full sample."""

    train: np.ndarray
    test: np.ndarray
    x_c: np.ndarray
    x_test_c: np.ndarray
    y_c: np.ndarray
    y_mean: float
    y_test: np.ndarray
    cache: dict = field(default_factory=dict)


def _make_splits(x, y, folds: Sequence[np.ndarray]) -> list[_Split]:
    n = y.shape[0]
    out = []
    for test in [np.zeros(0, dtype=int)] + list(folds):
        train = np.setdiff1d(np.arange(n), test)
        x_tr = x[:, train]
        mean = x_tr.mean(axis=1)
        y_mean = float(y[train].mean())
        out.append(_Split(
            train=train, test=test, x_c=x_tr - mean[:, None, :], x_test_c=x[:, test] - mean[:, None, :],
            y_c=y[train] - y_mean, y_mean=y_mean, y_test=y[test],
        ))
    return out


def _test_scores(x_test_c, designs, roots) -> np.ndarray:
    """Held-out ``Gamma`` blocks stacked column-wise."""
    cols = []
    for xt, d, root in zip(x_test_c, designs, roots):
        n_points = d.n_points
        cols.append((xt @ root / n_points) @ d.b_tilde / n_points)
    return np.hstack(cols) if cols else np.zeros((x_test_c.shape[1], 0))


def _best(surface, key):
    """Index of the minimal CV error; near-ties resolved by ``key`` (larger wins)."""
    errs = np.array([row[-1] for row in surface])
    finite = np.isfinite(errs)
    if not finite.any():
        raise TuningError("every grid point failed to converge")
    best = errs[finite].min()
    cands = [i for i in np.flatnonzero(finite) if errs[i] <= best + _TIE_RTOL * abs(best)]
    return max(cands, key=lambda i: key(surface[i]))


def _mse(pred, y):
    return float(np.mean((pred - y) ** 2))


def _theta_values(grid: TuningGrid, top: float) -> list[float]:
    cand = list(grid.theta_grid) if grid.theta_grid is not None else [f * top for f in grid.theta_factors]
    kept = sorted({float(t) for t in cand if t <= top * (1 + 1e-12)})
    if not kept:
        raise TuningError(f"no theta value is at most the largest covariance eigenvalue {top:.4g}")
    return kept


def _lambda_path(grid: TuningGrid, lam_max: float) -> np.ndarray:
    if grid.lambda_grid is not None:
        return np.array(sorted(grid.lambda_grid, reverse=True), dtype=float)
    return np.geomspace(lam_max, lam_max * grid.lambda_min_ratio, grid.n_lambda)


# ---------------------------------------------------------------------------
# Step-One


def tune_step_one(x, y, kernels, grid: TuningGrid) -> TuningRecord:
    """Cross-validated ``(lambda, alpha, theta, M)`` for Step-One."""
    x, y = check_data(x, y)
    p, n, n_points = x.shape
    bank = as_bank(kernels, p)
    folds = split_folds(n, grid.folds, grid.seed)
    splits = _make_splits(x, y, folds)
    idx = list(range(p))
    null_dim = max(bank.null_dim(j) for j in idx)
    n_train = min(len(s.train) for s in splits)
    m_values = list(grid.m_grid) if grid.m_grid is not None else [default_truncation(n_train, n_points, null_dim)]
    roots = [bank.root(j) for j in idx]

    for s in splits:
        for m in m_values:
            designs = build_designs(s.x_c, bank, idx, m, 1.0)
            s.cache[m] = (designs, _test_scores(s.x_test_c, designs, roots))
    full = splits[0]
    top = max(float(d.lambda_diag[0]) / n_points for m in m_values for d in full.cache[m][0])
    thetas = _theta_values(grid, top)
    null_err = float(np.mean([_mse(np.full(len(s.test), s.y_mean), s.y_test) for s in splits[1:]]))

    surface, paths = [], {}
    n_failed = 0
    for m in m_values:
        for theta in thetas:
            prepared = []
            for s in splits:
                designs, gt = s.cache[m]
                ds = [d.with_theta(theta) for d in designs]
                prob = BlockProblem.from_designs(s.y_c, ds)
                prepared.append((PreparedProblem(prob, theta, check=False), np.concatenate([d.h_diag for d in ds])))
            rho_max = max(float(pp.null_scores().max(initial=0.0)) for pp, _ in prepared)
            for kappa, alpha in itertools.product(grid.kappa_values, grid.alpha_grid):
                path = _lambda_path(grid, rho_max / (kappa * alpha) if rho_max > 0 else 1.0)
                paths[(m, theta, alpha, kappa)] = path
                errs = np.zeros((len(path), len(folds)))
                for f, (s, (pp, h)) in enumerate(zip(splits[1:], prepared[1:])):
                    gt = s.cache[m][1]
                    warm = None
                    for i, lam in enumerate(path):
                        try:
                            coeffs = pp.fit(grid.solver_config(lam, alpha, theta, kappa), warm)
                        except SolverError as exc:
                            log.debug("fit failed at lambda=%.3g alpha=%.2f theta=%.3g: %s", lam, alpha, theta, exc)
                            errs[i, f] = np.nan
                            n_failed += 1
                            warm = None
                            continue
                        warm = coeffs
                        b = np.concatenate(coeffs.b) / np.sqrt(h)
                        errs[i, f] = _mse(s.y_mean + gt @ b, s.y_test)
                mean = errs.mean(axis=1)
                for lam, err in zip(path, mean):
                    surface.append((float(lam), float(alpha), float(theta), int(m), float(kappa),
                                    float(err) if np.isfinite(err) else math.inf))
    i = _best(surface, key=lambda r: (r[0], r[1], r[4]))
    lam, alpha, theta, m, kappa, err = surface[i]
    return TuningRecord(
        stage="one", lam=lam, alpha=alpha, theta=theta, m=m, cv_error=err, null_cv_error=null_err,
        seed=grid.seed, folds=grid.folds, lambda_path=tuple(paths[(m, theta, alpha, kappa)]), surface=surface,
        n_failed=n_failed, kappa=kappa,
    )


# ---------------------------------------------------------------------------
# Step-Two


def alpha_window(alpha: float, grid: TuningGrid) -> list[float]:
    """Grid values of alpha within ``alpha_window`` positions of ``alpha``.

    On the evenly spaced grid ``0.1, ..., 0.9`` a window of two positions is
    the interval ``alpha +- 0.2``.
    """
    values = sorted(grid.alpha_grid)
    if alpha not in values:
        values = sorted(set(values) | {alpha})
    i = values.index(alpha)
    k = grid.alpha_window
    return values[max(0, i - k): i + k + 1]


def tune_step_two(x, y, kernels, grid: TuningGrid, stage_one: TuningRecord, selected: Sequence[int],
                  strategy: str = "optim") -> TuningRecord:
    """Step-Two penalties: copied from Step-One (``fix``) or cross-validated (``optim``)."""
    if strategy == "fix":
        return TuningRecord(
            stage="two", lam=stage_one.lam, alpha=stage_one.alpha, theta=stage_one.theta, m=stage_one.m,
            cv_error=math.nan, null_cv_error=stage_one.null_cv_error, seed=grid.seed, folds=grid.folds,
            strategy="fix", kappa=stage_one.kappa,
        )
    if strategy != "optim":
        raise ValueError(f"strategy must be 'fix' or 'optim', got {strategy!r}")
    x, y = check_data(x, y)
    p, n, n_points = x.shape
    bank = as_bank(kernels, p)
    selected = tuple(sorted(selected))
    if not selected:
        raise ValueError("Step-Two tuning needs a non-empty selected set")
    theta, m = stage_one.theta, stage_one.m
    path = [lam for lam in (stage_one.lambda_path or (stage_one.lam,)) if lam <= stage_one.lam * (1 + 1e-12)]
    if not path or path[0] < stage_one.lam:
        path = [stage_one.lam] + path
    path = np.array(sorted(set(path), reverse=True))
    folds = split_folds(n, grid.folds, grid.seed)
    splits = _make_splits(x, y, folds)[1:]
    roots = [bank.root(j, "complement") for j in selected]

    prepared = []
    for s in splits:
        design = step2_design(s.x_c, bank, selected, m, theta)
        prob = design.problem(s.y_c)
        z_test = np.hstack([s.x_test_c[j] @ ph / n_points for j, ph in zip(selected, design.phi)])
        g_test = _test_scores(s.x_test_c[list(selected)], design.designs, roots)
        h = np.concatenate([d.h_diag for d in design.designs])
        prepared.append((s, PreparedProblem(prob, theta), z_test, g_test, h))
    null_err = float(np.mean([_mse(np.full(len(s.test), s.y_mean), s.y_test) for s in splits]))

    surface = []
    n_failed = 0
    for alpha in alpha_window(stage_one.alpha, grid):
        errs = np.zeros((len(path), len(splits)))
        for f, (s, pp, z_test, g_test, h) in enumerate(prepared):
            warm = None
            for i, lam in enumerate(path):
                try:
                    coeffs = pp.fit(grid.solver_config(lam, alpha, theta, stage_one.kappa), warm)
                except SolverError:
                    errs[i, f] = np.nan
                    n_failed += 1
                    warm = None
                    continue
                warm = coeffs
                pred = s.y_mean + z_test @ coeffs.a + g_test @ (np.concatenate(coeffs.b) / np.sqrt(h))
                errs[i, f] = _mse(pred, s.y_test)
        for lam, err in zip(path, errs.mean(axis=1)):
            surface.append((float(lam), float(alpha), float(theta), int(m), float(stage_one.kappa),
                            float(err) if np.isfinite(err) else math.inf))
    i = _best(surface, key=lambda r: (r[0], r[1]))
    lam, alpha, _, _, _, err = surface[i]
    return TuningRecord(
        stage="two", lam=lam, alpha=alpha, theta=theta, m=m, cv_error=err, null_cv_error=null_err,
        seed=grid.seed, folds=grid.folds, strategy="optim", lambda_path=tuple(path), surface=surface,
        n_failed=n_failed, kappa=stage_one.kappa,
    )


# ---------------------------------------------------------------------------
# ridge refit on the Step-One support


def refine_lambda_path(top_eigenvalue: float, grid: TuningGrid) -> np.ndarray:
    """Descending ``lambda2`` values on the scale of the covariance eigenvalues."""
    return np.geomspace(top_eigenvalue, top_eigenvalue * grid.refine_min_ratio, grid.n_refine_lambda)


def tune_refine(x, y, kernels, grid: TuningGrid, step1: StageOneResult) -> TuningRecord:
    """Cross-validated ``lambda2`` for the ridge refit with ``lambda1 = 0``."""
    x, y = check_data(x, y)
    p, n, n_points = x.shape
    bank = as_bank(kernels, p)
    sel = list(step1.selected)
    if not sel:
        raise ValueError("ridge refit needs a non-empty selected set")
    theta, m = step1.config.theta, step1.m
    top = max(float(step1.designs[j].lambda_diag[0]) for j in sel) / n_points
    path = refine_lambda_path(top, grid)
    folds = split_folds(n, grid.folds, grid.seed)
    splits = _make_splits(x, y, folds)[1:]
    roots = [bank.root(j) for j in sel]
    errs = np.zeros((len(path), len(splits)))
    for f, s in enumerate(splits):
        designs = build_designs(s.x_c, bank, sel, m, theta)
        ridge = RidgePath(np.hstack([d.gamma for d in designs]), s.y_c)
        g_test = _test_scores(s.x_test_c[sel], designs, roots)
        for i, lam2 in enumerate(path):
            errs[i, f] = _mse(s.y_mean + g_test @ ridge.coef(lam2), s.y_test)
    null_err = float(np.mean([_mse(np.full(len(s.test), s.y_mean), s.y_test) for s in splits]))
    surface = [(float(l2), 0.0, float(theta), int(m), 1.0, float(e)) for l2, e in zip(path, errs.mean(axis=1))]
    i = _best(surface, key=lambda r: (r[0],))
    return TuningRecord(
        stage="refine", lam=surface[i][0], alpha=0.0, theta=theta, m=m, cv_error=surface[i][-1],
        null_cv_error=null_err, seed=grid.seed, folds=grid.folds, lambda_path=tuple(path), surface=surface,
    )


def cv_grid_search(x, y, kernels, grid: TuningGrid, stage: str = "one",
                   stage_one: Optional[TuningRecord] = None, selected: Optional[Sequence[int]] = None) -> TuningRecord:
    """Dispatch to the Step-One or Step-Two (``optim``) search."""
    if stage == "one":
        return tune_step_one(x, y, kernels, grid)
    if stage == "two":
        if stage_one is None or selected is None:
            raise ValueError("Step-Two search needs the Step-One record and selected set")
        return tune_step_two(x, y, kernels, grid, stage_one, selected, strategy="optim")
    raise ValueError(f"stage must be 'one' or 'two', got {stage!r}")


__all__ = [
    "TuningError",
    "TuningGrid",
    "TuningRecord",
    "alpha_window",
    "cv_grid_search",
    "refine_lambda_path",
    "split_folds",
    "tune_refine",
    "tune_step_one",
    "tune_step_two",
    "write_surface",
]
