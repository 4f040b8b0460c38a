"""Discretised transformed predictors and truncated eigen-designs.

For a predictor sampled on the grid (``X``, ``n x N``) and a kernel root
``K^{1/2}`` the solver works with

* ``X~ = X K^{1/2} / N``            transformed curves
* ``T  = X~^T X~ / n``              their empirical covariance
* ``B~ = sqrt(N) * eigvecs(T)[:, :M]``, ``Lambda = eigvals(T)[:M]``
* ``Gamma = X~ B~ / N``             scores in the eigen basis
* ``H = Lambda / N + theta``        (diagonal)
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .kernels import psd_sqrt

DIAG_TOL = 1e-6
DEFAULT_M_CAP = 50


class DesignError(ValueError):
    """Raised when a design cannot be assembled from the given inputs."""


def center(x: np.ndarray, mean: Optional[np.ndarray] = None):
    """Column-center ``x``; returns ``(centered, mean)``."""
    x = np.asarray(x, dtype=float)
    if mean is None:
        mean = x.mean(axis=0)
    return x - mean, mean


def transform_predictor(x: np.ndarray, k_sqrt: np.ndarray) -> np.ndarray:
    """``X~ = X K^{1/2} / N`` (works on a stack of predictors too)."""
    x = np.asarray(x, dtype=float)
    k_sqrt = np.asarray(k_sqrt, dtype=float)
    n_points = k_sqrt.shape[0]
    if k_sqrt.shape != (n_points, n_points) or x.shape[-1] != n_points:
        raise DesignError(f"dimension mismatch: predictor {x.shape} vs kernel root {k_sqrt.shape}")
    return x @ k_sqrt / n_points


def empirical_cov(x_tilde: np.ndarray) -> np.ndarray:
    """``X~^T X~ / n``; batched over leading axes."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    n = x_tilde.shape[-2]
    if n < 1:
        raise DesignError("need at least one observation")
    cov = np.swapaxes(x_tilde, -1, -2) @ x_tilde / n
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # first entry with non-negligible magnitude made positive, per column
    scale = np.abs(vecs).max(axis=-2, keepdims=True)
    significant = np.abs(vecs) > 1e-12 * np.maximum(scale, 1e-300)
    first = np.argmax(significant, axis=-2)
    pivot = np.take_along_axis(vecs, first[..., None, :], axis=-2)
    signs = np.where(pivot < 0, -1.0, 1.0)
    return vecs * signs


def truncated_eigs(t: np.ndarray, m: int):
    """Top-``m`` eigenpairs of a symmetric PSD matrix.

    Returns ``(B~, Lambda)`` with ``B~ = sqrt(N) * eigenvectors`` (so that
    ``B~^T B~ / N = I``) and ``Lambda`` descending and clipped at zero.
    Each eigenvector is signed so its first non-negligible entry is positive.
    Leading batch axes are supported.
    """
    t = np.asarray(t, dtype=float)
    n_points = t.shape[-1]
    if m < 1 or m > n_points:
        raise DesignError(f"truncation M={m} must lie in [1, {n_points}]")
    w, v = np.linalg.eigh(t)
    w = w[..., ::-1][..., :m]
    v = v[..., ::-1][..., :m]
    return np.sqrt(n_points) * _fix_signs(v), np.clip(w, 0.0, None)


@dataclass(frozen=True)
class TruncatedDesign:
    """Per-predictor solver quantities in the truncated eigen basis."""

    x_tilde: np.ndarray
    b_tilde: np.ndarray
    lambda_diag: np.ndarray
    gamma: np.ndarray
    theta: float

    @property
    def m(self) -> int:
        return self.b_tilde.shape[1]

    @property
    def n_points(self) -> int:
        return self.b_tilde.shape[0]

    @property
    def h_diag(self) -> np.ndarray:
        return self.lambda_diag / self.n_points + self.theta

    def with_theta(self, theta: float) -> "TruncatedDesign":
        if not theta > 0:
            raise DesignError(f"theta must be positive, got {theta}")
        return replace(self, theta=float(theta))

    def scores(self, x_centered: np.ndarray, k_sqrt: np.ndarray) -> np.ndarray:
        """``Gamma`` for new (already centered) curves, e.g. a held-out fold."""
        return transform_predictor(x_centered, k_sqrt) @ self.b_tilde / self.n_points

    def curve(self, c: np.ndarray) -> np.ndarray:
        """Grid values ``B~ c`` of a function given in eigen coordinates."""
        return self.b_tilde @ c


def default_truncation(n: int, n_points: int, null_dim: int = 0, cap: int = DEFAULT_M_CAP) -> int:
    """``min(n - 1, N, cap)``, which must leave room for ``null_dim + 1`` directions."""
    m = min(n - 1, n_points, cap)
    if m < null_dim + 1:
        raise DesignError(
            f"truncation M={m} cannot exceed the null-space dimension {null_dim}; "
            "increase the sample size or the grid"
        )
    return m


def assemble_design(x: np.ndarray, kernel: np.ndarray, m: int, theta: float,
                    k_sqrt: Optional[np.ndarray] = None, check: bool = True) -> TruncatedDesign:
    """Build the truncated design of one centered predictor.

    ``kernel`` is the grid kernel matrix; pass ``k_sqrt`` to reuse a root
    that has already been computed.
    """
    if not theta > 0:
        raise DesignError(f"theta must be positive, got {theta}")
    x = np.asarray(x, dtype=float)
    n, n_points = x.shape
    if m > n_points:
        raise DesignError(f"truncation M={m} exceeds the grid size N={n_points}")
    if k_sqrt is None:
        k_sqrt = psd_sqrt(kernel)
    x_tilde = transform_predictor(x, k_sqrt)
    b_tilde, lam = truncated_eigs(empirical_cov(x_tilde), m)
    gamma = x_tilde @ b_tilde / n_points
    design = TruncatedDesign(x_tilde=x_tilde, b_tilde=b_tilde, lambda_diag=lam, gamma=gamma, theta=float(theta))
    if check:
        check_diagonal(design)
    return design


def assemble_designs(x: np.ndarray, k_sqrt: np.ndarray, m: int, theta: float) -> list[TruncatedDesign]:
    """Batched :func:`assemble_design` for a ``(p, n, N)`` stack sharing one kernel."""
    x = np.asarray(x, dtype=float)
    p, n, n_points = x.shape
    if m > n_points:
        raise DesignError(f"truncation M={m} exceeds the grid size N={n_points}")
    x_tilde = transform_predictor(x, k_sqrt)
    b_tilde, lam = truncated_eigs(empirical_cov(x_tilde), m)
    gamma = x_tilde @ b_tilde / n_points
    return [
        TruncatedDesign(x_tilde=x_tilde[j], b_tilde=b_tilde[j], lambda_diag=lam[j], gamma=gamma[j], theta=float(theta))
        for j in range(p)
    ]


def check_diagonal(design: TruncatedDesign, tol: float = DIAG_TOL) -> None:
    """Verify ``Gamma^T Gamma / n == Lambda / N`` (off-diagonals vanish)."""
    n = design.gamma.shape[0]
    gram = design.gamma.T @ design.gamma / n
    target = design.lambda_diag / design.n_points
    scale = max(target.max(initial=0.0), 1e-300)
    off = gram - np.diag(np.diag(gram))
    if np.abs(off).max(initial=0.0) > tol * scale or np.abs(np.diag(gram) - target).max(initial=0.0) > tol * scale:
        raise DesignError("Gamma^T Gamma / n is not the diagonal Lambda / N; eigenvectors are inconsistent")


def null_basis(null_kernel: np.ndarray, null_dim: int) -> np.ndarray:
    """``Phi~ = sqrt(N) * top-M0 eigenvectors`` of the null-kernel grid matrix."""
    phi, lam = truncated_eigs(null_kernel, null_dim)
    if lam[-1] <= 1e-12 * max(lam[0], 1e-300):
        raise DesignError(f"null kernel matrix has rank below M0={null_dim} on this grid")
    return phi
