"""Reproducing kernels on [0, 1]: closed forms, grid matrices, null/complement
splits and PSD square roots.

All grid matrices use the equally spaced grid ``{1/N, 2/N, ..., 1}``; integrals
are approximated by Riemann sums with weight ``1/N``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from scipy import linalg

PSD_TOL = 1e-8
SQRT_TOL = 1e-6
GRAM_COND_MAX = 1e12

Which = Literal["K", "K0", "K1"]
SCENARIOS = ("I", "II", "III")
_PI4 = np.pi**4


class KernelError(ValueError):
    """Raised for malformed, indefinite or singular kernel input."""


def grid(n_points: int) -> np.ndarray:
    """Observation grid ``t/N`` for ``t = 1..N``."""
    if n_points < 1:
        raise ValueError(f"grid size must be positive, got {n_points}")
    return np.arange(1, n_points + 1, dtype=float) / n_points


def _check_unit_interval(*arrays):
    for a in arrays:
        a = np.asarray(a, dtype=float)
        if np.any(a < 0.0) or np.any(a > 1.0) or np.any(~np.isfinite(a)):
            raise ValueError("kernel arguments must lie in [0, 1]")


def bernoulli_b4(t):
    """Fourth Bernoulli polynomial ``t^4 - 2t^3 + t^2 - 1/30`` on [0, 1]."""
    _check_unit_interval(t)
    t = np.asarray(t, dtype=float)
    out = t**4 - 2.0 * t**3 + t**2 - 1.0 / 30.0
    return float(out) if out.ndim == 0 else out


def _sobolev_full(s, t):
    return 1.0 / _PI4 - (bernoulli_b4(np.abs(s - t) / 2.0) + bernoulli_b4((s + t) / 2.0)) / 3.0


def _sobolev_null(scenario, s, t):
    const = np.full(np.broadcast(s, t).shape, 1.0 / _PI4)
    cosine = 2.0 / _PI4 * np.cos(np.pi * s) * np.cos(np.pi * t)
    if scenario == "I":
        return const
    if scenario == "II":
        return cosine
    return const + cosine


def gaussian_kernel(scale: float, s, t):
    """``exp(-scale * (s - t)^2)``."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.exp(-scale * (s - t) ** 2)


@dataclass(frozen=True)
class KernelSpec:
    """Declarative description of a kernel and its null space.

    ``kind="sobolev"`` selects one of the three simulation kernels built on the
    norm ``pi^4 (int beta)^2 + int (beta'')^2``; the null space is constants
    (I), ``cos(pi t)`` (II) or both (III).

    ``kind="gaussian"`` is ``exp(-scale (s-t)^2)`` whose null space is spanned
    by the kernel sections at ``anchors``.
    """

    kind: Literal["sobolev", "gaussian"]
    scenario: Optional[str] = None
    scale: Optional[float] = None
    anchors: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind == "sobolev":
            if self.scenario not in SCENARIOS:
                raise KernelError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        elif self.kind == "gaussian":
            if self.scale is None or not self.scale > 0:
                raise KernelError("gaussian kernel needs a positive scale")
            object.__setattr__(self, "anchors", tuple(float(a) for a in self.anchors))
            _check_unit_interval(np.asarray(self.anchors, dtype=float))
            if len(set(self.anchors)) != len(self.anchors):
                raise KernelError("anchor points must be distinct")
        else:
            raise KernelError(f"unknown kernel kind {self.kind!r}")

    @property
    def null_dim(self) -> int:
        if self.kind == "sobolev":
            return 2 if self.scenario == "III" else 1
        return len(self.anchors)


def eval_builtin_kernel(spec: KernelSpec, which: Which, s, t):
    """Closed-form evaluation of ``K``, ``K0`` or ``K1`` at ``(s, t)``."""
    _check_unit_interval(s, t)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if which not in ("K", "K0", "K1"):
        raise ValueError(f"which must be K, K0 or K1, got {which!r}")
    if spec.kind == "sobolev":
        full = _sobolev_full(s, t) if which != "K0" else None
        null = _sobolev_null(spec.scenario, s, t) if which != "K" else None
    else:
        full = gaussian_kernel(spec.scale, s, t) if which != "K0" else None
        null = None
        if which != "K":
            if not spec.anchors:
                null = np.zeros(np.broadcast(s, t).shape)
            else:
                a = np.asarray(spec.anchors)
                factor = _gram_factor(gaussian_kernel(spec.scale, a[:, None], a[None, :]))
                s_b, t_b = np.broadcast_arrays(s, t)
                psi_s = gaussian_kernel(spec.scale, s_b.reshape(-1, 1), a[None, :])
                psi_t = gaussian_kernel(spec.scale, t_b.reshape(-1, 1), a[None, :])
                null = np.sum(psi_s * linalg.cho_solve(factor, psi_t.T).T, axis=1).reshape(s_b.shape)
    if which == "K":
        out = full
    elif which == "K0":
        out = null
    else:
        out = full - null
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def _gram_factor(gram: np.ndarray):
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise KernelError("Gram matrix must be square")
    if not np.allclose(gram, gram.T, rtol=0, atol=1e-12 * max(1.0, np.abs(gram).max())):
        raise KernelError("Gram matrix must be symmetric")
    w = np.linalg.eigvalsh(gram)
    if w[0] <= 0 or w[-1] / w[0] > GRAM_COND_MAX:
        raise KernelError(
            f"Gram matrix is singular or ill-conditioned (eigenvalues {w[0]:.3g}..{w[-1]:.3g}); "
            "the null-space basis functions are (nearly) collinear"
        )
    return linalg.cho_factor(gram, lower=True)


def check_psd(m: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Validate a symmetric kernel matrix that is PSD up to ``tol * max eigenvalue``."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise KernelError(f"kernel matrix must be square, got shape {m.shape}")
    if not np.array_equal(m, m.T):
        raise KernelError("kernel matrix is not symmetric")
    w = np.linalg.eigvalsh(m)
    top = max(abs(w[-1]), abs(w[0]))
    if w[0] < -tol * top:
        raise KernelError(f"kernel matrix is indefinite: smallest eigenvalue {w[0]:.3e}, largest {w[-1]:.3e}")
    return m


def kernel_matrix(spec: KernelSpec, which: Which, n_points: int) -> np.ndarray:
    """``N x N`` grid evaluation ``(K(s/N, t/N))``."""
    g = grid(n_points)
    m = eval_builtin_kernel(spec, which, g[:, None], g[None, :])
    # enforce exact symmetry for the factorised null kernels
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class KernelSplit:
    """Grid matrices ``K = K0 + K1`` with the null-space dimension ``M0``."""

    full: np.ndarray
    null_part: np.ndarray
    complement: np.ndarray
    null_dim: int

    def __post_init__(self):
        for m in (self.full, self.null_part, self.complement):
            m.setflags(write=False)
        scale = max(np.abs(self.full).max(), 1e-300)
        dev = np.abs(self.full - self.null_part - self.complement).max()
        if dev > 1e-12 * scale:
            raise KernelError(f"K0 + K1 deviates from K by {dev:.3e}")
        if self.null_dim < 1:
            raise KernelError("null space dimension must be positive")

    @property
    def n_points(self) -> int:
        return self.full.shape[0]

    @classmethod
    def from_spec(cls, spec: KernelSpec, n_points: int) -> "KernelSplit":
        full = kernel_matrix(spec, "K", n_points)
        if spec.kind == "gaussian":
            if not spec.anchors:
                raise KernelError("gaussian kernel split needs at least one anchor")
            a = np.asarray(spec.anchors)
            g = grid(n_points)
            basis = gaussian_kernel(spec.scale, g[:, None], a[None, :])
            gram = gaussian_kernel(spec.scale, a[:, None], a[None, :])
            return null_kernel_from_basis(full, basis, gram)
        null = kernel_matrix(spec, "K0", n_points)
        return cls(full=full, null_part=null, complement=full - null, null_dim=spec.null_dim)


def null_kernel_from_basis(ambient: np.ndarray, basis_values: np.ndarray, gram: np.ndarray) -> KernelSplit:
    """Null kernel ``psi(s)^T G^{-1} psi(t)`` for a (non-orthogonal) basis.

    Parameters
    ----------
    ambient : (N, N) array
        Grid matrix of the ambient kernel ``K``.
    basis_values : (N, M0) array
        Basis functions evaluated on the same grid.
    gram : (M0, M0) array
        RKHS inner products ``<psi_r, psi_s>`` under ``K``.
    """
    ambient = np.asarray(ambient, dtype=float)
    basis_values = np.asarray(basis_values, dtype=float)
    if basis_values.ndim == 1:
        basis_values = basis_values[:, None]
    gram = np.atleast_2d(np.asarray(gram, dtype=float))
    if basis_values.shape[0] != ambient.shape[0]:
        raise KernelError("basis functions and ambient kernel live on different grids")
    if gram.shape != (basis_values.shape[1],) * 2:
        raise KernelError("Gram matrix size does not match the number of basis functions")
    factor = _gram_factor(gram)
    null = basis_values @ linalg.cho_solve(factor, basis_values.T)
    null = 0.5 * (null + null.T)
    return KernelSplit(full=ambient, null_part=null, complement=ambient - null, null_dim=basis_values.shape[1])


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix.

    Eigenvalues in ``[-1e-6 * max, 0)`` are treated as round-off and clipped to
    zero, as are positive ones below ``N * eps * max``; anything more negative
    raises :class:`KernelError`.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise KernelError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(np.abs(m).max(), 1e-300)):
        raise KernelError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    top = max(abs(w[-1]), abs(w[0]), 1e-300)
    if w[0] < -SQRT_TOL * top:
        raise KernelError(f"matrix is strongly indefinite: eigenvalue {w[0]:.3e} vs max {top:.3e}")
    # eigenvalues at round-off level are zero; their square roots would not be
    w = np.where(w > m.shape[0] * np.finfo(float).eps * top, w, 0.0)
    root = (v * np.sqrt(w)) @ v.T
    return 0.5 * (root + root.T)


def to_csv(m: np.ndarray, path) -> Path:
    """Write a matrix as headerless CSV with round-trip precision."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(m):
            writer.writerow([repr(float(x)) for x in row])
    return path


def from_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def sobolev_k1_series(s, t, n_terms: int = 2000):
    """Truncated cosine series of the Scenario-I complement kernel.

    Slow; used only to cross-check the Bernoulli closed form.
    """
    s = np.asarray(s, dtype=float)[..., None]
    t = np.asarray(t, dtype=float)[..., None]
    m = np.arange(1, n_terms + 1, dtype=float)
    return np.sum(2.0 * np.cos(m * np.pi * s) * np.cos(m * np.pi * t) / (_PI4 * m**4), axis=-1)


__all__ = [
    "KernelError",
    "KernelSpec",
    "KernelSplit",
    "bernoulli_b4",
    "check_psd",
    "eval_builtin_kernel",
    "from_csv",
    "gaussian_kernel",
    "grid",
    "kernel_matrix",
    "null_kernel_from_basis",
    "psd_sqrt",
    "sobolev_k1_series",
    "to_csv",
]

