"""Evaluation quantities: relative excess risk, selection and form error
rates, prediction summaries, and per-replicate result tables."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

RESULT_COLUMNS = ("scenario", "n", "sigma", "method", "replicate", "rer", "fpr", "fnr", "r01", "r10", "kkt",
                  "slack")
SUMMARY_METRICS = ("rer", "fpr", "fnr", "r01", "r10")


def _functional(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``sum_j <X_ij, beta_j>`` by Riemann sums; ``x`` is ``(p, n, N)``."""
    return np.einsum("jit,jt->i", x, beta) / x.shape[-1]


def rer(beta_hat, beta_true, test_predictors) -> float:
    """Relative excess risk on a test sample.

    ``mean((sum_j <X*_j, beta_hat_j - beta_j>)^2) / mean((sum_j <X*_j, beta_j>)^2)``
    """
    x = np.asarray(test_predictors, dtype=float)
    beta_hat = np.asarray(beta_hat, dtype=float)
    beta_true = np.asarray(beta_true, dtype=float)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError("test predictors must be a non-empty (p, n, N) stack")
    if beta_hat.shape != beta_true.shape or beta_true.shape != (x.shape[0], x.shape[2]):
        raise ValueError("coefficient curves must have shape (p, N) matching the test predictors")
    den = np.mean(_functional(x, beta_true) ** 2)
    if den == 0:
        raise ValueError("true functional is identically zero on the test set; RER is undefined")
    return float(np.mean(_functional(x, beta_hat - beta_true) ** 2) / den)


def _rate(num: set, den: set) -> float:
    return len(num & den) / len(den) if den else 0.0


def _check_sets(*sets, p: Optional[int] = None):
    out = [set(int(j) for j in s) for s in sets]
    if p is not None:
        for s in out:
            if any(j < 0 or j >= p for j in s):
                raise ValueError(f"set {sorted(s)} is not contained in the {p} predictors")
    return out


def selection_metrics(S_hat: Iterable[int], S_true: Iterable[int], p: int) -> tuple[float, float]:
    """``(FPR, FNR)``; an empty denominator gives a rate of zero."""
    s_hat, s_true = _check_sets(S_hat, S_true, p=p)
    null = set(range(p)) - s_true
    return _rate(s_hat, null), _rate(set(range(p)) - s_hat, s_true)


def form_metrics(S0_hat, S1_hat, S0_true, S1_true) -> tuple[float, float]:
    """``(r01, r10)``: simple signals labelled complex, complex labelled simple."""
    s0h, s1h, s0, s1 = _check_sets(S0_hat, S1_hat, S0_true, S1_true)
    if s0h & s1h:
        raise ValueError("estimated simple and complex sets overlap")
    return _rate(s1h, s0), _rate(s0h, s1)


def prediction_metrics(y_true, y_pred, y_null_baseline) -> tuple[float, float, float]:
    """``(rmse, relative_rmse, pearson)``; the relative RMSE is taken against
    the constant prediction ``y_null_baseline`` (e.g. the training mean)."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    if y_true.shape != y_pred.shape or y_true.size < 2:
        raise ValueError("need two equal-length vectors with at least two entries")
    null = np.broadcast_to(np.asarray(y_null_baseline, dtype=float), y_true.shape)
    rmse = float(np.sqrt(np.mean((y_true - y_pred) ** 2)))
    rmse_null = float(np.sqrt(np.mean((y_true - null) ** 2)))
    if rmse_null == 0:
        raise ValueError("null predictor is exact; relative RMSE is undefined")
    if np.std(y_true) == 0 or np.std(y_pred) == 0:
        raise ValueError("Pearson correlation undefined for a constant vector")
    pearson = float(np.corrcoef(y_true, y_pred)[0, 1])
    return rmse, rmse / rmse_null, pearson


@dataclass
class EvaluationReport:
    scenario: str
    n: int
    sigma: float
    method: str
    replicate: int
    rer: float
    fpr: float
    fnr: float
    r01: float = float("nan")
    r10: float = float("nan")
    rmse: float = float("nan")
    pearson: float = float("nan")
    kkt: float = float("nan")
    slack: float = float("nan")

    def __post_init__(self):
        for name in ("fpr", "fnr", "r01", "r10"):
            v = getattr(self, name)
            if not (np.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} = {v} is not a rate")
        if not (np.isnan(self.rer) or self.rer >= 0):
            raise ValueError("rer must be non-negative")

    def row(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in RESULT_COLUMNS}


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else format(v, ".17g")
    return v


def append_results(path, reports: Sequence[EvaluationReport]) -> None:
    """Append report rows to a results CSV, writing the header for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in reports:
            row = r.row()
            w.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["n"] = int(r["n"])
        r["replicate"] = int(r["replicate"])
        r["sigma"] = float(r["sigma"])
        for c in SUMMARY_METRICS + ("kkt", "slack"):
            v = r.get(c)
            r[c] = float(v) if v not in ("", None) else float("nan")
    return rows


def summarize(rows: Sequence[dict], n_failed: Optional[dict] = None) -> list[dict]:
    """Mean and 5%/95% quantiles per (scenario, n, sigma, method) cell.

    ``n_failed`` maps a cell key to the number of replicates that failed and
    were left out of the statistics.
    """
    n_failed = n_failed or {}
    cells: dict = {}
    for r in rows:
        key = (r["scenario"], int(r["n"]), float(r["sigma"]), r["method"])
        cells.setdefault(key, []).append(r)
    out = []
    for key in sorted(cells) + sorted(set(n_failed) - set(cells)):
        members = cells.get(key, [])
        rec = {"scenario": key[0], "n": key[1], "sigma": key[2], "method": key[3],
               "count": len(members), "n_failed": int(n_failed.get(key, 0))}
        for c in SUMMARY_METRICS:
            vals = np.array([m[c] for m in members], dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                rec[f"{c}_mean"] = float(vals.mean())
                rec[f"{c}_q05"] = float(np.quantile(vals, 0.05))
                rec[f"{c}_q95"] = float(np.quantile(vals, 0.95))
            else:
                rec[f"{c}_mean"] = rec[f"{c}_q05"] = rec[f"{c}_q95"] = float("nan")
        out.append(rec)
    return out


def summary_columns() -> list[str]:
    cols = ["scenario", "n", "sigma", "method", "count", "n_failed"]
    for c in SUMMARY_METRICS:
        cols += [f"{c}_mean", f"{c}_q05", f"{c}_q95"]
    return cols


def write_summary(path, summary: Sequence[dict]) -> None:
    cols = summary_columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for rec in summary:
            w.writerow([_fmt(rec[c]) for c in cols])
