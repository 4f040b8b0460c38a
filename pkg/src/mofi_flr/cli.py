"""Command-line interface: simulate, fit, cv, bench, evaluate.

Every command reads a TOML file with one section per command plus an
optional ``[global]`` section (``seed``, ``out``, ``threads``).  Unknown keys
are rejected before any work starts.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 input/output failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .kernels import KernelError, KernelSpec, KernelSplit
from .metrics import (
    EvaluationReport,
    append_results,
    form_metrics,
    prediction_metrics,
    read_results,
    rer,
    selection_metrics,
    summarize,
    write_summary,
)
from .operators import DesignError
from .pipeline import KernelBank, fenet_refine, run_mofi, run_mofi_strategies, run_step1, run_step2
from .simgen import SimConfig, SimulationTruth, simulate
from .solver import SolverConfig, SolverError, write_trace
from .tuning import TuningError, TuningGrid, tune_step_one, write_surface

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("mofi_flr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
METHODS = ("fenet", "fenet-refine", "mofi-fix", "mofi-optim")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# ---------------------------------------------------------------------------
# configuration


_GLOBAL_KEYS = {"seed", "out", "threads"}
_KERNEL_KEYS = {"kind", "scenario", "scale", "anchors"}
_FIT_KEYS = {"data", "strategy", "kernel"} | {f.name for f in fields(SolverConfig)}
_BENCH_KEYS = {"replicates", "n", "sigma", "scenarios", "methods", "first_replicate"}
_EVAL_KEYS = {"result", "truth", "test"}


def _check_keys(section: dict, allowed: set, name: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        try:
            cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    allowed = {"global", "simulate", "fit", "cv", "bench", "evaluate"}
    _check_keys(cfg, allowed, "top level")
    for name, section in cfg.items():
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
    _check_keys(cfg.get("global", {}), _GLOBAL_KEYS, "global")
    _check_keys(cfg.get("simulate", {}), {f.name for f in fields(SimConfig)}, "simulate")
    _check_keys(cfg.get("cv", {}), {f.name for f in fields(TuningGrid)}, "cv")
    fit = cfg.get("fit", {})
    _check_keys(fit, _FIT_KEYS, "fit")
    if "kernel" in fit:
        if not isinstance(fit["kernel"], dict):
            raise ConfigError("[fit.kernel] must be a table")
        _check_keys(fit["kernel"], _KERNEL_KEYS, "fit.kernel")
    _check_keys(cfg.get("bench", {}), _BENCH_KEYS, "bench")
    _check_keys(cfg.get("evaluate", {}), _EVAL_KEYS, "evaluate")
    return cfg


def _build(cls, section: dict, name: str, **overrides):
    try:
        return cls(**{**section, **overrides})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def sim_config(cfg: dict, seed: Optional[int]) -> SimConfig:
    extra = {} if seed is None else {"seed": seed}
    return _build(SimConfig, cfg.get("simulate", {}), "simulate", **extra)


def tuning_grid(cfg: dict, seed: Optional[int]) -> TuningGrid:
    extra = {} if seed is None else {"seed": seed}
    return _build(TuningGrid, cfg.get("cv", {}), "cv", **extra)


def kernel_spec(section: Optional[dict], scenario: str = "I") -> KernelSpec:
    section = dict(section or {"kind": "sobolev", "scenario": scenario})
    if "anchors" in section:
        section["anchors"] = tuple(section["anchors"])
    try:
        return KernelSpec(**section)
    except (TypeError, KernelError) as exc:
        raise ConfigError(f"[fit.kernel]: {exc}") from exc


def _resolve(args, cfg: dict):
    glob = cfg.get("global", {})
    seed = args.seed if args.seed is not None else glob.get("seed")
    out = args.out or glob.get("out")
    threads = args.threads if args.threads is not None else glob.get("threads", 1)
    if out is None:
        raise ConfigError("an output directory is required (--out or [global] out)")
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads must be a positive integer")
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise ConfigError("seed must be a non-negative integer")
    return seed, Path(out), threads


# ---------------------------------------------------------------------------
# bundles


def _write_matrix(path: Path, m: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(m), delimiter=",", fmt="%.17g")


def _read_matrix(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_dataset(directory: Path, x: np.ndarray, y: np.ndarray) -> None:
    """``X_<j>.csv`` (n x N, 1-based j, no header) and ``y.csv``."""
    directory.mkdir(parents=True, exist_ok=True)
    for j in range(x.shape[0]):
        _write_matrix(directory / f"X_{j + 1}.csv", x[j])
    np.savetxt(directory / "y.csv", y, fmt="%.17g")


def read_dataset(directory: Path):
    directory = Path(directory)
    files = sorted(directory.glob("X_*.csv"), key=lambda f: int(f.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no predictor files X_<j>.csv in {directory}")
    idx = [int(f.stem.split("_")[1]) for f in files]
    if idx != list(range(1, len(files) + 1)):
        raise ConfigError(f"predictor files in {directory} are not numbered 1..{len(files)}")
    x = np.stack([_read_matrix(f) for f in files])
    y = np.loadtxt(directory / "y.csv", ndmin=1)
    if x.shape[1] != y.shape[0]:
        raise ConfigError(f"predictors have {x.shape[1]} rows but y has {y.shape[0]} entries")
    return x, y


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curves(path: Path, beta: np.ndarray, beta0: Optional[np.ndarray] = None,
                 beta1: Optional[np.ndarray] = None) -> None:
    """Long-format curves: predictor id (1-based), grid index (1-based), values."""
    p, n_points = beta.shape
    beta0 = np.zeros_like(beta) if beta0 is None else beta0
    beta1 = beta if beta1 is None else beta1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["predictor", "grid_index", "beta", "beta0", "beta1"])
        for j in range(p):
            for t in range(n_points):
                w.writerow([j + 1, t + 1, format(beta[j, t], ".17g"), format(beta0[j, t], ".17g"),
                            format(beta1[j, t], ".17g")])


def read_curves(path: Path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    p, n_points = int(rows[:, 0].max()), int(rows[:, 1].max())
    out = np.zeros((3, p, n_points))
    out[:, rows[:, 0].astype(int) - 1, rows[:, 1].astype(int) - 1] = rows[:, 2:5].T
    return out


def _one_based(s) -> list[int]:
    return [int(j) + 1 for j in s]


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, seed, out: Path, threads: int) -> dict:
    sc = sim_config(cfg, seed)
    data = simulate(sc, 0)
    write_dataset(out, data.x, data.y)
    manifest = {"config": sc.as_dict(), "replicate": 0, **data.truth.manifest()}
    write_json(out / "truth.json", manifest)
    if data.x_test is not None:
        write_dataset(out / "test", data.x_test, data.y_test)
    return {"predictors": sc.p, "n": sc.n, "N": sc.N, "test": sc.n_test}


def _fit_kernels(cfg: dict, p: int, n_points: int) -> tuple[KernelSpec, KernelBank]:
    spec = kernel_spec(cfg.get("fit", {}).get("kernel"))
    try:
        split = KernelSplit.from_spec(spec, n_points)
    except KernelError as exc:
        raise ConfigError(f"[fit.kernel]: {exc}") from exc
    return spec, KernelBank(split, p)


def _fit_data(cfg: dict):
    fit = cfg.get("fit", {})
    if "data" not in fit:
        raise ConfigError("[fit] data = <dataset directory> is required")
    return read_dataset(Path(fit["data"]))


def cmd_fit(cfg: dict, seed, out: Path, threads: int, verbose: bool = False) -> dict:
    fit = cfg.get("fit", {})
    strategy = fit.get("strategy", "optim")
    if strategy not in ("fix", "optim"):
        raise ConfigError("[fit] strategy must be 'fix' or 'optim'")
    solver_keys = {f.name for f in fields(SolverConfig)} & set(fit)
    grid = tuning_grid(cfg, seed)
    x, y = _fit_data(cfg)
    _, bank = _fit_kernels(cfg, x.shape[0], x.shape[2])
    out.mkdir(parents=True, exist_ok=True)
    if solver_keys:
        # fixed penalties: Step-Two reuses the Step-One configuration
        solver = _build(SolverConfig, {k: fit[k] for k in solver_keys}, "fit")
        s1 = run_step1(x, bank, y, solver)
        tuning = {"stage_one": {"strategy": "fixed", "lambda1": solver.lambda1, "lambda2": solver.lambda2,
                                "theta": solver.theta, "kappa": solver.kappa}}
        s2 = run_step2(x, bank, y, s1.selected, solver, m=s1.m)
    else:
        res = run_mofi(x, y, bank, strategy=strategy, grid=grid, null_warning=False)
        s1, s2 = res.stage_one, res.stage_two
        tuning = {k: v.as_dict() for k, v in res.tuning.items()}
    null_model = not s1.selected
    if null_model:
        log.warning("no predictor selected; the fitted model is the response mean")
    beta = s2.beta_hat if s1.selected else s1.beta_hat
    write_curves(out / "curves.csv", beta, s2.beta0_hat, s2.beta1_hat)
    if verbose and s1.coefficients is not None:
        write_trace(s1.coefficients, out / "trace_stage_one.csv")
        if s2.coefficients is not None:
            write_trace(s2.coefficients, out / "trace_stage_two.csv")
    result = {
        "selected": _one_based(s1.selected),
        "simple": _one_based(s2.simple_set),
        "complex": _one_based(s2.complex_set),
        "null_model": null_model,
        "strategy": strategy,
        "tuning": tuning,
        "diagnostics": {
            "kkt_stage_one": s1.kkt.max if s1.kkt else None,
            "kkt_stage_two": s2.kkt.max if s2.kkt else None,
            "sweeps_stage_one": s1.coefficients.n_sweeps if s1.coefficients else 0,
            "sweeps_stage_two": s2.coefficients.n_sweeps if s2.coefficients else 0,
        },
        "x_mean": s1.x_mean.tolist(),
        "y_mean": s1.y_mean,
    }
    write_json(out / "result.json", result)
    return {"selected": result["selected"], "simple": result["simple"], "complex": result["complex"]}


def cmd_cv(cfg: dict, seed, out: Path, threads: int) -> dict:
    grid = tuning_grid(cfg, seed)
    x, y = _fit_data(cfg)
    _, bank = _fit_kernels(cfg, x.shape[0], x.shape[2])
    rec = tune_step_one(x, y, bank, grid)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "tuning.json", {"grid": grid.as_dict(), "record": rec.as_dict()})
    write_surface(rec, out / "cv_surface.csv")
    return rec.as_dict()


def cmd_evaluate(cfg: dict, seed, out: Path, threads: int) -> dict:
    ev = cfg.get("evaluate", {})
    for key in ("result", "truth", "test"):
        if key not in ev:
            raise ConfigError(f"[evaluate] {key} = <path> is required")
    result_dir = Path(ev["result"])
    with open(result_dir / "result.json") as fh:
        result = json.load(fh)
    with open(ev["truth"]) as fh:
        manifest = json.load(fh)
    truth = SimulationTruth.from_manifest(manifest)
    beta, _, _ = read_curves(result_dir / "curves.csv")
    x_test, y_test = read_dataset(Path(ev["test"]))
    p, n_points = beta.shape
    if x_test.shape[0] != p or x_test.shape[2] != n_points:
        raise ConfigError("result curves and test predictors disagree in shape")
    sel = [j - 1 for j in result["selected"]]
    s0 = [j - 1 for j in result["simple"]]
    s1 = [j - 1 for j in result["complex"]]
    fpr, fnr = selection_metrics(sel, truth.S, p)
    r01, r10 = form_metrics(s0, s1, truth.S0, truth.S1)
    x_mean = np.asarray(result["x_mean"])
    pred = result["y_mean"] + np.einsum("jit,jt->i", x_test - x_mean[:, None, :], beta) / n_points
    rmse, rel, pearson = prediction_metrics(y_test, pred, result["y_mean"])
    report = {"rer": rer(beta, truth.beta_grid(n_points), x_test), "fpr": fpr, "fnr": fnr, "r01": r01,
              "r10": r10, "rmse": rmse, "relative_rmse": rel, "pearson": pearson}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "evaluation.json", report)
    return report


# ---------------------------------------------------------------------------
# benchmark


def run_replicate(sim: SimConfig, replicate: int, methods, grid: TuningGrid) -> list[EvaluationReport]:
    """Simulate one replicate and evaluate every requested method on it."""
    data = simulate(sim, replicate)
    bank = KernelBank(KernelSplit.from_spec(KernelSpec("sobolev", sim.scenario), sim.N), sim.p)
    beta_true = data.truth.beta_grid(sim.N)
    truth = data.truth
    wanted = set(methods)
    reports = []

    def report(method, beta, selected, s0=None, s1=None, fits=()):
        fpr, fnr = selection_metrics(selected, truth.S, sim.p)
        r01, r10 = form_metrics(s0, s1, truth.S0, truth.S1) if s0 is not None else (np.nan, np.nan)
        # optimality certificate over the penalised fits behind this estimate
        kkts = [f.kkt for f in fits if f.kkt is not None]
        kkt = max((k.max for k in kkts), default=np.nan)
        slack = max((k.inactive_slack for k in kkts), default=np.nan)
        reports.append(EvaluationReport(
            scenario=sim.scenario, n=sim.n, sigma=sim.sigma, method=method, replicate=replicate,
            rer=rer(beta, beta_true, data.x_test), fpr=fpr, fnr=fnr, r01=r01, r10=r10, kkt=kkt, slack=slack,
        ))

    strategies = tuple(s for s in ("fix", "optim") if f"mofi-{s}" in wanted) or ("fix",)
    results = run_mofi_strategies(data.x, data.y, bank, strategies, grid=grid, null_warning=False)
    for strategy, res in results.items():
        if f"mofi-{strategy}" in wanted:
            s2 = res.stage_two
            beta = res.beta_hat if res.stage_one.selected else res.stage_one.beta_hat
            report(f"mofi-{strategy}", beta, res.stage_one.selected, s2.simple_set, s2.complex_set,
                   fits=(res.stage_one, s2))
    base = next(iter(results.values()))
    if "fenet" in wanted:
        report("fenet", base.stage_one.beta_hat, base.stage_one.selected, fits=(base.stage_one,))
    if "fenet-refine" in wanted:
        refined = fenet_refine(base.stage_one, data.x, data.y, bank, grid)
        report("fenet-refine", refined.beta_hat, base.stage_one.selected)
    order = {m: i for i, m in enumerate(METHODS)}
    return sorted(reports, key=lambda r: order[r.method])


def _bench_task(args):
    sim, replicate, methods, grid = args
    try:
        return ("ok", sim, replicate, run_replicate(sim, replicate, methods, grid))
    except (SolverError, DesignError, TuningError, KernelError, np.linalg.LinAlgError) as exc:
        return ("failed", sim, replicate, f"{type(exc).__name__}: {exc}")


def bench_tasks(cfg: dict, seed) -> tuple[list, list]:
    bench = cfg.get("bench", {})
    reps = bench.get("replicates", 1)
    first = bench.get("first_replicate", 0)
    methods = bench.get("methods", list(METHODS))
    if not isinstance(reps, int) or reps < 1 or not isinstance(first, int) or first < 0:
        raise ConfigError("[bench] replicates must be a positive integer and first_replicate non-negative")
    if not methods:
        raise ConfigError("[bench] methods must not be empty")
    bad = set(methods) - set(METHODS)
    if bad:
        raise ConfigError(f"[bench] unknown method(s): {', '.join(sorted(bad))}; choose from {METHODS}")
    base = sim_config(cfg, seed)
    grid = tuning_grid(cfg, seed)
    tasks = []
    for scenario in bench.get("scenarios", [base.scenario]):
        for n in bench.get("n", [base.n]):
            for sigma in bench.get("sigma", [base.sigma]):
                try:
                    sim = replace(base, scenario=scenario, n=n, sigma=float(sigma))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[bench]: {exc}") from exc
                tasks += [(sim, r, tuple(methods), grid) for r in range(first, first + reps)]
    return tasks, list(methods)


def cmd_bench(cfg: dict, seed, out: Path, threads: int) -> dict:
    tasks, methods = bench_tasks(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    rep_dir = out / "replicates"
    rep_dir.mkdir(exist_ok=True)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_bench_task, tasks))
    else:
        outcomes = [_bench_task(t) for t in tasks]
    failures = []
    failed_cells: dict = {}
    for status, sim, replicate, payload in outcomes:
        tag = f"{sim.scenario}_n{sim.n}_s{sim.sigma:g}_r{replicate}"
        path = rep_dir / f"{tag}.csv"
        if path.exists():
            path.unlink()
        if status == "ok":
            append_results(path, payload)
        else:
            failures.append({"scenario": sim.scenario, "n": sim.n, "sigma": sim.sigma, "replicate": replicate,
                             "error": payload})
            for m in methods:
                key = (sim.scenario, sim.n, float(sim.sigma), m)
                failed_cells[key] = failed_cells.get(key, 0) + 1
    # merge per-replicate files in task order
    results_path = out / "results.csv"
    if results_path.exists():
        results_path.unlink()
    rows = []
    for status, sim, replicate, payload in outcomes:
        if status == "ok":
            append_results(results_path, payload)
    if results_path.exists():
        rows = read_results(results_path)
    summary = summarize(rows, failed_cells)
    write_summary(out / "summary.csv", summary)
    write_json(out / "failures.json", failures)
    return {"replicates": len(tasks), "failed": len(failures), "summary": summary}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mofi-flr", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["simulate", "fit", "cv", "bench", "evaluate"])
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--threads", type=int, help="worker processes for bench")
    parser.add_argument("--verbose", action="store_true", help="debug logging and iteration traces")
    return parser


def _error_record(out: Optional[Path], kind: str, exc: BaseException, code: int) -> int:
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "error.json", record)
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out) if args.out else None
    try:
        cfg = load_config(args.config)
        seed, out, threads = _resolve(args, cfg)
        if args.command == "simulate":
            info = cmd_simulate(cfg, seed, out, threads)
        elif args.command == "fit":
            info = cmd_fit(cfg, seed, out, threads, verbose=args.verbose)
        elif args.command == "cv":
            info = cmd_cv(cfg, seed, out, threads)
        elif args.command == "bench":
            info = cmd_bench(cfg, seed, out, threads)
            info = {k: v for k, v in info.items() if k != "summary"}
        else:
            info = cmd_evaluate(cfg, seed, out, threads)
    except (ConfigError, KernelError) as exc:
        return _error_record(out, "config", exc, EXIT_CONFIG)
    except (SolverError, DesignError, TuningError, np.linalg.LinAlgError) as exc:
        if args.verbose:
            traceback.print_exc()
        return _error_record(out, "numeric", exc, EXIT_NUMERIC)
    except OSError as exc:
        return _error_record(out, "io", exc, EXIT_IO)
    print(json.dumps(info, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
