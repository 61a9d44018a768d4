"""Command-line entry point: simulate, eval, fit, check and bench.

Every command reads a TOML run configuration, echoes the fully resolved
configuration into its JSON report and exits with

* 0 on success,
* 2 on invalid configuration or input data,
* 3 on numerical failure (underflow, stalled fit, degenerate regime, ...),
* 4 when a check or the bench equivalence assertion fails.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict
from importlib import resources

import numpy as np

from . import __version__
from .baseline import baseline_loglik_score
from .bench import BenchCase, run_sweep, write_csv as write_bench_csv
from .config import (
    RunConfig,
    build_model,
    initial_spec,
    load_config,
    read_csv,
    task_theta,
    write_csv,
)
from .em import em_fit
from .errors import (
    ConfigurationError,
    InternalConsistencyError,
    NonInvertibleInformationError,
    NumericalError,
    SizeGuardError,
    StalledFitError,
)
from .estimation import (
    canonicalize_fit,
    FitResult,
    gradient_check,
    newton_fit,
    relative_error,
    standard_errors,
)
from .model import default_initial_distribution
from .oracle import enumerate_paths
from .recursion import HybridConfig, loglik_score_hessian

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CHECK = 0, 2, 3, 4

DEFAULT_TOLERANCES = {
    "oracle": 1e-10,
    "fd_score": 1e-5,
    "fd_hessian": 1e-4,
    "algorithms": 1e-10,
    "baseline_loglik": 1e-12,
    "baseline_score": 1e-9,
}

DEFAULT_BENCH_SIZES = [
    {"n": n, "K": K} for K in (2, 3) for n in (1_000, 10_000, 100_000)
]


class CheckFailed(Exception):
    def __init__(self, report):
        self.report = report
        super().__init__("check failed")


# -- JSON helpers -------------------------------------------------------------


def clean(obj):
    """Convert numpy types to JSON values; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def matrix(a):
    """Row-major matrix with explicit dimensions."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    return {"rows": a.shape[0], "cols": a.shape[1], "data": a.ravel().tolist()}


def load_schema(command: str) -> dict:
    text = resources.files("rsscore").joinpath("schemas", f"{command}.schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict, command: str) -> None:
    import jsonschema

    try:
        jsonschema.validate(report, load_schema(command))
    except jsonschema.ValidationError as exc:
        raise InternalConsistencyError(f"{command} report violates its schema: {exc.message}") from None


def emit(report: dict, cfg: RunConfig, command: str, stream=None) -> dict:
    report = clean(report)
    validate_report(report, command)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    path = cfg.path(cfg.output.path)
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        (stream or sys.stdout).write(text)
    return report


def header(command: str, cfg: RunConfig, model=None) -> dict:
    out = {"command": command, "version": __version__, "config": cfg.to_dict()}
    if model is not None:
        out["d"] = model.d
        out["param_names"] = list(model.param_names)
    return out


# -- shared setup -------------------------------------------------------------


def load_data(cfg: RunConfig, model, theta):
    """Data from ``data.csv`` or, failing that, simulated from ``task.theta``."""
    if cfg.data.csv is not None:
        return read_csv(cfg.path(cfg.data.csv), cfg.data.presample, model.p), "csv"
    if cfg.task.n is None:
        raise ConfigurationError("no data: set data.csv or task.n (with task.theta) to simulate")
    if theta is None:
        raise ConfigurationError("simulating data needs task.theta")
    data, _ = model.simulate(theta, cfg.task.n, cfg.task.seed, y0=cfg.data.presample)
    return data, "simulated"


def hybrid_cfg(cfg: RunConfig) -> HybridConfig:
    return HybridConfig(B=float(cfg.algorithm.B))


def require_theta(cfg, model, which="theta"):
    theta = task_theta(cfg, model, which)
    if theta is None:
        raise ConfigurationError(f"task.{which} or task.{which}_file is required")
    return theta


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> dict:
    model = build_model(cfg.model)
    theta = require_theta(cfg, model)
    if cfg.task.n is None:
        raise ConfigurationError("task.n is required for simulate")
    if cfg.output.csv is None:
        raise ConfigurationError("output.csv is required for simulate")
    nu = cfg.model.nu if cfg.model.initial == "user" else None
    if cfg.model.initial == "ergodic":
        nu = default_initial_distribution(model, theta, "ergodic").nu
    data, path = model.simulate(
        theta, cfg.task.n, cfg.task.seed, nu=nu, y0=cfg.data.presample, full_path=True
    )
    csv_path = cfg.path(cfg.output.csv)
    write_csv(csv_path, data)
    p = model.p
    report = header("simulate", cfg, model)
    report.update(
        {
            "theta": theta,
            "seed": cfg.task.seed,
            "n": data.n,
            "presample": data.y0,
            "initial_regimes": path[:p][::-1],  # S_0, S_{-1}, ... as labels 1..K
            "path": path[p:],
            "csv": csv_path,
        }
    )
    sidecar = cfg.path(cfg.output.sidecar) or os.path.splitext(csv_path)[0] + ".json"
    report = clean(report)
    validate_report(report, "simulate")
    with open(sidecar, "w") as fh:
        fh.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if cfg.output.path:
        emit(report, cfg, "simulate")
    return report


def cmd_eval(cfg: RunConfig) -> dict:
    model = build_model(cfg.model)
    theta = require_theta(cfg, model)
    data, source = load_data(cfg, model, theta)
    order, algorithm = cfg.algorithm.order, cfg.algorithm.name
    start = time.perf_counter()
    res = loglik_score_hessian(
        model,
        theta,
        data,
        initial_spec(cfg.model),
        order,
        algorithm,
        hybrid_cfg(cfg),
        cfg.algorithm.chunk,
    )
    elapsed = time.perf_counter() - start
    report = header("eval", cfg, model)
    report.update(
        {
            "n": data.n,
            "data_source": source,
            "theta": theta,
            "order": order,
            "algorithm": algorithm,
            "loglik": res.loglik,
            "switched_at": res.switched_at,
            "state_bytes": res.state_nbytes,
            "timings": {"seconds": elapsed},
        }
    )
    if order >= 1:
        report["score"] = res.score
    if order >= 2:
        report["hessian"] = matrix(res.hessian)
    return report


def _fit_one(cfg, model, theta0, data):
    t = cfg.task
    nu = initial_spec(cfg.model)
    if t.method == "newton":
        fit = newton_fit(
            model, theta0, data, nu, t.grad_tol, t.max_iter, cfg.algorithm.name, hybrid_cfg(cfg)
        )
        return fit, None
    em = em_fit(model, theta0, data, nu, tol=t.tol, max_iter=t.max_iter, nu_mode=t.nu_mode)
    res = loglik_score_hessian(model, em.theta, data, nu, 2, cfg.algorithm.name, hybrid_cfg(cfg))
    fit = FitResult(
        theta_hat=em.theta,
        loglik=res.loglik,
        score_norm=float(np.max(np.abs(res.score))),
        standard_errors=None,
        vcov=None,
        converged=em.converged,
        iterations=em.iterations,
        path=[(ll, 1.0) for ll in em.trace],
        score=res.score,
        hessian=res.hessian,
    )
    try:
        fit.standard_errors, fit.vcov = standard_errors(res.hessian)
    except NonInvertibleInformationError as exc:
        fit.diagnostics["standard_errors"] = str(exc)
    return fit, em.trace


def cmd_fit(cfg: RunConfig) -> dict:
    model = build_model(cfg.model)
    truth = task_theta(cfg, model, "theta")
    data, source = load_data(cfg, model, truth)
    starts = []
    theta0 = task_theta(cfg, model, "theta0")
    if theta0 is not None:
        starts.append(theta0)
    rng = np.random.default_rng(cfg.task.seed)
    starts += [model.random_theta(rng) for _ in range(cfg.task.multistart)]
    if not starts:
        raise ConfigurationError("fit needs task.theta0, task.theta0_file or task.multistart > 0")

    start = time.perf_counter()
    runs, best, best_trace, failures = [], None, None, []
    for i, th0 in enumerate(starts):
        try:
            fit, trace = _fit_one(cfg, model, th0, data)
        except NumericalError as exc:
            failures.append({"start": i, "error": type(exc).__name__, "message": str(exc)})
            if len(starts) == 1:
                raise
            continue
        runs.append({"start": i, "loglik": fit.loglik, "converged": fit.converged, "iterations": fit.iterations})
        if best is None or fit.loglik > best.loglik:
            best, best_trace = fit, trace
    if best is None:
        raise StalledFitError("every start failed", iteration=0)
    if hasattr(model, "permute_regimes"):
        best = canonicalize_fit(model, best, data, initial_spec(cfg.model), cfg.algorithm.name)
    elapsed = time.perf_counter() - start

    report = header("fit", cfg, model)
    report.update(
        {
            "n": data.n,
            "data_source": source,
            "method": cfg.task.method,
            "theta_hat": best.theta_hat,
            "loglik": best.loglik,
            "score_norm": best.score_norm,
            "standard_errors": best.standard_errors,
            "vcov": None if best.vcov is None else matrix(best.vcov),
            "converged": best.converged,
            "iterations": best.iterations,
            "path": [list(p) for p in best.path],
            "starts": runs,
            "failed_starts": failures,
            "diagnostics": {k: v for k, v in best.diagnostics.items() if k != "ridge"},
            "timings": {"seconds": elapsed},
        }
    )
    if hasattr(model, "natural"):
        report["natural"] = {k: v for k, v in model.natural(best.theta_hat).items()}
        if "P" in report["natural"]:
            report["natural"]["P"] = matrix(report["natural"]["P"])
    if best_trace is not None:
        report["em_trace"] = best_trace
    return report


def cmd_check(cfg: RunConfig) -> dict:
    model = build_model(cfg.model)
    theta = require_theta(cfg, model)
    data, source = load_data(cfg, model, theta)
    tol = dict(DEFAULT_TOLERANCES)
    unknown = sorted(set(cfg.task.tolerances) - set(tol))
    if unknown:
        raise ConfigurationError(f"unknown tolerance(s): {', '.join(unknown)}")
    tol.update({k: float(v) for k, v in cfg.task.tolerances.items()})
    nu = initial_spec(cfg.model)
    hcfg = hybrid_cfg(cfg)
    names = list(model.param_names)
    failures = []

    def record(check, value, limit, coords=()):
        if not value <= limit:
            failures.append({"check": check, "value": value, "tolerance": limit, "coordinates": list(coords)})

    def above(err, limit):
        err = np.asarray(err, dtype=float)
        if err.ndim == 2:
            err = err.max(axis=1)
        return [names[i] for i in np.flatnonzero(err > limit)]

    fwd = loglik_score_hessian(model, theta, data, nu, 2, cfg.algorithm.name, hcfg)
    oracle = enumerate_paths(model, theta, data, nu, order=2)
    o_err = {
        "loglik": float(relative_error(fwd.loglik, oracle.loglik)),
        "score": float(relative_error(fwd.score, oracle.score).max()),
        "hessian": float(relative_error(fwd.hessian, oracle.hessian).max()),
    }
    record("oracle.loglik", o_err["loglik"], tol["oracle"])
    record("oracle.score", o_err["score"], tol["oracle"], above(relative_error(fwd.score, oracle.score), tol["oracle"]))
    record(
        "oracle.hessian",
        o_err["hessian"],
        tol["oracle"],
        above(relative_error(fwd.hessian, oracle.hessian), tol["oracle"]),
    )

    gc = gradient_check(model, theta, data, nu, cfg.task.step, tol["fd_score"], tol["fd_hessian"], cfg.algorithm.name)
    record("fd.score", gc.max_score_err, tol["fd_score"], above(gc.score_rel_err, tol["fd_score"]))
    record("fd.hessian", gc.max_hessian_err, tol["fd_hessian"], above(gc.hessian_rel_err, tol["fd_hessian"]))

    results = {}
    for alg in ("unscaled", "scaled", "hybrid"):
        r = loglik_score_hessian(model, theta, data, nu, 2, alg, hcfg, raise_on_underflow=False)
        results[alg] = None if r.underflow else r
    alg_err = {}
    for a, b in (("unscaled", "scaled"), ("unscaled", "hybrid"), ("scaled", "hybrid")):
        ra, rb = results[a], results[b]
        if ra is None or rb is None:
            alg_err[f"{a}_vs_{b}"] = None
            continue
        e = max(
            float(relative_error(ra.loglik, rb.loglik)),
            float(relative_error(ra.score, rb.score).max()),
            float(relative_error(ra.hessian, rb.hessian).max()),
        )
        alg_err[f"{a}_vs_{b}"] = e
        record(f"algorithms.{a}_vs_{b}", e, tol["algorithms"])

    b_ll, b_score, _, _ = baseline_loglik_score(model, theta, data, nu)
    b_err = {
        "loglik": float(relative_error(fwd.loglik, b_ll)),
        "score": float(relative_error(fwd.score, b_score).max()),
    }
    record("baseline.loglik", b_err["loglik"], tol["baseline_loglik"])
    record(
        "baseline.score",
        b_err["score"],
        tol["baseline_score"],
        above(relative_error(fwd.score, b_score), tol["baseline_score"]),
    )

    report = header("check", cfg, model)
    report.update(
        {
            "n": data.n,
            "data_source": source,
            "theta": theta,
            "n_paths": oracle.n_paths,
            "tolerances": tol,
            "oracle": o_err,
            "finite_difference": {
                "step": gc.step,
                "score": gc.max_score_err,
                "hessian": gc.max_hessian_err,
                "flagged": gc.flagged,
            },
            "algorithms": {
                "underflow": [a for a, r in results.items() if r is None],
                "max_rel_diff": alg_err,
                "switched_at": None if results["hybrid"] is None else results["hybrid"].switched_at,
            },
            "baseline": b_err,
            "failures": failures,
            "passed": not failures,
        }
    )
    if failures:
        raise CheckFailed(report)
    return report


def cmd_bench(cfg: RunConfig) -> dict:
    sizes = cfg.task.sizes or DEFAULT_BENCH_SIZES
    cases = []
    for entry in sizes:
        if not isinstance(entry, dict):
            raise ConfigurationError("task.sizes entries must be tables like {n = 1000, K = 2}")
        try:
            cases.append(BenchCase(**entry))
        except TypeError as exc:
            raise ConfigurationError(f"task.sizes entry {entry}: {exc}") from None
    records = run_sweep(
        cases,
        cfg.task.repeats,
        cfg.task.warmup,
        cfg.task.trace_memory,
        cfg.algorithm.name,
        log=lambda r: print(
            f"n={r.n} K={r.K} d={r.d} forward {r.forward_seconds:.4f}s baseline {r.baseline_seconds:.4f}s",
            file=sys.stderr,
        ),
    )
    if cfg.output.csv:
        write_bench_csv(records, cfg.path(cfg.output.csv))
    report = header("bench", cfg)
    report.update(
        {
            "records": [asdict(r) for r in records],
            "equivalent": all(r.equivalent for r in records),
            "csv": cfg.path(cfg.output.csv),
        }
    )
    if not report["equivalent"]:
        raise CheckFailed(report)
    return report


COMMANDS = {
    "simulate": cmd_simulate,
    "eval": cmd_eval,
    "fit": cmd_fit,
    "check": cmd_check,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", required=True, help="TOML run configuration")
        p.add_argument("--output", "-o", help="report path (overrides output.path)")
        if name == "eval":
            p.add_argument("--order", type=int, choices=(0, 1, 2))
            p.add_argument("--algorithm", choices=("unscaled", "scaled", "hybrid"))
    return parser


def _error_report(command, cfg, exc, code):
    diag = {}
    for attr in ("t", "regime", "iteration", "min_eigenvalue", "n_paths", "limit"):
        if getattr(exc, attr, None) is not None:
            diag[attr] = getattr(exc, attr)
    theta = getattr(exc, "theta", None)
    if theta is not None:
        diag["theta"] = theta
    return {
        "command": command,
        "version": __version__,
        "config": None if cfg is None else cfg.to_dict(),
        "error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code, "diagnostics": diag},
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        cfg = load_config(args.config)
        if args.output:
            cfg.output.path = os.path.abspath(args.output)
        # command-line overrides go into the config so the echoed copy is complete
        if getattr(args, "order", None) is not None:
            cfg.algorithm.order = args.order
        if getattr(args, "algorithm", None) is not None:
            cfg.algorithm.name = args.algorithm
        report = COMMANDS[args.command](cfg)
        if args.command != "simulate":
            emit(report, cfg, args.command)
        else:
            print(f"wrote {report['csv']}", file=sys.stderr)
        return EXIT_OK
    except CheckFailed as exc:
        emit(exc.report, cfg, args.command)
        for f in exc.report.get("failures", []):
            coords = f" [{', '.join(f['coordinates'])}]" if f.get("coordinates") else ""
            print(f"FAIL {f['check']}: {f['value']:.3e} > {f['tolerance']:.1e}{coords}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigurationError, SizeGuardError, OSError) as exc:
        err, code = exc, EXIT_VALIDATION
    except (NumericalError, FloatingPointError) as exc:
        err, code = exc, EXIT_NUMERICAL
    print(f"error: {err}", file=sys.stderr)
    out = cfg.path(cfg.output.path) if cfg is not None else args.output
    if out:
        report = clean(_error_report(args.command, cfg, err, code))
        validate_report(report, "error")
        with open(out, "w") as fh:
            fh.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
