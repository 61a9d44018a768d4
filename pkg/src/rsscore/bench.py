"""Timing and storage comparison: forward score recursion vs filter + smoother.

The forward recursion keeps a state whose size depends on ``K``, ``p`` and
``d`` only; the baseline stores filtered, predicted, smoothed and pairwise
probabilities for every period.  Both are reported by byte count of the
arrays each method keeps, and optionally by ``tracemalloc`` peaks.
"""

from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, fields

import numpy as np

from .baseline import baseline_loglik_score
from .errors import ConfigurationError
from .estimation import relative_error
from .model import make_gaussian_switching_model
from .recursion import loglik_score_hessian

SCORE_TOL = 1e-9


@dataclass(frozen=True)
class BenchCase:
    n: int
    K: int = 2
    ar_lags: int = 0
    switching_variance: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.K < 1 or self.ar_lags < 0:
            raise ConfigurationError(f"invalid bench case {self}")


@dataclass
class BenchRecord:
    n: int
    K: int
    p: int
    d: int
    forward_seconds: float
    baseline_seconds: float
    forward_state_bytes: int
    baseline_bytes: int
    forward_peak_bytes: int  # -1 when memory tracing is off
    baseline_peak_bytes: int
    score_rel_diff: float
    loglik_rel_diff: float
    equivalent: bool


def bench_model(case: BenchCase):
    """Model, parameter and data for one case; regimes are well separated."""
    model = make_gaussian_switching_model(case.K, case.switching_variance, case.ar_lags)
    K = case.K
    mu = np.linspace(-1.5, 1.5, K) if K > 1 else np.zeros(1)
    var = np.linspace(0.6, 1.2, K) if case.switching_variance else np.ones(1)
    P = np.full((K, K), 0.1 / max(K - 1, 1)) + np.eye(K) * (0.9 - 0.1 / max(K - 1, 1))
    if K == 1:
        P = np.ones((1, 1))
    phi = np.full(case.ar_lags, 0.3 / max(case.ar_lags, 1))
    theta = model.pack(mu, var, P, phi)
    data, _ = model.simulate(theta, case.n, seed=case.seed)
    return model, theta, data


def median_time(fn, repeats=5, warmup=1):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def _peak(fn):
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def bench_case(case: BenchCase, repeats=5, warmup=1, trace_memory=False, algorithm="hybrid") -> BenchRecord:
    model, theta, data = bench_model(case)

    def forward():
        return loglik_score_hessian(model, theta, data, order=1, algorithm=algorithm)

    def baseline():
        return baseline_loglik_score(model, theta, data)

    fwd = forward()
    ll, score, filt, sm = baseline()
    t_fwd = median_time(forward, repeats, warmup)
    t_base = median_time(baseline, repeats, warmup)
    peak_fwd = _peak(forward) if trace_memory else -1
    peak_base = _peak(baseline) if trace_memory else -1
    s_diff = float(relative_error(fwd.score, score).max())
    l_diff = float(relative_error(fwd.loglik, ll))
    return BenchRecord(
        n=case.n,
        K=case.K,
        p=model.p,
        d=model.d,
        forward_seconds=t_fwd,
        baseline_seconds=t_base,
        forward_state_bytes=fwd.state_nbytes,
        baseline_bytes=filt.nbytes + sm.nbytes,
        forward_peak_bytes=peak_fwd,
        baseline_peak_bytes=peak_base,
        score_rel_diff=s_diff,
        loglik_rel_diff=l_diff,
        equivalent=s_diff <= SCORE_TOL,
    )


def run_sweep(cases, repeats=5, warmup=1, trace_memory=False, algorithm="hybrid", log=None):
    records = []
    for case in cases:
        rec = bench_case(case, repeats, warmup, trace_memory, algorithm)
        if log is not None:
            log(rec)
        records.append(rec)
    return records


def write_csv(records, path) -> None:
    names = [f.name for f in fields(BenchRecord)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names)
        writer.writeheader()
        for rec in records:
            writer.writerow(asdict(rec))
