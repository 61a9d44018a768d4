"""Forward-backward comparator: Hamilton filter, Kim smoother, smoothed score.

This is the conventional route to the score: store every filtered
probability, run a backward pass for smoothed probabilities of
``(S_t, S_{t-1}, ..., S_{t-p})``, then average the period log-likelihood
gradients under them.  It keeps ``O(n K^p)`` numbers alive on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ImpossibleLikelihoodError
from .model import iter_periods, resolve_nu


@dataclass
class FilterOutput:
    filtered: np.ndarray  # (n, K^p)   P(S_t-tuple | Y_1..Y_t)
    predicted: np.ndarray  # (n, K^p)  P(S_t-tuple | Y_1..Y_{t-1})
    period_lik: np.ndarray  # (n,)     c_t
    loglik: float
    nu: np.ndarray  # (K^p,)

    @property
    def nbytes(self) -> int:
        return self.filtered.nbytes + self.predicted.nbytes + self.period_lik.nbytes


@dataclass
class SmootherOutput:
    smoothed: np.ndarray  # (n, K^p)      P(S_t-tuple | Y_1..Y_n)
    pairwise: np.ndarray  # (n, K^(p+1))  P(S_t, S_{t-1}-tuple | Y_1..Y_n), t = 1..n
    initial: np.ndarray  # (K^p,)         P(S_0-tuple | Y_1..Y_n)
    zero_mass: int = 0  # 0/0 ratios resolved to 0

    @property
    def nbytes(self) -> int:
        return self.smoothed.nbytes + self.pairwise.nbytes + self.initial.nbytes


def hamilton_filter(model, theta, data, nu=None, chunk=256) -> FilterOutput:
    theta = model.check_theta(theta)
    nu = resolve_nu(model, theta, nu)
    K, Kp, n = model.K, model.n_tuples, data.n
    filtered = np.empty((n, Kp))
    predicted = np.empty((n, Kp))
    c = np.empty(n)
    xi = nu.nu
    for t0 in range(1, n + 1, chunk):
        t1 = min(t0 + chunk, n + 1)
        f, _, _ = model.evaluate_block(theta, data, t0, t1, 0)
        q, _, _ = model.transition(theta, data, t0, t1, 0)
        for i in range(t1 - t0):
            t = t0 + i
            predicted[t - 1] = (q[i].reshape(K, Kp) * xi).reshape(Kp, K).sum(axis=1)
            joint = (f[i].reshape(K, Kp) * xi).reshape(Kp, K).sum(axis=1)
            ct = joint.sum()
            if not ct > 0:
                raise ImpossibleLikelihoodError(t)
            c[t - 1] = ct
            xi = joint / ct
            filtered[t - 1] = xi
    return FilterOutput(filtered, predicted, c, float(np.log(c).sum()), nu.nu.copy())


def kim_smoother(filt: FilterOutput, model, theta, data, chunk=256) -> SmootherOutput:
    """Backward pass producing tuple and pairwise smoothed probabilities.

    ``pairwise[t-1, (S_t, S_{t-1}..S_{t-p})]`` equals
    ``smoothed_t(S_t..S_{t-p+1})`` times the filtering-time conditional
    probability of the dropped regime ``S_{t-p}``.
    """
    theta = model.check_theta(theta)
    K, Kp, n = model.K, model.n_tuples, data.n
    smoothed = np.empty((n, Kp))
    pairwise = np.empty((n, K * Kp))
    smoothed[n - 1] = filt.filtered[n - 1]
    zero_mass = 0
    starts = list(range(1, n + 1, chunk))
    for t0 in reversed(starts):
        t1 = min(t0 + chunk, n + 1)
        f, _, _ = model.evaluate_block(theta, data, t0, t1, 0)
        for i in range(t1 - t0 - 1, -1, -1):
            t = t0 + i
            prev = filt.filtered[t - 2] if t >= 2 else filt.nu
            joint = (f[i].reshape(K, Kp) * prev).ravel() / filt.period_lik[t - 1]
            denom = np.repeat(filt.filtered[t - 1], K)
            num = np.repeat(smoothed[t - 1], K) * joint
            zero = denom == 0
            zero_mass += int(zero.sum())
            pw = np.where(zero, 0.0, num / np.where(zero, 1.0, denom))
            pairwise[t - 1] = pw
            back = pw.reshape(K, Kp).sum(axis=0)
            if t >= 2:
                smoothed[t - 2] = back
            else:
                initial = back
    return SmootherOutput(smoothed, pairwise, initial, zero_mass)


def smoothed_score(smoother: SmootherOutput, model, theta, data, nu=None, chunk=256) -> np.ndarray:
    """Score as the smoothed expectation of period log-likelihood gradients."""
    theta = model.check_theta(theta)
    nu = resolve_nu(model, theta, nu)
    safe = np.where(nu.nu > 0, nu.nu, 1.0)
    dlog_nu = np.where((nu.nu > 0)[:, None], nu.grad_nu / safe[:, None], 0.0)
    score = smoother.initial @ dlog_nu
    for pe in iter_periods(model, theta, data, 1, chunk):
        score = score + smoother.pairwise[pe.t - 1] @ pe.dlogf()
    return score


def baseline_loglik_score(model, theta, data, nu=None, chunk=256):
    """Filter, smooth and average: returns ``(loglik, score, filter, smoother)``."""
    filt = hamilton_filter(model, theta, data, nu, chunk)
    sm = kim_smoother(filt, model, theta, data, chunk)
    return filt.loglik, smoothed_score(sm, model, theta, data, nu, chunk), filt, sm


def brute_force_smoothed(model, theta, data, nu=None):
    """Tiny-instance posterior tuple probabilities by path enumeration (test helper)."""
    theta = model.check_theta(theta)
    nu = resolve_nu(model, theta, nu)
    K, p, n = model.K, model.p, data.n
    f, _, _ = model.evaluate_block(theta, data, 1, n + 1, 0)
    length = n + p
    Kp = K**p
    post = np.zeros((n, Kp))
    total = 0.0
    for idx in range(K**length):
        S = [(idx // K ** (length - 1 - j)) % K for j in range(length)]
        code0 = 0
        for j in range(p):
            code0 = code0 * K + S[p - 1 - j]
        w = nu.nu[code0]
        tuples = []
        for t in range(1, n + 1):
            code = 0
            for j in range(p + 1):
                code = code * K + S[t + p - 1 - j]
            w *= f[t - 1][code]
            tuples.append(code // K)
        total += w
        for t, c in enumerate(tuples):
            post[t, c] += w
    return post / total, math.log(total)
