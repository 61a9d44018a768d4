"""Brute-force likelihood derivatives by enumerating every regime path.

Every path ``(S_{-p+1}, ..., S_n)`` contributes the product of ``n + 1``
factors: the initial probability of ``(S_0, ..., S_{-p+1})`` followed by the
period likelihoods ``f_1 .. f_n``.  The score numerator replaces one factor by
its gradient, ``H`` one factor by its Hessian and ``h`` two distinct factors
(earlier one on the left) by gradients.  Products of the remaining factors are
formed explicitly from prefix, middle and suffix products, so zero factors are
handled without division.

Paths are processed in fixed chunks of ``CHUNK`` consecutive path indices.
Within a chunk, per-path weights are accumulated per regime code; chunk
totals are then combined with ``math.fsum`` so the reduction order is fixed
and the result does not depend on how many chunks there are beyond that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SizeGuardError
from .model import resolve_nu

DEFAULT_LIMIT = 10**7
CHUNK = 4096


@dataclass
class PathEnumeration:
    p: float
    s: np.ndarray
    H: np.ndarray
    h: np.ndarray
    n_paths: int

    @property
    def loglik(self) -> float:
        return math.log(self.p) if self.p > 0 else -math.inf

    @property
    def score(self) -> np.ndarray:
        return self.s / self.p

    @property
    def hessian(self) -> np.ndarray:
        sc = self.score
        return (self.H + self.h + self.h.T) / self.p - np.outer(sc, sc)


def _fsum_stack(parts):
    """Element-wise compensated sum of equally shaped arrays."""
    if len(parts) == 1:
        return parts[0]
    stacked = np.stack(parts)
    flat = stacked.reshape(len(parts), -1)
    out = np.array([math.fsum(flat[:, j].tolist()) for j in range(flat.shape[1])])
    return out.reshape(stacked.shape[1:])


def enumerate_paths(model, theta, data, nu=None, order=2, limit=DEFAULT_LIMIT) -> PathEnumeration:
    """Evaluate ``p_n``, ``s_n``, ``H_n`` and ``h_n`` by summing over all paths."""
    theta = model.check_theta(theta)
    model.check_data(data)
    K, p, n, d = model.K, model.p, data.n, model.d
    n_paths = K ** (n + p)
    if n_paths > limit:
        raise SizeGuardError(n_paths, limit)
    nu = resolve_nu(model, theta, nu)
    f, df, d2f = model.evaluate_block(theta, data, 1, n + 1, order)

    Kp, C = K**p, K ** (p + 1)
    sizes = [Kp] + [C] * n  # code range of factor k = 0..n
    length = n + p
    powers = K ** np.arange(length - 1, -1, -1)

    acc_p, acc_W, acc_W2 = [], [], []
    for a in range(0, n_paths, CHUNK):
        idx = np.arange(a, min(a + CHUNK, n_paths))
        # column j holds S_{j-p+1}; S_t lives in column t + p - 1
        S = (idx[:, None] // powers[None, :]) % K
        codes = []
        for k in range(n + 1):
            width = p if k == 0 else p + 1
            cols = [k + p - 1 - j for j in range(width)]  # S_k, S_{k-1}, ...
            code = np.zeros(idx.size, dtype=np.int64)
            for c in cols:
                code = code * K + S[:, c]
            codes.append(code)
        F = [nu.nu[codes[0]]] + [f[k - 1][codes[k]] for k in range(1, n + 1)]

        prefix = [np.ones(idx.size)]
        for k in range(n + 1):
            prefix.append(prefix[-1] * F[k])
        suffix = [np.ones(idx.size)] * (n + 2)
        for k in range(n, -1, -1):
            suffix[k] = suffix[k + 1] * F[k]
        acc_p.append(np.array([math.fsum(prefix[n + 1].tolist())]))

        if order >= 1:
            W = [
                np.bincount(codes[k], prefix[k] * suffix[k + 1], minlength=sizes[k])
                for k in range(n + 1)
            ]
            acc_W.append(W)
        if order >= 2:
            W2 = {}
            for t1 in range(n + 1):
                mid = np.ones(idx.size)
                for t2 in range(t1 + 1, n + 1):
                    w = prefix[t1] * mid * suffix[t2 + 1]
                    pair = codes[t1] * sizes[t2] + codes[t2]
                    W2[t1, t2] = np.bincount(pair, w, minlength=sizes[t1] * sizes[t2]).reshape(
                        sizes[t1], sizes[t2]
                    )
                    mid = mid * F[t2]
            acc_W2.append(W2)

    p_total = float(_fsum_stack(acc_p)[0])
    grads = [nu.grad_nu] + ([df[k] for k in range(n)] if order >= 1 else [])
    s = H = h = None
    if order >= 1:
        W = [_fsum_stack([w[k] for w in acc_W]) for k in range(n + 1)]
        s = sum(W[k] @ grads[k] for k in range(n + 1))
    if order >= 2:
        hess = [nu.hess_nu] + [d2f[k] for k in range(n)]
        H = sum(np.tensordot(W[k], hess[k], axes=(0, 0)) for k in range(n + 1))
        h = np.zeros((d, d))
        for key in acc_W2[0]:
            t1, t2 = key
            W2 = _fsum_stack([w[key] for w in acc_W2])
            h += grads[t1].T @ W2 @ grads[t2]
    return PathEnumeration(p_total, s, H, h, n_paths)


def brute_force_likelihood(model, theta, data, nu=None, limit=DEFAULT_LIMIT):
    """Return ``(p_n, log p_n)`` by direct enumeration."""
    e = enumerate_paths(model, theta, data, nu, order=0, limit=limit)
    return e.p, e.loglik


def brute_force_score(model, theta, data, nu=None, limit=DEFAULT_LIMIT):
    return enumerate_paths(model, theta, data, nu, order=1, limit=limit).score


def brute_force_hessian(model, theta, data, nu=None, limit=DEFAULT_LIMIT):
    return enumerate_paths(model, theta, data, nu, order=2, limit=limit).hessian
