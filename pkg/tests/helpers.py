"""Instance generators, a naive per-tuple path summation and small custom models."""

from __future__ import annotations

import itertools
import math

import numpy as np

from rsscore.model import (
    GaussianSwitchingModel,
    InitialDistribution,
    RegimeSwitchingModel,
    default_initial_distribution,
    make_gaussian_switching_model,
    make_tvtp_model,
)

LOG_2PI = math.log(2 * math.pi)


def rel_err(a, b) -> float:
    """Largest entrywise ``|a - b| / max(1, |b|)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float((np.abs(a - b) / np.maximum(1.0, np.abs(b))).max())


def build_model(family, K, p, rng=None):
    """Gaussian or TVTP model with Markov order ``p`` (AR lags picked to match)."""
    if p >= 2:
        lags = p
    else:
        lags = 0 if rng is None else int(rng.integers(0, 2))
    if family == "tvtp":
        return make_tvtp_model(K, 1, True, lags)
    shared = rng is not None and rng.random() < 0.25
    return make_gaussian_switching_model(K, not shared, lags)


def random_nu(model, theta, rng):
    """Uniform, ergodic (constant transitions only) or a random user vector."""
    choices = ["uniform", "user"] + ([] if getattr(model, "tvtp", False) or model.K == 1 else ["ergodic"])
    mode = choices[int(rng.integers(len(choices)))]
    if mode == "user":
        return default_initial_distribution(model, theta, "user", rng.dirichlet(np.ones(model.n_tuples)))
    return default_initial_distribution(model, theta, mode)


def random_nu_spec(model, rng):
    """Like ``random_nu`` but theta-dependent modes stay names, for finite differencing."""
    choices = ["uniform", "user"] + ([] if getattr(model, "tvtp", False) or model.K == 1 else ["ergodic"])
    mode = choices[int(rng.integers(len(choices)))]
    if mode == "user":
        return default_initial_distribution(model, None, "user", rng.dirichlet(np.ones(model.n_tuples)))
    return mode


def random_instance(rng, family, K, p, n, nu=True):
    model = build_model(family, K, p, rng)
    theta = model.random_theta(rng)
    data, path = model.simulate(theta, n, seed=int(rng.integers(2**31)))
    init = random_nu(model, theta, rng) if nu else None
    return model, theta, data, init


def naive_tuple_sums(model, theta, data, nu):
    """Per-final-tuple ``p, s, h, H`` by looping over every path in plain Python."""
    K, p, n, d = model.K, model.p, data.n, model.d
    f, df, d2f = model.evaluate_block(theta, data, 1, n + 1, 2)
    Kp = K**p
    P = np.zeros(Kp)
    S = np.zeros((Kp, d))
    h = np.zeros((Kp, d, d))
    H = np.zeros((Kp, d, d))
    for path in itertools.product(range(K), repeat=n + p):
        # path[j] is S_{j-p+1}
        def code(t, width):
            c = 0
            for j in range(width):
                c = c * K + path[t + p - 1 - j]
            return c

        c0 = code(0, p)
        F = [nu.nu[c0]] + [f[t - 1][code(t, p + 1)] for t in range(1, n + 1)]
        G = [nu.grad_nu[c0]] + [df[t - 1][code(t, p + 1)] for t in range(1, n + 1)]
        G2 = [nu.hess_nu[c0]] + [d2f[t - 1][code(t, p + 1)] for t in range(1, n + 1)]
        last = code(n, p)

        def prod_except(*skip):
            out = 1.0
            for k, v in enumerate(F):
                if k not in skip:
                    out *= v
            return out

        P[last] += prod_except()
        for k in range(n + 1):
            rest = prod_except(k)
            S[last] += G[k] * rest
            H[last] += G2[k] * rest
            for k2 in range(k + 1, n + 1):
                h[last] += np.outer(G[k], G[k2]) * prod_except(k, k2)
    return P, S, h, H


class MeanLogVarModel(RegimeSwitchingModel):
    """One regime, one parameter: ``Y_t ~ N(theta, exp(theta))``."""

    K = 1
    p = 1
    d = 1

    @property
    def param_names(self):
        return ["theta"]

    def density(self, theta, data, t0, t1, order):
        th = float(np.asarray(theta)[0])
        y = data.y[t0 - 1 : t1 - 1][:, None]  # (T, 1) over the single regime pair
        v = math.exp(th)
        e = y - th
        logg = -0.5 * LOG_2PI - 0.5 * th - e**2 / (2 * v)
        g = np.exp(logg)
        dg = d2g = None
        dlog = -0.5 + e / v + e**2 / (2 * v)
        d2log = -1.0 / v - 2 * e / v - e**2 / (2 * v)
        if order >= 1:
            dg = (g * dlog)[..., None]
        if order >= 2:
            d2g = (g * (d2log + dlog**2))[..., None, None]
        return g, dg, d2g

    def transition(self, theta, data, t0, t1, order):
        T = t1 - t0
        q = np.ones((T, 1))
        return q, np.zeros((T, 1, 1)) if order >= 1 else None, np.zeros((T, 1, 1, 1)) if order >= 2 else None


class CorruptedModel(GaussianSwitchingModel):
    """Gaussian model whose density gradient is wrong in one coordinate (negative control)."""

    def __init__(self, *args, corrupt="mu2", factor=1.05, **kwargs):
        super().__init__(*args, **kwargs)
        self.corrupt_index = self.param_names.index(corrupt)
        self.factor = factor

    def density(self, theta, data, t0, t1, order):
        g, dg, d2g = super().density(theta, data, t0, t1, order)
        if dg is not None:
            dg = dg.copy()
            dg[..., self.corrupt_index] *= self.factor
        return g, dg, d2g


def make_corrupted(section):
    """CLI factory hook: ``factory = "helpers:make_corrupted"``."""
    return CorruptedModel(section.K, section.switching_variance, section.ar_lags)


def fixed_nu(model, vec):
    return InitialDistribution.fixed(np.asarray(vec, dtype=float), model.d)
