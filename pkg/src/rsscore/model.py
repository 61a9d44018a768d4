"""Regime-switching model interface, the Gaussian built-ins and simulation.

Regimes are labelled ``0..K-1`` internally and ``1..K`` in anything a user
reads (parameter names, simulated paths written to disk).  A regime tuple
``(S_t, S_{t-1}, ..., S_{t-p+1})`` is stored as an integer code in base ``K``
with ``S_t`` as the most significant digit.  Period quantities are indexed by
the ``(p+1)``-tuple ``(S_t, S_{t-1}, ..., S_{t-p})`` encoded the same way, so
that ``code // K`` is the new tuple and ``code % K**p`` is the previous one.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ModelEvaluationError,
    NormalizationError,
    NumericalError,
    UnsupportedModeError,
)

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# regime tuple codes
# ---------------------------------------------------------------------------


def encode_regimes(regimes: Sequence[int], K: int) -> int:
    """Encode ``(S_t, S_{t-1}, ...)`` (0-based) as a base-``K`` integer."""
    code = 0
    for r in regimes:
        if not 0 <= r < K:
            raise ConfigurationError(f"regime {r} outside 0..{K - 1}")
        code = code * K + int(r)
    return code


def decode_regimes(code: int, K: int, length: int) -> tuple:
    if not 0 <= code < K**length:
        raise ConfigurationError(f"code {code} outside [0, {K**length})")
    out = []
    for _ in range(length):
        out.append(code % K)
        code //= K
    return tuple(reversed(out))


def shift_regimes(code: int, head: int, K: int, p: int) -> int:
    """Push a new most recent regime onto a ``p``-tuple and drop the oldest."""
    return head * K ** (p - 1) + code // K


def regime_digits(K: int, length: int) -> np.ndarray:
    """Array of shape ``(K**length, length)``; row ``c`` holds ``decode_regimes(c)``."""
    codes = np.arange(K**length)
    powers = K ** np.arange(length - 1, -1, -1)
    return (codes[:, None] // powers[None, :]) % K


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Observations ``Y_1..Y_n``, presample block and covariates.

    ``y0`` is ordered most recent first: ``(Y_0, Y_{-1}, ..., Y_{-p+1})``.
    """

    y: np.ndarray
    y0: np.ndarray
    x: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        y0 = np.asarray(self.y0, dtype=float).ravel()
        x = np.zeros((y.size, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.size < 1:
            raise ConfigurationError("dataset needs at least one observation")
        if x.shape[0] != y.size:
            raise ConfigurationError(f"x has {x.shape[0]} rows but y has {y.size}")
        for name, arr in (("y", y), ("y0", y0), ("x", x)):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} contains non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def m(self) -> int:
        return self.x.shape[1]

    def window(self, lo: int, hi: int) -> np.ndarray:
        """``Y_lo, ..., Y_{hi-1}`` without copying the whole series; ``lo`` may reach the presample."""
        p = self.y0.size
        if lo < 1 - p or hi > self.n + 1:
            raise ConfigurationError(f"window [{lo}, {hi}) outside the data")
        if lo >= 1:
            return self.y[lo - 1 : hi - 1]
        pre = self.y0[::-1][lo + p - 1 : min(hi, 1) + p - 1]
        return np.concatenate([pre, self.y[: max(hi - 1, 0)]])

    def extended(self) -> np.ndarray:
        """``Y_{-p+1}, ..., Y_0, Y_1, ..., Y_n`` so that ``Y_t`` sits at ``t + p - 1``."""
        return np.concatenate([self.y0[::-1], self.y])


@dataclass
class InitialDistribution:
    """Distribution of the presample regime tuple and its theta-derivatives."""

    nu: np.ndarray
    grad_nu: np.ndarray
    hess_nu: np.ndarray

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        self.grad_nu = np.asarray(self.grad_nu, dtype=float)
        self.hess_nu = np.asarray(self.hess_nu, dtype=float)
        if np.any(self.nu < 0) or np.any(self.nu > 1):
            raise NormalizationError("initial distribution has entries outside [0, 1]")
        if abs(self.nu.sum() - 1.0) > 1e-12:
            raise NormalizationError(f"initial distribution sums to {self.nu.sum()!r}, not 1")

    @classmethod
    def fixed(cls, nu, d: int) -> "InitialDistribution":
        nu = np.asarray(nu, dtype=float)
        return cls(nu, np.zeros((nu.size, d)), np.zeros((nu.size, d, d)))


@dataclass
class PeriodEvaluation:
    """Period likelihood ``f_t = g_t q_t`` over all ``(p+1)``-tuples at one ``t``.

    ``df``/``d2f`` are derivatives of ``f`` itself (not of ``log f``); they are
    ``None`` when not requested.
    """

    t: int
    f: np.ndarray
    df: Optional[np.ndarray] = None
    d2f: Optional[np.ndarray] = None

    def dlogf(self) -> np.ndarray:
        """``df / f`` with zero where ``f == 0``."""
        safe = np.where(self.f > 0, self.f, 1.0)
        return np.where((self.f > 0)[:, None], self.df / safe[:, None], 0.0)


def product_rule(g, dg, d2g, q, dq, d2q, order):
    """Derivatives of ``f = g q`` from those of the factors (leading axes broadcast)."""
    f = g * q
    df = d2f = None
    if order >= 1:
        df = dg * q[..., None] + g[..., None] * dq
    if order >= 2:
        d2f = (
            d2g * q[..., None, None]
            + dg[..., :, None] * dq[..., None, :]
            + dq[..., :, None] * dg[..., None, :]
            + g[..., None, None] * d2q
        )
    return f, df, d2f


def _from_log_terms(value, dlog, d2log, order):
    """Turn ``(v, d log v, d2 log v)`` into ``(v, dv, d2v)``."""
    dv = d2v = None
    if order >= 1:
        dv = value[..., None] * dlog
    if order >= 2:
        d2v = value[..., None, None] * (d2log + dlog[..., :, None] * dlog[..., None, :])
    return value, dv, d2v


# ---------------------------------------------------------------------------
# abstract model
# ---------------------------------------------------------------------------


class RegimeSwitchingModel(ABC):
    """A regime-switching model with ``K`` regimes, Markov order ``p`` and ``d`` parameters.

    Subclasses provide the observation density ``g`` and the transition
    probability ``q`` together with their theta-derivatives, evaluated for a
    block of periods ``t0 <= t < t1`` (1-based) and every ``(p+1)``-tuple.
    Returned arrays have shapes ``(T, C)``, ``(T, C, d)`` and ``(T, C, d, d)``
    with ``T = t1 - t0`` and ``C = K**(p+1)``.
    """

    K: int
    p: int
    d: int

    @property
    def n_tuples(self) -> int:
        return self.K**self.p

    @property
    def n_args(self) -> int:
        return self.K ** (self.p + 1)

    @property
    def param_names(self) -> list:
        return [f"theta{i}" for i in range(self.d)]

    @abstractmethod
    def density(self, theta, data: Dataset, t0: int, t1: int, order: int):
        """Return ``(g, dg, d2g)``; derivative entries are ``None`` above ``order``."""

    @abstractmethod
    def transition(self, theta, data: Dataset, t0: int, t1: int, order: int):
        """Return ``(q, dq, d2q)`` for ``q(S_t | S_{t-1}, ..., S_{t-p}, ...)``."""

    def check_data(self, data: Dataset) -> None:
        if data.y0.size != self.p:
            raise ConfigurationError(
                f"model has Markov order {self.p} but presample block has {data.y0.size} values"
            )

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.d:
            raise ConfigurationError(f"theta has length {theta.size}, model expects {self.d}")
        if not np.all(np.isfinite(theta)):
            raise ConfigurationError("theta contains non-finite entries")
        return theta

    def evaluate_block(self, theta, data: Dataset, t0: int, t1: int, order: int = 2):
        # overflow and 0 * inf are caught below and reported with their period
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            g, dg, d2g = self.density(theta, data, t0, t1, order)
            q, dq, d2q = self.transition(theta, data, t0, t1, order)
            f, df, d2f = product_rule(g, dg, d2g, q, dq, d2q, order)
        bad = ~np.isfinite(f) | (f < 0)
        if order >= 1:
            bad |= ~np.all(np.isfinite(df), axis=-1)
        if order >= 2:
            bad |= ~np.all(np.isfinite(d2f), axis=(-2, -1))
        if bad.any():
            ti, ci = np.argwhere(bad)[0]
            raise ModelEvaluationError(
                "non-finite or negative period likelihood",
                t=t0 + int(ti),
                regimes=[r + 1 for r in decode_regimes(int(ci), self.K, self.p + 1)],
            )
        return f, df, d2f


def evaluate_period(model: RegimeSwitchingModel, theta, data: Dataset, t: int, order: int = 2):
    """Period likelihood and its derivatives at a single ``t`` (``1 <= t <= n``)."""
    if not 1 <= t <= data.n:
        raise ConfigurationError(f"t={t} outside 1..{data.n}")
    theta = model.check_theta(theta)
    model.check_data(data)
    f, df, d2f = model.evaluate_block(theta, data, t, t + 1, order)
    return PeriodEvaluation(
        t,
        f[0],
        None if df is None else df[0],
        None if d2f is None else d2f[0],
    )


def iter_periods(
    model: RegimeSwitchingModel, theta, data: Dataset, order: int = 2, chunk: int = 256
) -> Iterator[PeriodEvaluation]:
    """Yield ``PeriodEvaluation`` for ``t = 1..n``, evaluating ``chunk`` periods at a time.

    Only one chunk is alive at a time, so memory does not grow with ``n``.
    """
    theta = model.check_theta(theta)
    model.check_data(data)
    for t0 in range(1, data.n + 1, chunk):
        t1 = min(t0 + chunk, data.n + 1)
        f, df, d2f = model.evaluate_block(theta, data, t0, t1, order)
        for i in range(t1 - t0):
            yield PeriodEvaluation(
                t0 + i,
                f[i],
                None if df is None else df[i],
                None if d2f is None else d2f[i],
            )


# ---------------------------------------------------------------------------
# Gaussian built-ins
# ---------------------------------------------------------------------------


def _softmax_last_reference(z):
    """Row probabilities from logits ``z[..., K-1]`` with the last category as reference."""
    full = np.concatenate([z, np.zeros(z.shape[:-1] + (1,))], axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


class GaussianSwitchingModel(RegimeSwitchingModel):
    """Gaussian regime-switching model with optional AR terms and TVTP transitions.

    Observation equation (Hamilton-style switching mean)::

        Y_t = mu[S_t] + sum_j phi_j (Y_{t-j} - mu[S_{t-j}]) + sigma[S_t] eps_t

    Transitions are a multinomial logit with the last regime as reference.  For
    the constant model the logit of moving from ``i`` to ``k`` is a free
    parameter; with ``tvtp_covariates = m'`` it is
    ``beta_ik . (1, Y_{t-1}, X_t[:m'])``.

    Parameter layout (``d = K + K_v + L + K(K-1) A``)::

        mu_1..mu_K, logvar_1..logvar_{K_v}, phi_1..phi_L, transition block

    with ``K_v`` equal to ``K`` (switching variance) or 1, ``L = ar_lags`` and
    ``A = 1`` (constant) or ``2 + m'`` (TVTP).  The transition block is laid
    out as ``[i, k, a]`` in C order, ``i`` the origin regime, ``k < K-1`` the
    destination, ``a`` the covariate slot.
    """

    def __init__(
        self,
        K: int,
        switching_variance: bool = True,
        ar_lags: int = 0,
        tvtp_covariates: Optional[int] = None,
    ):
        if K < 1:
            raise ConfigurationError("K must be at least 1")
        if ar_lags < 0:
            raise ConfigurationError("ar_lags must be non-negative")
        if tvtp_covariates is not None and tvtp_covariates < 0:
            raise ConfigurationError("tvtp_covariates must be non-negative")
        self.K = int(K)
        self.switching_variance = bool(switching_variance)
        self.ar_lags = int(ar_lags)
        self.tvtp = tvtp_covariates is not None
        self.tvtp_covariates = int(tvtp_covariates or 0)
        self.p = max(1, self.ar_lags)
        self.n_var = self.K if self.switching_variance else 1
        self.n_slots = 2 + self.tvtp_covariates if self.tvtp else 1

        start = 0
        self.idx_mu = slice(start, start + self.K)
        start += self.K
        self.idx_var = slice(start, start + self.n_var)
        start += self.n_var
        self.idx_phi = slice(start, start + self.ar_lags)
        start += self.ar_lags
        n_trans = self.K * (self.K - 1) * self.n_slots
        self.idx_trans = slice(start, start + n_trans)
        self.d = start + n_trans
        self._digits = regime_digits(self.K, self.p + 1)

    def __repr__(self):
        tv = f", tvtp_covariates={self.tvtp_covariates}" if self.tvtp else ""
        return (
            f"GaussianSwitchingModel(K={self.K}, switching_variance={self.switching_variance}, "
            f"ar_lags={self.ar_lags}{tv})"
        )

    @property
    def param_names(self) -> list:
        names = [f"mu{k + 1}" for k in range(self.K)]
        if self.switching_variance:
            names += [f"logvar{k + 1}" for k in range(self.K)]
        else:
            names += ["logvar"]
        names += [f"phi{j + 1}" for j in range(self.ar_lags)]
        slots = ["const", "ylag"] + [f"x{m + 1}" for m in range(self.tvtp_covariates)]
        for i in range(self.K):
            for k in range(self.K - 1):
                if self.tvtp:
                    names += [f"beta_{i + 1}_{k + 1}_{s}" for s in slots]
                else:
                    names.append(f"logit_{i + 1}_{k + 1}")
        return names

    @property
    def param_transforms(self) -> list:
        """Tag per coordinate describing how it maps to the natural parameter."""
        return (
            ["identity"] * self.K
            + ["log"] * self.n_var
            + ["identity"] * self.ar_lags
            + ["logit"] * (self.idx_trans.stop - self.idx_trans.start)
        )

    # -- parameter packing --------------------------------------------------

    def transition_coefficients(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return theta[self.idx_trans].reshape(self.K, self.K - 1, self.n_slots)

    def transition_matrix(self, theta) -> np.ndarray:
        """Constant ``K x K`` transition matrix ``P[i, j] = P(S_t=j | S_{t-1}=i)``.

        For a TVTP model this is the matrix at zero slopes (intercepts only).
        """
        if self.K == 1:
            return np.ones((1, 1))
        return _softmax_last_reference(self.transition_coefficients(theta)[:, :, 0])

    def pack(self, mu, variances, P=None, phi=()) -> np.ndarray:
        """Build theta from natural parameters (means, variances, transition matrix, AR)."""
        theta = np.zeros(self.d)
        theta[self.idx_mu] = np.asarray(mu, dtype=float)
        theta[self.idx_var] = np.log(np.asarray(variances, dtype=float))
        theta[self.idx_phi] = np.asarray(phi, dtype=float)
        if self.K > 1:
            P = np.asarray(P, dtype=float)
            logits = np.log(P[:, :-1]) - np.log(P[:, -1:])
            coef = np.zeros((self.K, self.K - 1, self.n_slots))
            coef[:, :, 0] = logits
            theta[self.idx_trans] = coef.ravel()
        return theta

    def natural(self, theta) -> dict:
        theta = np.asarray(theta, dtype=float)
        return {
            "mu": theta[self.idx_mu].copy(),
            "variance": np.exp(theta[self.idx_var]),
            "phi": theta[self.idx_phi].copy(),
            "P": self.transition_matrix(theta),
        }

    def permute_regimes(self, theta, perm) -> np.ndarray:
        """Relabel regimes so that new regime ``k`` is old regime ``perm[k]``."""
        theta = np.asarray(theta, dtype=float)
        perm = np.asarray(perm)
        out = theta.copy()
        out[self.idx_mu] = theta[self.idx_mu][perm]
        if self.switching_variance:
            out[self.idx_var] = theta[self.idx_var][perm]
        if self.K > 1:
            coef = self.transition_coefficients(theta)
            full = np.concatenate([coef, np.zeros((self.K, 1, self.n_slots))], axis=1)
            full = full[perm][:, perm, :]
            full = full[:, :-1, :] - full[:, -1:, :]
            out[self.idx_trans] = full.ravel()
        return out

    # -- evaluation ---------------------------------------------------------

    def check_data(self, data: Dataset) -> None:
        super().check_data(data)
        if self.tvtp and data.m < self.tvtp_covariates:
            raise ConfigurationError(
                f"TVTP model uses {self.tvtp_covariates} covariates but data has {data.m}"
            )

    def _lags(self, data: Dataset, t0: int, t1: int) -> np.ndarray:
        """``(T, p)`` array of ``Y_{t-1}, ..., Y_{t-p}``."""
        w = data.window(t0 - self.p, t1 - 1)
        T = t1 - t0
        return np.stack([w[self.p - j : self.p - j + T] for j in range(1, self.p + 1)], axis=1)

    def density(self, theta, data, t0, t1, order):
        theta = np.asarray(theta, dtype=float)
        R = self._digits
        L = self.ar_lags
        mu = theta[self.idx_mu]
        v = theta[self.idx_var]
        phi = theta[self.idx_phi]
        y = data.y[t0 - 1 : t1 - 1]
        lags = self._lags(data, t0, t1)[:, :L]

        m = np.broadcast_to(mu[R[:, 0]], (y.size, R.shape[0])).copy()
        dev = lags[:, None, :] - mu[R[:, 1 : L + 1]][None, :, :]  # (T, C, L)
        if L:
            m += dev @ phi
        var_idx = R[:, 0] if self.switching_variance else np.zeros(R.shape[0], dtype=int)
        vsel = v[var_idx]
        prec = np.exp(-vsel)
        e = y[:, None] - m
        e2p = e * e * prec
        logg = -0.5 * LOG_2PI - 0.5 * vsel - 0.5 * e2p
        g = np.exp(logg)
        if order == 0:
            return g, None, None

        T, C, d = y.size, R.shape[0], self.d
        eye_k = np.eye(self.K)
        dmu = eye_k[R[:, 0]].copy()  # (C, K)
        for j in range(1, L + 1):
            dmu -= phi[j - 1] * eye_k[R[:, j]]
        dm = np.zeros((T, C, d))
        dm[:, :, self.idx_mu] = dmu[None]
        dm[:, :, self.idx_phi] = dev
        dv = np.zeros((C, d))
        dv[np.arange(C), self.idx_var.start + var_idx] = 1.0
        a = e * prec
        b = -0.5 + 0.5 * e2p
        dlog = a[..., None] * dm + b[..., None] * dv[None]
        if order == 1:
            return _from_log_terms(g, dlog, None, 1)

        d2m = np.zeros((C, d, d))
        for j in range(1, L + 1):
            pj = self.idx_phi.start + j - 1
            d2m[np.arange(C), self.idx_mu.start + R[:, j], pj] -= 1.0
            d2m[np.arange(C), pj, self.idx_mu.start + R[:, j]] -= 1.0
        cross = dm[..., :, None] * dv[None, :, None, :]
        d2log = (
            -prec[..., None, None] * dm[..., :, None] * dm[..., None, :]
            + a[..., None, None] * d2m[None]
            - a[..., None, None] * (cross + np.swapaxes(cross, -1, -2))
            - 0.5 * e2p[..., None, None] * (dv[:, :, None] * dv[:, None, :])[None]
        )
        return _from_log_terms(g, dlog, d2log, 2)

    def _transition_covariates(self, data: Dataset, t0: int, t1: int) -> np.ndarray:
        """``(T, A)`` covariate rows ``(1, Y_{t-1}, X_t[:m'])`` (just ``1`` when constant)."""
        T = t1 - t0
        if not self.tvtp:
            return np.ones((T, 1))
        ylag = data.window(t0 - 1, t1 - 1)
        xs = data.x[t0 - 1 : t1 - 1, : self.tvtp_covariates]
        return np.column_stack([np.ones(T), ylag, xs])

    def transition_probabilities(self, theta, data: Dataset, t0: int, t1: int) -> np.ndarray:
        """``(T, K, K)`` row-stochastic transition matrices for ``t0 <= t < t1``."""
        T = t1 - t0
        if self.K == 1:
            return np.ones((T, 1, 1))
        w = self._transition_covariates(data, t0, t1)
        coef = self.transition_coefficients(theta)
        z = np.einsum("ika,ta->tik", coef, w)
        return _softmax_last_reference(z)

    def transition(self, theta, data, t0, t1, order):
        theta = np.asarray(theta, dtype=float)
        R = self._digits
        T, C, d, K = t1 - t0, R.shape[0], self.d, self.K
        if K == 1:
            q = np.ones((T, C))
            dq = np.zeros((T, C, d)) if order >= 1 else None
            d2q = np.zeros((T, C, d, d)) if order >= 2 else None
            return q, dq, d2q

        w = self._transition_covariates(data, t0, t1)
        A = w.shape[1]
        P = self.transition_probabilities(theta, data, t0, t1)
        q = P[:, R[:, 1], R[:, 0]]
        if order == 0:
            return q, None, None

        nb = (K - 1) * A
        dlog = np.zeros((T, C, d))
        d2log = np.zeros((T, C, d, d)) if order >= 2 else None
        ww = w[:, :, None] * w[:, None, :]
        for i in range(K):
            cs = np.flatnonzero(R[:, 1] == i)
            cols = self.idx_trans.start + i * nb + np.arange(nb)
            Pi = P[:, i, : K - 1]  # (T, K-1)
            ind = np.eye(K)[R[cs, 0], : K - 1]  # (Ci, K-1)
            g1 = ind[None] - Pi[:, None, :]  # (T, Ci, K-1)
            block = (g1[..., None] * w[:, None, None, :]).reshape(T, cs.size, nb)
            dlog[:, cs[:, None], cols[None, :]] = block
            if order >= 2:
                M = np.einsum("tk,kl->tkl", Pi, np.eye(K - 1)) - Pi[:, :, None] * Pi[:, None, :]
                blk2 = -(M[:, :, None, :, None] * ww[:, None, :, None, :]).reshape(T, nb, nb)
                d2log[:, cs[:, None, None], cols[None, :, None], cols[None, None, :]] = blk2[
                    :, None
                ]
        return _from_log_terms(q, dlog, d2log, order)

    # -- stationary distribution --------------------------------------------

    def stationary_distribution(self, theta):
        """Ergodic distribution of the constant chain with its first two theta-derivatives."""
        if self.tvtp:
            raise UnsupportedModeError("ergodic initial distribution needs time-homogeneous transitions")
        K, d = self.K, self.d
        if K == 1:
            return np.ones(1), np.zeros((1, d)), np.zeros((1, d, d))
        P = self.transition_matrix(theta)
        dP, d2P = _transition_matrix_derivatives(self, theta)

        Mmat = np.eye(K) - P.T
        Mmat[-1, :] = 1.0
        rhs = np.zeros(K)
        rhs[-1] = 1.0
        try:
            Minv = np.linalg.inv(Mmat)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("transition matrix has no unique stationary distribution") from exc
        pi = Minv @ rhs
        dM = -np.transpose(dP, (1, 0, 2)).copy()  # (K, K, d): dM[:, :, a]
        dM[-1] = 0.0
        d2M = -np.transpose(d2P, (1, 0, 2, 3)).copy()
        d2M[-1] = 0.0
        dpi = -Minv @ np.einsum("rca,c->ra", dM, pi)
        term = (
            np.einsum("rcab,c->rab", d2M, pi)
            + np.einsum("rca,cb->rab", dM, dpi)
            + np.einsum("rcb,ca->rab", dM, dpi)
        )
        d2pi = -np.einsum("sr,rab->sab", Minv, term)
        return pi, dpi, d2pi

    # -- simulation ---------------------------------------------------------

    def random_theta(self, rng, spread: float = 1.0) -> np.ndarray:
        """A moderate random parameter: stationary AR part, non-degenerate transitions."""
        theta = np.empty(self.d)
        theta[self.idx_mu] = rng.normal(0.0, spread, self.K)
        theta[self.idx_var] = rng.uniform(-0.5, 0.5, self.n_var)
        if self.ar_lags:
            phi = rng.uniform(-1.0, 1.0, self.ar_lags)
            theta[self.idx_phi] = 0.8 * phi / max(1.0, np.abs(phi).sum())
        theta[self.idx_trans] = rng.normal(0.0, 1.0, self.idx_trans.stop - self.idx_trans.start)
        return theta

    def simulate(self, theta, n: int, seed: int, nu=None, y0=None, x=None, full_path=False):
        """Draw ``(Dataset, path)``; ``path`` holds ``S_1..S_n`` as labels ``1..K``.

        With ``full_path`` the presample regimes are included in front, so the
        path reads ``S_{-p+1}, ..., S_0, S_1, ..., S_n``.

        ``nu`` defaults to the uniform distribution over presample tuples.  If
        ``y0`` is omitted the presample values are set to the means of the drawn
        presample regimes.  Covariates are drawn i.i.d. standard normal when the
        model needs them and ``x`` is not given.
        """
        theta = self.check_theta(theta)
        if n < 1:
            raise ConfigurationError("n must be at least 1")
        rng = np.random.default_rng(seed)
        K, p, L = self.K, self.p, self.ar_lags
        if nu is None:
            nu_vec = np.full(K**p, 1.0 / K**p)
        else:
            nu_vec = nu.nu if isinstance(nu, InitialDistribution) else np.asarray(nu, dtype=float)
        if x is None:
            x = rng.standard_normal((n, self.tvtp_covariates)) if self.tvtp else np.zeros((n, 0))
        x = np.asarray(x, dtype=float).reshape(n, -1)

        mu = theta[self.idx_mu]
        sd = np.exp(0.5 * theta[self.idx_var])
        phi = theta[self.idx_phi]
        coef = self.transition_coefficients(theta) if K > 1 else None
        P_const = self.transition_matrix(theta)

        code0 = int(np.searchsorted(np.cumsum(nu_vec), rng.random(), side="right"))
        code0 = min(code0, K**p - 1)
        init = decode_regimes(code0, K, p)  # (S_0, S_{-1}, ...)
        # S_t at index t + p - 1, likewise for Y
        S = np.empty(n + p, dtype=int)
        S[:p] = init[::-1]
        Y = np.empty(n + p)
        if y0 is None:
            Y[:p] = mu[S[:p]]
        else:
            y0 = np.asarray(y0, dtype=float).ravel()
            if y0.size != p:
                raise ConfigurationError(f"y0 must have {p} values")
            Y[:p] = y0[::-1]

        u = rng.random(n)
        eps = rng.standard_normal(n)
        for t in range(1, n + 1):
            i = t + p - 1
            prev = S[i - 1]
            if K == 1:
                probs = P_const[0]
            elif self.tvtp:
                w = np.concatenate([[1.0, Y[i - 1]], x[t - 1, : self.tvtp_covariates]])
                probs = _softmax_last_reference(coef[prev] @ w)
            else:
                probs = P_const[prev]
            s = min(int(np.searchsorted(np.cumsum(probs), u[t - 1], side="right")), K - 1)
            S[i] = s
            mean = mu[s]
            for j in range(1, L + 1):
                mean += phi[j - 1] * (Y[i - j] - mu[S[i - j]])
            Y[i] = mean + sd[s if self.switching_variance else 0] * eps[t - 1]

        data = Dataset(Y[p:], Y[:p][::-1], x)
        return data, (S + 1 if full_path else S[p:] + 1)


def make_gaussian_switching_model(K: int, with_switching_variance: bool = True, ar_lags: int = 0):
    return GaussianSwitchingModel(K, with_switching_variance, ar_lags)


def make_tvtp_model(
    K: int,
    transition_covariate_count: int = 0,
    with_switching_variance: bool = True,
    ar_lags: int = 0,
):
    if K < 2:
        raise ConfigurationError("TVTP model needs at least two regimes")
    return GaussianSwitchingModel(K, with_switching_variance, ar_lags, transition_covariate_count)


def simulate(model, theta, n: int, seed: int, nu=None, y0=None, x=None, full_path=False):
    """Simulate ``(Dataset, regime path)`` from a built-in model."""
    return model.simulate(theta, n, seed, nu=nu, y0=y0, x=x, full_path=full_path)


# ---------------------------------------------------------------------------
# initial distribution
# ---------------------------------------------------------------------------


def _product_derivatives(factors):
    """Value, gradient and Hessian of a product of factors ``(v, dv, d2v)``."""
    v, dv, d2v = factors[0]
    for w, dw, d2w in factors[1:]:
        d2v = (
            d2v * w[..., None, None]
            + dv[..., :, None] * dw[..., None, :]
            + dw[..., :, None] * dv[..., None, :]
            + v[..., None, None] * d2w
        )
        dv = dv * w[..., None] + v[..., None] * dw
        v = v * w
    return v, dv, d2v


def default_initial_distribution(model, theta, mode="uniform", nu=None) -> InitialDistribution:
    """Initial regime-tuple distribution: ``uniform``, ``ergodic`` or ``user``.

    The ergodic tuple distribution is ``pi(S_{-p+1}) prod P(S_{k-1}, S_k)``,
    with derivatives propagated through the stationarity system.
    """
    K, p, d = model.K, model.p, model.d
    size = K**p
    if mode == "uniform":
        return InitialDistribution.fixed(np.full(size, 1.0 / size), d)
    if mode == "user":
        if nu is None:
            raise ConfigurationError("user mode requires a distribution vector")
        nu = np.asarray(nu, dtype=float).ravel()
        if nu.size != size:
            raise ConfigurationError(f"initial distribution needs {size} entries, got {nu.size}")
        return InitialDistribution.fixed(nu, d)
    if mode != "ergodic":
        raise ConfigurationError(f"unknown initial distribution mode {mode!r}")
    if not hasattr(model, "stationary_distribution"):
        raise UnsupportedModeError(f"{type(model).__name__} has no stationary distribution")
    theta = model.check_theta(theta)
    pi, dpi, d2pi = model.stationary_distribution(theta)
    if p == 1:
        return InitialDistribution(pi, dpi, d2pi)

    # tuple (S_0, ..., S_{-p+1}); oldest regime drawn from pi, then p-1 transitions
    P = model.transition_matrix(theta)
    dP, d2P = _transition_matrix_derivatives(model, theta)
    R = regime_digits(K, p)
    oldest = R[:, p - 1]
    factors = [(pi[oldest], dpi[oldest], d2pi[oldest])]
    for j in range(p - 1, 0, -1):
        frm, to = R[:, j], R[:, j - 1]
        factors.append((P[frm, to], dP[frm, to], d2P[frm, to]))
    v, dv, d2v = _product_derivatives(factors)
    return InitialDistribution(v, dv, d2v)


def _transition_matrix_derivatives(model, theta):
    K, d = model.K, model.d
    P = model.transition_matrix(theta)
    dlogP = np.zeros((K, K, d))
    d2logP = np.zeros((K, K, d, d))
    for i in range(K):
        cols = (
            model.idx_trans.start
            + i * (K - 1) * model.n_slots
            + np.arange(K - 1) * model.n_slots
        )
        M = np.diag(P[i, : K - 1]) - np.outer(P[i, : K - 1], P[i, : K - 1])
        for j in range(K):
            dlogP[i, j, cols] = np.eye(K)[j, : K - 1] - P[i, : K - 1]
            d2logP[i, j, cols[:, None], cols[None, :]] = -M
    dP = P[..., None] * dlogP
    d2P = P[..., None, None] * (d2logP + dlogP[..., :, None] * dlogP[..., None, :])
    return dP, d2P


def resolve_nu(model, theta, nu=None) -> InitialDistribution:
    """Accept ``None`` (uniform), a mode name, a probability vector or an ``InitialDistribution``."""
    if nu is None:
        return default_initial_distribution(model, theta, "uniform")
    if isinstance(nu, InitialDistribution):
        if nu.nu.size != model.n_tuples or nu.grad_nu.shape != (model.n_tuples, model.d):
            raise ConfigurationError("initial distribution does not match the model dimensions")
        return nu
    if isinstance(nu, str):
        return default_initial_distribution(model, theta, nu)
    return default_initial_distribution(model, theta, "user", nu)
