"""Forward-only smoothed additive functionals and the EM fitter built on them.

A smoothed additive functional ``sum_t E[r_t(S_t, S_{t-1}, ..., S_{t-p}) | Y_1..Y_n]``
is the score recursion with every period gradient ``df_t`` replaced by
``r_t f_t``: each path term then carries ``r`` at exactly one period, and the
scaled recursion divides by the likelihood along the way.  Nothing is stored
per period, so a full E-step costs one forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateRegimeError,
    InternalConsistencyError,
    StalledFitError,
)
from .model import (
    GaussianSwitchingModel,
    PeriodEvaluation,
    default_initial_distribution,
    iter_periods,
    regime_digits,
    resolve_nu,
)
from .recursion import RecursionState, step_scaled

MONOTONE_TOL = 1e-10


@dataclass
class AdditiveFunctional:
    """Vector-valued ``r_t`` evaluated on all ``(p+1)``-tuples.

    ``func(pe, data)`` returns an array of shape ``(K**(p+1), dim)``.  ``order``
    is the derivative order ``pe`` must carry.  ``initial`` optionally gives
    ``r_0`` on presample tuples, shape ``(K**p, dim)``.
    """

    dim: int
    func: Callable[[PeriodEvaluation, object], np.ndarray]
    order: int = 0
    initial: Optional[np.ndarray] = None


@dataclass
class SufficientStats:
    stats: np.ndarray
    loglik: float
    n: int = 0
    theta: Optional[np.ndarray] = None
    # Gaussian E-step pieces, per (p+1)-tuple code c
    weights: Optional[np.ndarray] = None  # sum_t P(c)
    moments: Optional[np.ndarray] = None  # sum_t P(c) z_t,  z_t = (Y_t, ..., Y_{t-L})
    cross: Optional[np.ndarray] = None  # sum_t P(c) z_t z_t^T
    K: int = 0
    p: int = 0

    def _digits(self):
        return regime_digits(self.K, self.p + 1)

    @property
    def occupancy(self) -> np.ndarray:
        """``sum_{t=1..n} P(S_t = j | data)``."""
        return np.bincount(self._digits()[:, 0], self.weights, minlength=self.K)

    @property
    def pair_mass(self) -> np.ndarray:
        """``[i, j] = sum_{t=1..n} P(S_{t-1} = i, S_t = j | data)``; includes ``t = 1``."""
        R = self._digits()
        return np.bincount(R[:, 1] * self.K + R[:, 0], self.weights, minlength=self.K**2).reshape(
            self.K, self.K
        )

    def regime_moments(self):
        """``(sum P_j Y_t, sum P_j Y_t^2)`` per regime ``j`` of ``S_t``."""
        R = self._digits()
        m1 = np.bincount(R[:, 0], self.moments[:, 0], minlength=self.K)
        m2 = np.bincount(R[:, 0], self.cross[:, 0, 0], minlength=self.K)
        return m1, m2


def smoothed_additive_functional(model, theta, data, nu, r: AdditiveFunctional, chunk=256):
    """``sum_t E[r_t | Y_1..Y_n]`` by one scaled forward pass."""
    theta = model.check_theta(theta)
    nu = resolve_nu(model, theta, nu)
    K, Kp = model.K, model.n_tuples
    r0 = np.zeros((Kp, r.dim)) if r.initial is None else np.asarray(r.initial, dtype=float)
    state = RecursionState(
        t=0,
        K=K,
        p_arr=nu.nu.copy(),
        s_arr=r0 * nu.nu[:, None],
        h_arr=None,
        H_arr=None,
        scaled=True,
        log_norm_sum=0.0,
        algorithm="scaled",
        order=1,
    )
    for pe in iter_periods(model, theta, data, r.order, chunk):
        rv = np.asarray(r.func(pe, data), dtype=float)
        state = step_scaled(state, PeriodEvaluation(pe.t, pe.f, rv * pe.f[:, None]))
    return SufficientStats(state.s_arr.sum(axis=0), state.log_norm_sum, n=data.n, theta=theta)


def score_functional(model) -> AdditiveFunctional:
    """``r_t = grad log f_t``; its smoothed sum is the score when ``nu`` is fixed."""
    return AdditiveFunctional(model.d, lambda pe, data: pe.dlogf(), order=1)


# ---------------------------------------------------------------------------
# Gaussian E-step / M-step
# ---------------------------------------------------------------------------


def _lag_matrix(model, data):
    """``(n, L+1)`` array with rows ``(Y_t, Y_{t-1}, ..., Y_{t-L})``."""
    ext = data.extended()
    t = np.arange(1, data.n + 1)
    return np.stack([ext[t - j + model.p - 1] for j in range(model.ar_lags + 1)], axis=1)


def _require_builtin(model):
    if not isinstance(model, GaussianSwitchingModel):
        raise ConfigurationError("EM is only available for the built-in Gaussian models")


def e_step(model, theta, data, nu=None, chunk=256) -> SufficientStats:
    """Per-tuple smoothed weights and moments of ``(Y_t, ..., Y_{t-L})`` in one pass."""
    _require_builtin(model)
    theta = model.check_theta(theta)
    C = model.n_args
    Z = _lag_matrix(model, data)
    q = Z.shape[1]
    width = 1 + q + q * q

    def r(pe, _data):
        z = Z[pe.t - 1]
        feats = np.concatenate([[1.0], z, np.outer(z, z).ravel()])
        out = np.zeros((C, C, width))
        out[np.arange(C), np.arange(C)] = feats
        return out.reshape(C, C * width)

    res = smoothed_additive_functional(model, theta, data, nu, AdditiveFunctional(C * width, r), chunk)
    blocks = res.stats.reshape(C, width)
    return SufficientStats(
        res.stats,
        res.loglik,
        n=data.n,
        theta=theta,
        weights=blocks[:, 0].copy(),
        moments=blocks[:, 1 : 1 + q].copy(),
        cross=blocks[:, 1 + q :].reshape(C, q, q).copy(),
        K=model.K,
        p=model.p,
    )


def _check_occupancy(occ, n):
    for j, o in enumerate(occ):
        if not o > 1e-10 * max(n, 1):
            raise DegenerateRegimeError(j + 1)


def _gaussian_observation_update(model, stats, theta_prev, sweeps=200, tol=1e-13):
    """Maximize the expected observation log-likelihood over means, variances, AR terms."""
    K, L = model.K, model.ar_lags
    R = regime_digits(K, model.p + 1)
    W, M, S = stats.weights, stats.moments, stats.cross
    occ = stats.occupancy
    _check_occupancy(occ, stats.n)
    var_idx = R[:, 0] if model.switching_variance else np.zeros(R.shape[0], dtype=int)
    var_occ = np.bincount(var_idx, W, minlength=model.n_var)

    def centered(mu, phi):
        a = np.concatenate([[1.0], -phi])
        mt = mu[R[:, : L + 1]]  # (C, L+1)
        Sh = S - M[:, :, None] * mt[:, None, :] - mt[:, :, None] * M[:, None, :] + W[:, None, None] * (
            mt[:, :, None] * mt[:, None, :]
        )
        return Sh, a

    if L == 0:
        m1, m2 = stats.regime_moments()
        mu = m1 / occ
        ss = m2 - 2 * mu * m1 + mu**2 * occ
        if model.switching_variance:
            var = ss / occ
        else:
            var = np.array([ss.sum() / occ.sum()])
        return mu, var, np.zeros(0)

    mu = np.asarray(theta_prev[model.idx_mu], dtype=float).copy()
    phi = np.asarray(theta_prev[model.idx_phi], dtype=float).copy()
    var = np.exp(theta_prev[model.idx_var])
    eye = np.eye(K)
    for _ in range(sweeps):
        old = np.concatenate([mu, phi, var])
        lam = 1.0 / var[var_idx]
        # means given AR terms: residual a.z_t - beta_c.mu
        a = np.concatenate([[1.0], -phi])
        beta = eye[R[:, 0]] - sum(phi[j - 1] * eye[R[:, j]] for j in range(1, L + 1))
        A = np.einsum("c,ck,cl->kl", lam * W, beta, beta)
        rhs = np.einsum("c,ck->k", lam * (M @ a), beta)
        mu = np.linalg.solve(A, rhs)
        # AR terms given means
        Sh, _ = centered(mu, phi)
        G = np.einsum("c,cij->ij", lam, Sh[:, 1:, 1:])
        g = np.einsum("c,ci->i", lam, Sh[:, 1:, 0])
        phi = np.linalg.solve(G, g)
        # variances
        Sh, a = centered(mu, phi)
        ss = np.einsum("i,cij,j->c", a, Sh, a)
        var = np.bincount(var_idx, ss, minlength=model.n_var) / var_occ
        if np.max(np.abs(np.concatenate([mu, phi, var]) - old)) < tol:
            break
    return mu, var, phi


def _transition_logits_closed_form(model, stats):
    K = model.K
    N = stats.pair_mass
    rows = N.sum(axis=1)
    for i, rsum in enumerate(rows):
        if not rsum > 1e-10 * max(stats.n, 1):
            raise DegenerateRegimeError(i + 1)
    P = np.maximum(N / rows[:, None], 1e-300)
    logits = np.log(P[:, :-1]) - np.log(P[:, -1:])
    coef = np.zeros((K, K - 1, model.n_slots))
    coef[:, :, 0] = logits
    return coef.ravel()


def _tvtp_transition_update(model, stats, data, nu, max_iter=50, grad_tol=1e-9, chunk=256):
    """Newton ascent on the expected transition log-likelihood.

    Each evaluation of the objective, its gradient and Hessian is itself a
    smoothed additive functional with weights fixed at ``stats.theta``.
    """
    theta_old = stats.theta
    sl = model.idx_trans
    nb = sl.stop - sl.start

    def objective(beta, order):
        th = theta_old.copy()
        th[sl] = beta
        cache = {"t0": 0, "t1": 0, "block": None}

        def block(t0, t1):
            q, dq, d2q = model.transition(th, data, t0, t1, order)
            safe = np.where(q > 0, q, 1.0)
            parts = [np.where(q > 0, np.log(safe), -745.0)[..., None]]
            if order >= 1:
                dlog = dq[..., sl] / safe[..., None]
                parts.append(dlog)
            if order >= 2:
                d2log = d2q[..., sl, sl] / safe[..., None, None] - dlog[..., :, None] * dlog[..., None, :]
                parts.append(d2log.reshape(q.shape + (nb * nb,)))
            return np.concatenate(parts, axis=-1)

        def r(pe, _data):
            if not cache["t0"] <= pe.t < cache["t1"]:
                t1 = min(pe.t + chunk, data.n + 1)
                cache.update(t0=pe.t, t1=t1, block=block(pe.t, t1))
            return cache["block"][pe.t - cache["t0"]]

        dim = 1 + (nb if order >= 1 else 0) + (nb * nb if order >= 2 else 0)
        out = smoothed_additive_functional(model, theta_old, data, nu, AdditiveFunctional(dim, r)).stats
        val = out[0]
        grad = out[1 : 1 + nb] if order >= 1 else None
        hess = out[1 + nb :].reshape(nb, nb) if order >= 2 else None
        return val, grad, hess

    beta = theta_old[sl].copy()
    val, grad, hess = objective(beta, 2)
    for _ in range(max_iter):
        if np.max(np.abs(grad)) <= grad_tol:
            break
        neg = -hess
        lam = 0.0
        while True:
            try:
                np.linalg.cholesky(neg + lam * np.eye(nb))
                break
            except np.linalg.LinAlgError:
                lam = 1e-8 if lam == 0 else 2 * lam
        direction = np.linalg.solve(neg + lam * np.eye(nb), grad)
        # Newton decrement below roundoff of the objective: nothing left to gain
        if grad @ direction <= 1e-13 * max(1.0, abs(val)):
            break
        stepsize = 1.0
        for _ in range(30):
            trial = beta + stepsize * direction
            tval, _, _ = objective(trial, 0)
            if tval >= val:
                break
            stepsize *= 0.5
        else:
            break
        beta = trial
        val, grad, hess = objective(beta, 2)
    return beta


def m_step(model, stats: SufficientStats, data=None, nu=None) -> np.ndarray:
    """Maximize the expected complete-data log-likelihood given E-step statistics.

    Means and variances have closed forms without AR terms; with AR terms the
    update alternates conditional maximizations over means, AR coefficients and
    variances.  Constant transitions use pair-mass ratios.  TVTP coefficients
    need ``data`` and ``nu`` for an inner Newton solve.
    """
    _require_builtin(model)
    theta_prev = stats.theta if stats.theta is not None else np.zeros(model.d)
    mu, var, phi = _gaussian_observation_update(model, stats, theta_prev)
    theta = np.zeros(model.d)
    theta[model.idx_mu] = mu
    theta[model.idx_var] = np.log(var)
    theta[model.idx_phi] = phi
    if model.K > 1:
        if model.tvtp:
            if data is None:
                raise ConfigurationError("TVTP M-step needs the dataset")
            theta[model.idx_trans] = _tvtp_transition_update(model, stats, data, nu)
        else:
            theta[model.idx_trans] = _transition_logits_closed_form(model, stats)
    return theta


@dataclass
class EMResult:
    theta: np.ndarray
    loglik: float
    trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def em_fit(model, theta0, data, nu=None, tol=1e-8, max_iter=500, nu_mode="fixed", chunk=256) -> EMResult:
    """Alternate E- and M-steps until the log-likelihood changes by at most ``tol``.

    ``nu_mode="fixed"`` keeps ``nu`` throughout (EM then cannot decrease the
    likelihood, and a decrease beyond ``1e-10`` raises).  ``"ergodic"`` resets
    ``nu`` to the stationary distribution of the current transitions before
    every E-step; the monotonicity check is skipped in that mode.
    """
    _require_builtin(model)
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    if nu_mode not in ("fixed", "ergodic"):
        raise ConfigurationError("nu_mode must be 'fixed' or 'ergodic'")
    theta = model.check_theta(theta0)
    nu = resolve_nu(model, theta, nu)
    trace = []
    iterations = 0
    converged = False
    while True:
        cur_nu = nu
        if nu_mode == "ergodic":
            erg = default_initial_distribution(model, theta, "ergodic")
            cur_nu = type(nu).fixed(erg.nu, model.d)
        stats = e_step(model, theta, data, cur_nu, chunk)
        ll = stats.loglik
        if trace:
            delta = ll - trace[-1]
            if nu_mode == "fixed" and delta < -MONOTONE_TOL:
                raise InternalConsistencyError(
                    f"EM decreased the log-likelihood by {-delta:.3e} at iteration {iterations}"
                )
            if abs(delta) <= tol:
                trace.append(ll)
                converged = True
                break
        trace.append(ll)
        if iterations >= max_iter:
            break
        if not math.isfinite(ll):
            raise StalledFitError("non-finite log-likelihood in EM", theta=theta, iteration=iterations)
        theta = m_step(model, stats, data, cur_nu)
        iterations += 1
    return EMResult(theta, trace[-1], trace, iterations, converged)
