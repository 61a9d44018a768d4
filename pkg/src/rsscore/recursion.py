"""Forward recursions for the log-likelihood, score and Hessian.

All three algorithms carry, for every regime tuple ``S_t``, the partial sums

* ``p_t``  -- likelihood of the data up to ``t`` jointly with the tuple,
* ``s_t``  -- its gradient,
* ``H_t``  -- paths carrying one second derivative of a single period factor,
* ``h_t``  -- paths carrying first derivatives of two distinct factors,
  the earlier one on the left (so ``h_t`` is not symmetric),

and marginalize the oldest regime ``S_{t-p}`` while multiplying in the new
period factor.  The likelihood Hessian is ``(H + h + h^T) / p - s s^T / p^2``.
The scaled variant divides all four arrays by the period normalizer ``c_t``
after every step; the hybrid variant runs unscaled until the running
likelihood drops to ``B * eps`` and then switches to scaling for good.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ImpossibleLikelihoodError, LikelihoodUnderflowError
from .model import InitialDistribution, iter_periods, resolve_nu

ALGORITHMS = ("unscaled", "scaled", "hybrid")
TINY = np.finfo(float).tiny  # smallest normal double


@dataclass(frozen=True)
class HybridConfig:
    B: float = 1000.0
    eps: float = float(np.finfo(np.float64).eps)

    def __post_init__(self):
        if not self.B >= 1:
            raise ConfigurationError("B must be at least 1")
        if not self.eps > 0:
            raise ConfigurationError("eps must be positive")

    @property
    def threshold(self) -> float:
        return self.B * self.eps


@dataclass
class RecursionState:
    t: int
    K: int
    p_arr: np.ndarray
    s_arr: Optional[np.ndarray]
    h_arr: Optional[np.ndarray]
    H_arr: Optional[np.ndarray]
    scaled: bool
    log_norm_sum: float
    algorithm: str
    order: int
    switched_at: Optional[int] = None

    @property
    def nbytes(self) -> int:
        """Bytes held by the state arrays; independent of the series length."""
        return sum(a.nbytes for a in (self.p_arr, self.s_arr, self.h_arr, self.H_arr) if a is not None)


@dataclass
class ScoreHessianResult:
    loglik: float
    score: Optional[np.ndarray]
    hessian: Optional[np.ndarray]
    switched_at: Optional[int] = None
    underflow: bool = False
    algorithm: str = "hybrid"
    order: int = 2
    state_nbytes: int = 0
    diagnostics: dict = field(default_factory=dict)


def _check_algorithm(algorithm: str) -> None:
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")


def start_state(nu: InitialDistribution, K: int, order: int, algorithm: str) -> RecursionState:
    """State at ``t = 0``: the initial distribution plays the role of ``p_0``.

    With ``p_0 = nu``, ``s_0 = grad nu``, ``H_0 = hess nu`` and ``h_0 = 0``, one
    ordinary step reproduces the ``t = 1`` initialization exactly.
    """
    _check_algorithm(algorithm)
    if order not in (0, 1, 2):
        raise ConfigurationError("order must be 0, 1 or 2")
    d = nu.grad_nu.shape[1]
    size = nu.nu.size
    return RecursionState(
        t=0,
        K=K,
        p_arr=nu.nu.copy(),
        s_arr=nu.grad_nu.copy() if order >= 1 else None,
        h_arr=np.zeros((size, d, d)) if order >= 2 else None,
        H_arr=nu.hess_nu.copy() if order >= 2 else None,
        # nu sums to one, so the t=0 state is already normalized
        scaled=algorithm == "scaled",
        log_norm_sum=0.0,
        algorithm=algorithm,
        order=order,
    )


def _propagate(state: RecursionState, pe):
    """One unnormalized update, summing out the oldest regime."""
    K = state.K
    Kp = state.p_arr.size
    f = pe.f.reshape(K, Kp)
    p_prev = state.p_arr
    p_new = (f * p_prev).reshape(Kp, K).sum(axis=1)
    s_new = h_new = H_new = None
    if state.order >= 1:
        d = state.s_arr.shape[1]
        s_prev = state.s_arr
        df = pe.df.reshape(K, Kp, d)
        s_new = (f[..., None] * s_prev + p_prev[:, None] * df).reshape(Kp, K, d).sum(axis=1)
        if state.order >= 2:
            d2f = pe.d2f.reshape(K, Kp, d, d)
            fb = f[..., None, None]
            h_new = (fb * state.h_arr + s_prev[:, :, None] * df[:, :, None, :]).reshape(
                Kp, K, d, d
            ).sum(axis=1)
            H_new = (fb * state.H_arr + p_prev[:, None, None] * d2f).reshape(Kp, K, d, d).sum(axis=1)
    return p_new, s_new, h_new, H_new


def _divide(arrays, c):
    return tuple(None if a is None else a / c for a in arrays)


def step_unscaled(state: RecursionState, pe) -> RecursionState:
    if state.scaled:
        raise ConfigurationError("step_unscaled called on a scaled state")
    if pe.t != state.t + 1:
        raise ConfigurationError(f"expected period {state.t + 1}, got {pe.t}")
    p, s, h, H = _propagate(state, pe)
    return replace(state, t=pe.t, p_arr=p, s_arr=s, h_arr=h, H_arr=H)


def step_scaled(state: RecursionState, pe) -> RecursionState:
    if not state.scaled:
        raise ConfigurationError("step_scaled called on an unscaled state")
    if pe.t != state.t + 1:
        raise ConfigurationError(f"expected period {state.t + 1}, got {pe.t}")
    p, s, h, H = _propagate(state, pe)
    c = p.sum()
    if not c > 0:
        raise ImpossibleLikelihoodError(pe.t)
    p, s, h, H = _divide((p, s, h, H), c)
    return replace(
        state, t=pe.t, p_arr=p, s_arr=s, h_arr=h, H_arr=H, log_norm_sum=state.log_norm_sum + math.log(c)
    )


def step_hybrid(state: RecursionState, pe, cfg: HybridConfig = HybridConfig()) -> RecursionState:
    if state.scaled:
        return step_scaled(state, pe)
    new = step_unscaled(state, pe)
    total = new.p_arr.sum()
    if total <= cfg.threshold:
        if not total > 0:
            raise ImpossibleLikelihoodError(pe.t)
        p, s, h, H = _divide((new.p_arr, new.s_arr, new.h_arr, new.H_arr), total)
        new = replace(
            new,
            p_arr=p,
            s_arr=s,
            h_arr=h,
            H_arr=H,
            scaled=True,
            log_norm_sum=math.log(total),
            switched_at=pe.t,
        )
    return new


def step(state: RecursionState, pe, cfg: HybridConfig = HybridConfig()) -> RecursionState:
    if state.algorithm == "hybrid":
        return step_hybrid(state, pe, cfg)
    if state.algorithm == "scaled":
        return step_scaled(state, pe)
    return step_unscaled(state, pe)


def init_state(model, theta, data, nu, order=2, algorithm="hybrid", cfg=HybridConfig()):
    """State after the ``t = 1`` initialization.

    The presample tuple carries ``nu``; for ``p = 1`` that tuple is ``S_0``
    itself, so ``p_1(S_1) = sum_{S_0} nu(S_0) f_1(S_1, S_0)``.
    """
    from .model import evaluate_period

    state = start_state(nu, model.K, order, algorithm)
    return step(state, evaluate_period(model, theta, data, 1, order), cfg)


def finalize(state: RecursionState, raise_on_underflow: bool = True) -> ScoreHessianResult:
    """Collapse the per-tuple arrays into log-likelihood, score and Hessian."""
    order = state.order
    s_sum = None if state.s_arr is None else state.s_arr.sum(axis=0)
    if order >= 2:
        h_sum = state.h_arr.sum(axis=0)
        second = state.H_arr.sum(axis=0) + h_sum + h_sum.T
    common = dict(
        switched_at=state.switched_at,
        algorithm=state.algorithm,
        order=order,
        state_nbytes=state.nbytes,
    )
    if state.scaled:
        score = s_sum
        hess = None
        if order >= 2:
            hess = second - np.outer(score, score)
            hess = 0.5 * (hess + hess.T)
        return ScoreHessianResult(state.log_norm_sum, score, hess, **common)

    total = state.p_arr.sum()
    # subnormal totals have already lost relative precision, so they count as underflow
    if not (total >= TINY and np.isfinite(total)):
        if raise_on_underflow:
            raise LikelihoodUnderflowError(state.t)
        nan_s = None if order < 1 else np.full_like(s_sum, np.nan)
        nan_h = None if order < 2 else np.full_like(second, np.nan)
        return ScoreHessianResult(-math.inf, nan_s, nan_h, underflow=True, **common)
    score = hess = None
    if order >= 1:
        score = s_sum / total
    if order >= 2:
        hess = second / total - np.outer(score, score)
        hess = 0.5 * (hess + hess.T)
    return ScoreHessianResult(math.log(total), score, hess, **common)


def run_forward(model, theta, data, nu=None, order=2, algorithm="hybrid", cfg=HybridConfig(), chunk=256):
    """Drive the recursion over ``t = 1..n`` and return the final state."""
    theta = model.check_theta(theta)
    nu = resolve_nu(model, theta, nu)
    state = start_state(nu, model.K, order, algorithm)
    for pe in iter_periods(model, theta, data, order, chunk):
        state = step(state, pe, cfg)
    return state


def loglik_score_hessian(
    model,
    theta,
    data,
    nu: Optional[InitialDistribution] = None,
    order: int = 2,
    algorithm: str = "hybrid",
    cfg: HybridConfig = HybridConfig(),
    chunk: int = 256,
    raise_on_underflow: bool = True,
) -> ScoreHessianResult:
    """Log-likelihood (order 0), score (1) and Hessian (2) in one forward pass.

    ``nu`` defaults to the uniform initial distribution.  Memory use is the
    recursion state plus one block of ``chunk`` period evaluations.
    """
    state = run_forward(model, theta, data, nu, order, algorithm, cfg, chunk)
    return finalize(state, raise_on_underflow)
