"""Maximum likelihood by damped Newton on the exact Hessian, plus inference helpers.

Every model parameter is already unconstrained (log variances, logit
transition coefficients), so the score and Hessian coming out of the forward
recursion are used as they are; the reparameterization Jacobian is the
identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    ConfigurationError,
    NonInvertibleInformationError,
    RegimeSwitchingError,
    StalledFitError,
)
from .model import resolve_nu
from .recursion import HybridConfig, loglik_score_hessian

RIDGE_START = 1e-8
MAX_HALVINGS = 30


@dataclass
class FitResult:
    theta_hat: np.ndarray
    loglik: float
    score_norm: float
    standard_errors: Optional[np.ndarray]
    vcov: Optional[np.ndarray]
    converged: bool
    iterations: int
    path: list = field(default_factory=list)  # (loglik, step size) per accepted iterate
    score: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


def _nu_for(model, theta, nu):
    # a mode name is re-resolved at every theta so ergodic nu moves with it
    return nu if isinstance(nu, str) or nu is None else resolve_nu(model, theta, nu)


def _ridge_direction(hessian, score):
    """Solve ``(-H + lam I) x = score`` with the smallest doubling ``lam`` that works."""
    A = -0.5 * (hessian + hessian.T)
    d = A.shape[0]
    lam = 0.0
    while True:
        try:
            L = np.linalg.cholesky(A + lam * np.eye(d))
        except np.linalg.LinAlgError:
            lam = RIDGE_START if lam == 0.0 else 2.0 * lam
            if lam > 1e300:
                raise
            continue
        y = np.linalg.solve(L, score)
        return np.linalg.solve(L.T, y), lam


def standard_errors(hessian):
    """Return ``(se, vcov)`` from the inverse of the observed information ``-H``."""
    info = -0.5 * (np.asarray(hessian, dtype=float) + np.asarray(hessian, dtype=float).T)
    eig = np.linalg.eigvalsh(info)
    scale = max(1.0, float(np.abs(eig).max()))
    if not np.all(np.isfinite(eig)) or eig.min() <= 1e-14 * scale:
        raise NonInvertibleInformationError(float(eig.min()))
    vcov = np.linalg.inv(info)
    vcov = 0.5 * (vcov + vcov.T)
    return np.sqrt(np.diag(vcov)), vcov


def newton_fit(
    model,
    theta0,
    data,
    nu=None,
    grad_tol: float = 1e-6,
    max_iter: int = 100,
    algorithm: str = "hybrid",
    cfg: HybridConfig = HybridConfig(),
    chunk: int = 256,
) -> FitResult:
    """Damped Newton ascent on the log-likelihood.

    Each iteration solves for the Newton direction (ridge-regularized when
    ``-H`` is not positive definite) and halves the step until the
    log-likelihood does not decrease.  ``nu`` may be a mode name such as
    ``"ergodic"``, in which case it is recomputed at every trial point.
    """
    if not grad_tol > 0:
        raise ConfigurationError("grad_tol must be positive")
    if max_iter < 0:
        raise ConfigurationError("max_iter must be non-negative")
    theta = model.check_theta(theta0).copy()
    res = loglik_score_hessian(model, theta, data, _nu_for(model, theta, nu), 2, algorithm, cfg, chunk)
    path = [(res.loglik, 0.0)]
    ridge_used = []
    iterations = 0
    converged = False
    while True:
        score_norm = float(np.max(np.abs(res.score))) if res.score.size else 0.0
        if score_norm <= grad_tol:
            converged = True
            break
        if iterations >= max_iter:
            break
        direction, lam = _ridge_direction(res.hessian, res.score)
        ridge_used.append(lam)
        step = 1.0
        accepted = None
        for _ in range(MAX_HALVINGS + 1):
            trial = theta + step * direction
            try:
                ll = loglik_score_hessian(
                    model, trial, data, _nu_for(model, trial, nu), 0, algorithm, cfg, chunk
                ).loglik
            except (RegimeSwitchingError, FloatingPointError):
                ll = -math.inf
            if math.isfinite(ll) and ll >= res.loglik:
                accepted = trial
                break
            step *= 0.5
        if accepted is None:
            raise StalledFitError(
                f"line search found no ascent after {MAX_HALVINGS} halvings",
                theta=theta,
                iteration=iterations,
            )
        theta = accepted
        res = loglik_score_hessian(model, theta, data, _nu_for(model, theta, nu), 2, algorithm, cfg, chunk)
        iterations += 1
        path.append((res.loglik, step))

    se = vcov = None
    diagnostics = {"ridge": ridge_used, "switched_at": res.switched_at}
    try:
        se, vcov = standard_errors(res.hessian)
    except NonInvertibleInformationError as exc:
        diagnostics["standard_errors"] = str(exc)
    return FitResult(
        theta_hat=theta,
        loglik=res.loglik,
        score_norm=score_norm,
        standard_errors=se,
        vcov=vcov,
        converged=converged,
        iterations=iterations,
        path=path,
        score=res.score,
        hessian=res.hessian,
        diagnostics=diagnostics,
    )


def canonical_permutation(model, theta) -> np.ndarray:
    """Regime order that sorts the means ascending (ties keep their order)."""
    return np.argsort(np.asarray(theta)[model.idx_mu], kind="stable")


def canonicalize(model, theta) -> np.ndarray:
    return model.permute_regimes(theta, canonical_permutation(model, theta))


def canonicalize_fit(model, fit: FitResult, data, nu=None, algorithm="hybrid") -> FitResult:
    """Relabel a fit by ascending means and recompute its Hessian and errors there.

    Transition logits change reference category under a relabeling, so the
    standard errors cannot simply be permuted.
    """
    theta = canonicalize(model, fit.theta_hat)
    res = loglik_score_hessian(model, theta, data, _nu_for(model, theta, nu), 2, algorithm)
    se = vcov = None
    diagnostics = dict(fit.diagnostics)
    try:
        se, vcov = standard_errors(res.hessian)
    except NonInvertibleInformationError as exc:
        diagnostics["standard_errors"] = str(exc)
    return FitResult(
        theta_hat=theta,
        loglik=res.loglik,
        score_norm=float(np.max(np.abs(res.score))),
        standard_errors=se,
        vcov=vcov,
        converged=fit.converged,
        iterations=fit.iterations,
        path=list(fit.path),
        score=res.score,
        hessian=res.hessian,
        diagnostics=diagnostics,
    )


@dataclass
class GradientReport:
    step: float
    score: np.ndarray
    fd_score: np.ndarray
    score_rel_err: np.ndarray  # per coordinate
    hessian: np.ndarray
    fd_hessian: np.ndarray
    hessian_rel_err: np.ndarray  # per row, max over columns
    score_tol: float
    hessian_tol: float
    flagged: list  # parameter names failing either check

    @property
    def passed(self) -> bool:
        return not self.flagged

    @property
    def max_score_err(self) -> float:
        return float(self.score_rel_err.max()) if self.score_rel_err.size else 0.0

    @property
    def max_hessian_err(self) -> float:
        return float(self.hessian_rel_err.max()) if self.hessian_rel_err.size else 0.0


def relative_error(analytic, reference):
    analytic = np.asarray(analytic, dtype=float)
    reference = np.asarray(reference, dtype=float)
    return np.abs(analytic - reference) / np.maximum(1.0, np.abs(reference))


def gradient_check(
    model,
    theta,
    data,
    nu=None,
    step: float = 1e-5,
    score_tol: float = 1e-5,
    hessian_tol: float = 1e-4,
    algorithm: str = "hybrid",
) -> GradientReport:
    """Compare the analytic score and Hessian with central differences.

    The score is checked against differences of the log-likelihood and the
    Hessian against differences of the analytic score, with steps scaled by
    ``max(1, |theta_i|)``.  Pass ``nu`` as a mode name when it depends on theta.
    """
    if not step > 0:
        raise ConfigurationError("step must be positive")
    theta = model.check_theta(theta).astype(float)
    d = theta.size

    def run(th, order):
        return loglik_score_hessian(model, th, data, _nu_for(model, th, nu), order, algorithm)

    base = run(theta, 2)
    fd_score = np.empty(d)
    fd_hess = np.empty((d, d))
    for i in range(d):
        h = step * max(1.0, abs(theta[i]))
        e = np.zeros(d)
        e[i] = h
        up, down = run(theta + e, 1), run(theta - e, 1)
        fd_score[i] = (up.loglik - down.loglik) / (2 * h)
        fd_hess[i] = (up.score - down.score) / (2 * h)
    fd_hess = 0.5 * (fd_hess + fd_hess.T)
    s_err = relative_error(base.score, fd_score)
    h_err = relative_error(base.hessian, fd_hess).max(axis=1) if d else np.zeros(0)
    names = list(model.param_names)
    flagged = [names[i] for i in range(d) if s_err[i] > score_tol or h_err[i] > hessian_tol]
    return GradientReport(
        step, base.score, fd_score, s_err, base.hessian, fd_hess, h_err, score_tol, hessian_tol, flagged
    )
