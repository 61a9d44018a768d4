import math

import numpy as np
import pytest

import rsscore.estimation as estimation
from helpers import CorruptedModel, MeanLogVarModel, random_instance, random_nu_spec, rel_err
from rsscore.errors import ConfigurationError, NonInvertibleInformationError, StalledFitError
from rsscore.estimation import (
    _ridge_direction,
    canonical_permutation,
    canonicalize,
    canonicalize_fit,
    gradient_check,
    newton_fit,
    standard_errors,
)
from rsscore.model import Dataset, make_gaussian_switching_model
from rsscore.recursion import loglik_score_hessian


def _two_regime(n=2000, seed=11):
    m = make_gaussian_switching_model(2, True, 0)
    theta = m.pack([-1.0, 1.5], [1.0, 0.5], np.array([[0.95, 0.05], [0.1, 0.9]]))
    data, _ = m.simulate(theta, n, seed=seed)
    return m, theta, data


def test_single_regime_closed_form():
    rng = np.random.default_rng(0)
    y = rng.normal(0.7, 1.3, size=500)
    m = make_gaussian_switching_model(1, True, 0)
    fit = newton_fit(m, [0.0, 0.0], Dataset(y, [0.0]))
    assert fit.converged
    mu_hat, var_hat = y.mean(), y.var()
    assert fit.theta_hat[0] == pytest.approx(mu_hat, abs=1e-8)
    assert fit.theta_hat[1] == pytest.approx(math.log(var_hat), abs=1e-8)
    assert fit.standard_errors[0] == pytest.approx(math.sqrt(var_hat / y.size), rel=1e-6)
    assert fit.standard_errors[1] == pytest.approx(math.sqrt(2.0 / y.size), rel=1e-6)


def test_custom_model_fit():
    rng = np.random.default_rng(1)
    y = rng.normal(0.5, math.exp(0.25), size=300)
    fit = newton_fit(MeanLogVarModel(), [0.0], Dataset(y, [0.0]), grad_tol=1e-10)
    assert fit.converged and fit.score_norm <= 1e-10


def test_two_regime_fit_reaches_a_maximum():
    m, theta, data = _two_regime()
    fit = newton_fit(m, theta + 0.3, data)
    assert fit.converged and fit.score_norm <= 1e-6
    assert fit.loglik >= loglik_score_hessian(m, theta, data, order=0).loglik - 1e-9
    assert np.all(np.linalg.eigvalsh(fit.hessian) < 0)
    # log-likelihood along the accepted path never decreases
    lls = [ll for ll, _ in fit.path]
    assert np.all(np.diff(lls) >= 0)
    again = newton_fit(m, fit.theta_hat, data)
    assert again.iterations <= 1


def test_standard_errors_formula_and_checks():
    H = -np.array([[4.0, 1.0], [1.0, 2.0]])
    se, vcov = standard_errors(H)
    inv = np.linalg.inv(-H)
    assert np.allclose(vcov, inv, rtol=1e-14) and np.array_equal(vcov, vcov.T)
    assert np.allclose(se, np.sqrt(np.diag(inv)), rtol=1e-14)
    with pytest.raises(NonInvertibleInformationError):
        standard_errors(np.array([[1.0, 0.0], [0.0, -1.0]]))


def test_standard_errors_match_finite_difference_hessian():
    m, theta, data = _two_regime(n=1500, seed=12)
    fit = newton_fit(m, theta, data)
    rep = gradient_check(m, fit.theta_hat, data, step=1e-5)
    se_fd, _ = standard_errors(rep.fd_hessian)
    assert np.max(np.abs(fit.standard_errors / se_fd - 1)) <= 1e-3


def test_ridge_direction_on_indefinite_hessian():
    H = np.array([[1.0, 0.0], [0.0, -2.0]])
    g = np.array([1.0, 1.0])
    x, lam = _ridge_direction(H, g)
    assert lam > 1.0  # must lift the positive eigenvalue of H
    assert g @ x > 0
    x0, lam0 = _ridge_direction(-np.eye(2), g)
    assert lam0 == 0.0 and np.allclose(x0, g)


def test_stalled_line_search(monkeypatch):
    m, theta, data = _two_regime(n=100)
    real = estimation.loglik_score_hessian

    def lying(model, th, dat, nu, order, *args):
        res = real(model, th, dat, nu, order, *args)
        if order == 0:
            res.loglik -= 1e6  # every trial point looks worse
        return res

    monkeypatch.setattr(estimation, "loglik_score_hessian", lying)
    with pytest.raises(StalledFitError) as info:
        newton_fit(m, theta + 0.5, data)
    assert info.value.iteration == 0


def test_fit_argument_validation():
    m, theta, data = _two_regime(n=20)
    with pytest.raises(ConfigurationError):
        newton_fit(m, theta, data, grad_tol=0.0)
    with pytest.raises(ConfigurationError):
        newton_fit(m, theta, data, max_iter=-1)
    with pytest.raises(ConfigurationError):
        gradient_check(m, theta, data, step=0.0)


def test_max_iter_zero_reports_not_converged():
    m, theta, data = _two_regime(n=200)
    fit = newton_fit(m, theta + 1.0, data, max_iter=0)
    assert not fit.converged and fit.iterations == 0


def test_canonicalization_sorts_means_and_preserves_likelihood():
    m, theta, data = _two_regime(n=500)
    swapped = m.permute_regimes(theta, [1, 0])
    assert list(canonical_permutation(m, swapped)) == [1, 0]
    assert np.allclose(canonicalize(m, swapped), theta, atol=1e-12)
    fit = newton_fit(m, swapped, data)
    canon = canonicalize_fit(m, fit, data)
    assert canon.theta_hat[0] < canon.theta_hat[1]
    assert canon.loglik == pytest.approx(fit.loglik, abs=1e-9)
    ref = newton_fit(m, theta, data)
    assert rel_err(canon.standard_errors, ref.standard_errors) <= 1e-5


def test_gradient_check_passes_on_random_instances(rng):
    for _ in range(10):
        K = int(rng.integers(1, 4))
        fam = "tvtp" if K > 1 and rng.random() < 0.5 else "gaussian"
        m, theta, data, _ = random_instance(rng, fam, K, int(rng.integers(1, 3)), int(rng.integers(5, 60)))
        rep = gradient_check(m, theta, data, random_nu_spec(m, rng))
        assert rep.passed, rep.flagged


def test_gradient_check_flags_corrupted_coordinate():
    m = CorruptedModel(2, True, 0)
    theta = m.pack([-1.0, 1.0], [1.0, 0.8], np.array([[0.9, 0.1], [0.2, 0.8]]))
    data, _ = m.simulate(theta, 100, seed=3)
    rep = gradient_check(m, theta, data)
    assert not rep.passed
    assert "mu2" in rep.flagged
    # only the corrupted coordinate fails the score check; the Hessian error spreads through the s s' term
    bad = [m.param_names[i] for i in np.flatnonzero(rep.score_rel_err > rep.score_tol)]
    assert bad == ["mu2"]


def test_finite_difference_error_has_a_v_shape():
    m = make_gaussian_switching_model(2, True, 0)
    theta = m.random_theta(np.random.default_rng(0))
    data, _ = m.simulate(theta, 200, seed=1)
    steps = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7]
    errs = [gradient_check(m, theta, data, step=s).max_hessian_err for s in steps]
    best = int(np.argmin(errs))
    assert 0 < best < len(steps) - 1  # truncation dominates on the left, roundoff on the right
    assert errs[steps.index(1e-5)] <= 1e-4
