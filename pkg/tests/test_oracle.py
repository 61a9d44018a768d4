import math

import mpmath
import numpy as np
import pytest
import sympy

from helpers import MeanLogVarModel, fixed_nu, random_instance, rel_err
from rsscore.errors import SizeGuardError
from rsscore.model import Dataset, default_initial_distribution, make_gaussian_switching_model, make_tvtp_model
from rsscore.oracle import (
    brute_force_hessian,
    brute_force_likelihood,
    brute_force_score,
    enumerate_paths,
)


def test_single_regime_likelihood_is_product_of_densities():
    m = make_gaussian_switching_model(1, True, 0)
    theta = np.array([0.5, math.log(0.8)])
    y = np.array([0.2, 1.0, -0.4, 0.9])
    p, ll = brute_force_likelihood(m, theta, Dataset(y, [0.0]))
    dens = np.exp(-((y - 0.5) ** 2) / 1.6) / math.sqrt(2 * math.pi * 0.8)
    assert p == pytest.approx(dens.prod(), rel=1e-14)
    assert ll == pytest.approx(np.log(dens).sum(), rel=1e-14)


def test_one_period_two_regimes_is_four_term_sum():
    m = make_gaussian_switching_model(2, True, 0)
    P = np.array([[0.7, 0.3], [0.4, 0.6]])
    theta = m.pack([-1.0, 2.0], [1.0, 0.5], P)
    y = 0.3
    nu = fixed_nu(m, [0.25, 0.75])
    g = [math.exp(-((y - mu) ** 2) / (2 * v)) / math.sqrt(2 * math.pi * v) for mu, v in ((-1.0, 1.0), (2.0, 0.5))]
    expected = sum(nu.nu[i] * P[i, j] * g[j] for i in range(2) for j in range(2))
    p, _ = brute_force_likelihood(m, theta, Dataset([y], [0.0]), nu)
    assert p == pytest.approx(expected, rel=1e-15)


def _mp_likelihood(m, theta, data, nu):
    """Same path sum in 50-digit arithmetic from natural parameters."""
    mpmath.mp.dps = 50
    nat = m.natural(theta)
    mu, var, P = nat["mu"], nat["variance"], nat["P"]
    K, n = m.K, data.n
    y = [mpmath.mpf(v) for v in data.y]

    def g(j, yt):
        v = mpmath.mpf(var[j])
        return mpmath.exp(-((yt - mpmath.mpf(mu[j])) ** 2) / (2 * v)) / mpmath.sqrt(2 * mpmath.pi * v)

    # forward in high precision is an exact re-summation of all paths
    alpha = [mpmath.mpf(nu.nu[i]) for i in range(K)]
    for t in range(n):
        alpha = [sum(alpha[i] * mpmath.mpf(P[i, j]) for i in range(K)) * g(j, y[t]) for j in range(K)]
    return mpmath.log(sum(alpha))


def test_likelihood_against_high_precision():
    rng = np.random.default_rng(0)
    m = make_gaussian_switching_model(2, True, 0)
    for _ in range(5):
        theta = m.random_theta(rng)
        data, _ = m.simulate(theta, 8, seed=int(rng.integers(1000)))
        nu = default_initial_distribution(m, theta, "ergodic")
        _, ll = brute_force_likelihood(m, theta, data, nu)
        assert abs(ll - float(_mp_likelihood(m, theta, data, nu))) <= 1e-13 * max(1.0, abs(ll))


def test_score_oracle_against_finite_differences_of_likelihood_oracle():
    rng = np.random.default_rng(1)
    m = make_gaussian_switching_model(2, True, 1)
    theta = m.random_theta(rng)
    data, _ = m.simulate(theta, 5, seed=3)
    nu = "uniform"
    score = brute_force_score(m, theta, data, nu)
    fd = np.empty(m.d)
    for j in range(m.d):
        e = np.zeros(m.d)
        e[j] = 1e-6 * max(1.0, abs(theta[j]))
        fd[j] = (brute_force_likelihood(m, theta + e, data, nu)[1] - brute_force_likelihood(m, theta - e, data, nu)[1]) / (
            2 * e[j]
        )
    assert rel_err(score, fd) <= 1e-7


def test_hessian_oracle_against_finite_differences_of_score_oracle():
    rng = np.random.default_rng(2)
    m = make_tvtp_model(2, 1, True, 0)
    theta = m.random_theta(rng)
    data, _ = m.simulate(theta, 5, seed=4)
    hess = brute_force_hessian(m, theta, data)
    assert np.abs(hess - hess.T).max() <= 1e-12 * max(1.0, np.abs(hess).max())
    fd = np.empty((m.d, m.d))
    for j in range(m.d):
        e = np.zeros(m.d)
        e[j] = 1e-6 * max(1.0, abs(theta[j]))
        fd[:, j] = (brute_force_score(m, theta + e, data) - brute_force_score(m, theta - e, data)) / (2 * e[j])
    assert rel_err(hess, fd) <= 1e-6


def test_single_regime_two_periods_score_is_sum_of_log_gradients():
    m = make_gaussian_switching_model(1, True, 0)
    theta = np.array([0.3, 0.2])
    y = np.array([1.0, -0.5])
    v = math.exp(0.2)
    e = y - 0.3
    expected = [e.sum() / v, (-0.5 + e**2 / (2 * v)).sum()]
    assert brute_force_score(m, theta, Dataset(y, [0.0])) == pytest.approx(expected, rel=1e-14)


def test_unused_coordinate_has_zero_score_and_hessian_row():
    m = make_tvtp_model(2, 1, True, 0)
    theta = m.random_theta(np.random.default_rng(3))
    data = Dataset([0.2, -0.1, 0.8], [0.0], np.zeros((3, 1)))
    res = enumerate_paths(m, theta, data)
    for name in m.param_names:
        if name.endswith("_x1"):
            j = m.param_names.index(name)
            assert res.score[j] == 0.0
            assert np.all(res.hessian[j] == 0.0)


def test_symbolic_hessian_for_one_parameter_model():
    m = MeanLogVarModel()
    y_val, th_val = 0.7, -0.3
    th, y = sympy.symbols("theta y", real=True)
    loglik = -sympy.log(2 * sympy.pi) / 2 - th / 2 - (y - th) ** 2 / (2 * sympy.exp(th))
    subs = {th: th_val, y: y_val}
    score = float(sympy.diff(loglik, th).subs(subs))
    hess = float(sympy.diff(loglik, th, 2).subs(subs))
    res = enumerate_paths(m, np.array([th_val]), Dataset([y_val], [0.0]))
    assert res.n_paths == 1
    assert abs(res.loglik - float(loglik.subs(subs))) <= 1e-12
    assert abs(res.score[0] - score) <= 1e-12
    assert abs(res.hessian[0, 0] - hess) <= 1e-12


def test_size_guard_and_path_count():
    m = make_gaussian_switching_model(2, True, 2)
    theta = m.random_theta(np.random.default_rng(4))
    data, _ = m.simulate(theta, 6, seed=0)
    assert enumerate_paths(m, theta, data, order=0).n_paths == 2**8
    with pytest.raises(SizeGuardError):
        enumerate_paths(m, theta, data, limit=100)


def test_result_independent_of_chunk_boundaries(monkeypatch):
    import rsscore.oracle as oracle

    rng = np.random.default_rng(5)
    m, theta, data, nu = random_instance(rng, "gaussian", 3, 1, 6)
    a = oracle.enumerate_paths(m, theta, data, nu)
    monkeypatch.setattr(oracle, "CHUNK", 37)
    b = oracle.enumerate_paths(m, theta, data, nu)
    assert rel_err(a.loglik, b.loglik) <= 1e-14
    assert rel_err(a.score, b.score) <= 1e-13
    assert rel_err(a.hessian, b.hessian) <= 1e-13
