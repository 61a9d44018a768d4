"""Forward-only likelihood, score and Hessian for Markov regime-switching models."""

__version__ = "0.1.0"

from .baseline import baseline_loglik_score, hamilton_filter, kim_smoother, smoothed_score
from .em import AdditiveFunctional, e_step, em_fit, m_step, smoothed_additive_functional
from .errors import *  # noqa: F401,F403
from .estimation import FitResult, canonicalize, gradient_check, newton_fit, standard_errors
from .model import (
    Dataset,
    GaussianSwitchingModel,
    InitialDistribution,
    RegimeSwitchingModel,
    default_initial_distribution,
    make_gaussian_switching_model,
    make_tvtp_model,
    simulate,
)
from .oracle import brute_force_hessian, brute_force_likelihood, brute_force_score, enumerate_paths
from .recursion import HybridConfig, ScoreHessianResult, loglik_score_hessian
