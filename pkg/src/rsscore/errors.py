"""Exception hierarchy shared by all modules."""


class RegimeSwitchingError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(RegimeSwitchingError, ValueError):
    """Invalid model, data or run configuration."""


class NormalizationError(ConfigurationError):
    """A probability vector does not sum to one or has out-of-range entries."""


class UnsupportedModeError(ConfigurationError):
    """The requested mode is not available for this model."""


class NumericalError(RegimeSwitchingError):
    """Base class for failures of the numerical routines."""


class ModelEvaluationError(NumericalError):
    def __init__(self, message, t=None, regimes=None):
        self.t = t
        self.regimes = regimes
        detail = []
        if t is not None:
            detail.append(f"t={t}")
        if regimes is not None:
            detail.append(f"regimes={tuple(int(r) for r in regimes)}")
        super().__init__(message + (f" ({', '.join(detail)})" if detail else ""))


class ImpossibleLikelihoodError(NumericalError):
    """Every regime path assigns zero density to the data."""

    def __init__(self, t):
        self.t = t
        super().__init__(f"zero period likelihood under every regime path at t={t}")


class LikelihoodUnderflowError(NumericalError):
    def __init__(self, t=None):
        self.t = t
        super().__init__(
            "likelihood underflowed (below the smallest normal double) in the unscaled recursion; "
            "use the 'hybrid' or 'scaled' algorithm"
        )


class DegenerateRegimeError(NumericalError):
    def __init__(self, regime):
        self.regime = regime
        super().__init__(f"regime {regime} has zero expected occupancy")


class StalledFitError(NumericalError):
    def __init__(self, message, theta=None, iteration=None):
        self.theta = theta
        self.iteration = iteration
        super().__init__(message)


class NonInvertibleInformationError(NumericalError):
    def __init__(self, min_eigenvalue):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(
            f"negative Hessian is not positive definite (min eigenvalue {min_eigenvalue:.3e})"
        )


class InternalConsistencyError(RegimeSwitchingError):
    """An invariant guaranteed by theory was violated; indicates a bug."""


class SizeGuardError(RegimeSwitchingError):
    def __init__(self, n_paths, limit):
        self.n_paths = n_paths
        self.limit = limit
        super().__init__(f"path enumeration needs {n_paths} paths, limit is {limit}")
