"""Exception hierarchy for the PLN toolkit."""

import numpy as np


class PLNError(Exception):
    """Base class for every error raised by this package."""


class DatasetError(PLNError, ValueError):
    """Invalid counts, covariates or offsets.

    ``row`` and ``col`` locate the offending cell when known (0-based).
    """

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class RankDeficiencyError(DatasetError):
    """The covariate matrix does not have full column rank."""


class ParameterDomainError(PLNError, ValueError):
    """Model parameters outside their domain (e.g. a non-SPD precision)."""


class NumericOverflowError(PLNError, ArithmeticError):
    """An exponentiated rate exceeded the overflow guard."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ProfilingError(PLNError, RuntimeError):
    """Newton profiling of the variational parameters did not converge."""

    def __init__(self, message, row=None, grad_norm=None):
        super().__init__(message)
        self.row = row
        self.grad_norm = grad_norm


class SPDRepairError(PLNError, np.linalg.LinAlgError):
    """Jitter escalation failed to make a covariance matrix SPD."""


class SingularMatrixError(PLNError, np.linalg.LinAlgError):
    """A matrix that must be inverted is singular or not definite."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class SamplingError(PLNError, ArithmeticError):
    """A Poisson rate exceeded the sampling guard."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index
