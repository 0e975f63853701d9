"""scikit-learn compatible front end for the variational PLN fit."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import CountDataset, ModelParams, VariationalParams, elbo_rows
from .fit import FitConfig, fit, profile_all
from .variance import METHODS, variance_report


def check_counts(Y, n_samples=None):
    """Validate a count matrix; returns a float array of nonnegative integers."""
    Y = check_array(Y, dtype=np.float64, ensure_2d=False)
    if Y.ndim == 1:
        Y = Y[:, None]
    if n_samples is not None and Y.shape[0] != n_samples:
        raise ValueError(f"counts have {Y.shape[0]} rows, expected {n_samples}")
    if np.any(Y < 0) or np.any(Y != np.round(Y)):
        raise ValueError("counts must be nonnegative integers")
    return Y


def check_offsets(offsets, shape):
    if offsets is None:
        return np.zeros(shape)
    offsets = check_array(offsets, dtype=np.float64, ensure_2d=False)
    if offsets.ndim == 1:
        offsets = offsets[:, None]
    if offsets.shape != shape:
        raise ValueError(f"offsets have shape {offsets.shape}, expected {shape}")
    return offsets


class PLNRegressor(BaseEstimator):
    """Multivariate Poisson-lognormal regression fitted by variational EM.

    ``fit(X, Y)`` takes covariates ``X`` (n x m, include an intercept column
    if wanted) and counts ``Y`` (n x p). After fitting, ``coef_`` holds the
    ``m x p`` regression matrix and ``covariance_`` the latent covariance.
    Standard errors come from :meth:`variance` or :meth:`confidence_intervals`.

    Parameters
    ----------
    tol : float
        Relative change of the lower bound that stops the outer loop.
    max_iter : int
        Cap on outer iterations; reaching it leaves ``converged_`` False.
    psi_tol : float
        Gradient-norm tolerance of the per-row variational profiling.
    max_psi_iter : int
        Newton iteration cap for the profiling.
    sigma_tol : float
        Relative gap allowed between ``covariance_`` and its closed-form update.
    b_step : {"joint", "column"}
        Joint Newton on ``(B, M, log S)`` or column-wise Newton on ``B``.
    warm_start : bool
        Start from the previous solution when refitting data of the same shape.
    """

    def __init__(
        self,
        tol=1e-8,
        max_iter=500,
        psi_tol=1e-8,
        max_psi_iter=100,
        sigma_tol=1e-8,
        b_step="joint",
        warm_start=False,
    ):
        self.tol = tol
        self.max_iter = max_iter
        self.psi_tol = psi_tol
        self.max_psi_iter = max_psi_iter
        self.sigma_tol = sigma_tol
        self.b_step = b_step
        self.warm_start = warm_start

    def _config(self):
        return FitConfig(
            outer_tol=self.tol,
            max_outer_iters=self.max_iter,
            psi_grad_tol=self.psi_tol,
            max_psi_iters=self.max_psi_iter,
            sigma_tol=self.sigma_tol,
        )

    def _dataset(self, X, Y, offsets):
        X = check_array(X, dtype=np.float64)
        Y = check_counts(Y, X.shape[0])
        return CountDataset(Y, X, check_offsets(offsets, Y.shape))

    def fit(self, X, Y, offsets=None):
        if self.b_step not in ("joint", "column"):
            raise ValueError(f"b_step must be 'joint' or 'column', got {self.b_step!r}")
        data = self._dataset(X, Y, offsets)
        init = None
        if self.warm_start and hasattr(self, "fit_result_"):
            prev = self.fit_result_
            if prev.vpar_hat.shape == data.counts.shape and prev.theta_hat.m == data.m:
                init = (prev.theta_hat, prev.vpar_hat)
        result = fit(data, self._config(), init=init, b_step=self.b_step)
        self._set_result(data, result)
        return self

    def _set_result(self, data, result):
        self.dataset_ = data
        self.fit_result_ = result
        self.coef_ = result.theta_hat.regression
        self.covariance_ = result.theta_hat.covariance
        self.precision_ = result.theta_hat.precision
        self.latent_mean_ = result.vpar_hat.means
        self.latent_sd_ = result.vpar_hat.sdevs
        self.elbo_trace_ = np.asarray(result.elbo_trace)
        self.elbo_ = result.elbo
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        self.n_features_in_ = data.m
        self.n_outputs_ = data.p

    def predict(self, X, offsets=None):
        """Marginal expected counts ``exp(o + x'B + diag(Sigma)/2)``."""
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, expected {self.n_features_in_}")
        O = check_offsets(offsets, (X.shape[0], self.n_outputs_))
        return np.exp(O + X @ self.coef_ + 0.5 * np.diag(self.covariance_))

    def transform(self, X, Y, offsets=None):
        """Profiled latent means ``M`` of new observations under the fitted model."""
        check_is_fitted(self, "coef_")
        data = self._dataset(X, Y, offsets)
        vpar = self._profile(data)
        return vpar.means

    def _profile(self, data):
        theta = ModelParams(self.coef_, self.precision_)
        start = VariationalParams(
            np.log1p(data.counts) - data.offsets - data.covariates @ self.coef_,
            np.full(data.counts.shape, 0.5),
        )
        return profile_all(theta, data, start, self._config())

    def score(self, X, Y, offsets=None):
        """Average profiled lower bound per observation (higher is better)."""
        check_is_fitted(self, "coef_")
        data = self._dataset(X, Y, offsets)
        vpar = self._profile(data)
        theta = ModelParams(self.coef_, self.precision_)
        return float(np.mean(elbo_rows(theta, vpar.means, vpar.sdevs, data)))

    def variance(self, method="sandwich", level=0.95):
        """:class:`~pln_sandwich.variance.VarianceReport` for ``coef_``."""
        check_is_fitted(self, "coef_")
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        res = self.fit_result_
        return variance_report(res.theta_hat, res.vpar_hat, self.dataset_, method, level)

    def confidence_intervals(self, level=0.95, method="sandwich"):
        """``(lower, upper)`` bounds for every entry of ``coef_``."""
        report = self.variance(method, level)
        return report.ci_lower, report.ci_upper
