"""Variational Poisson-lognormal regression with sandwich confidence intervals."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    CountDataset,
    ModelParams,
    VariationalHessianBlocks,
    VariationalParams,
    compute_a_tilde,
    elbo_single,
    elbo_total,
    grad_model,
    grad_variational,
    hess_variational,
    single_obs_B_derivatives,
)
from .estimator import PLNRegressor  # noqa: E402
from .fit import FitConfig, FitResult, fit, init_params, profile_vpar, update_sigma  # noqa: E402
from .variance import (  # noqa: E402
    VarianceReport,
    compute_Cn,
    compute_Dn,
    fisher_variance,
    inverse_variational_hessian,
    sandwich_variance,
)

__all__ = [
    "CountDataset",
    "FitConfig",
    "FitResult",
    "ModelParams",
    "PLNRegressor",
    "VariationalHessianBlocks",
    "VariationalParams",
    "VarianceReport",
    "compute_Cn",
    "compute_Dn",
    "compute_a_tilde",
    "elbo_single",
    "elbo_total",
    "fisher_variance",
    "fit",
    "grad_model",
    "grad_variational",
    "hess_variational",
    "init_params",
    "inverse_variational_hessian",
    "profile_vpar",
    "sandwich_variance",
    "single_obs_B_derivatives",
    "update_sigma",
]
