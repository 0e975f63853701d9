"""Variance estimators for the regression coefficients of a fitted PLN model.

Two estimators are provided:

* ``fisher``: inverse of the variational Fisher information, block-diagonal
  over the columns of ``B``. It treats the lower bound as if it were the
  likelihood and tends to understate the variance.
* ``sandwich``: the M-estimation variance ``C^-1 D C^-1 / n`` of the
  profiled lower bound, restricted to the ``vec(B)`` block. ``C`` is the
  average profiled curvature and ``D`` the average outer product of the
  per-observation scores.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .core import (
    CountDataset,
    ModelParams,
    VariationalParams,
    compute_a_tilde,
    exp_guarded,
    unvec,
)
from .exceptions import SingularMatrixError
from .stats import two_sided_quantile

METHODS = ("fisher", "sandwich")


@dataclass(frozen=True, eq=False)
class FisherBlocks:
    """Variational Fisher information of an ``n``-sample.

    ``b_blocks[j]`` is ``X' diag(A_.j) X``; the ``Omega`` block
    ``(n/2) Sigma (x) Sigma`` is only built on request.
    """

    b_blocks: np.ndarray
    covariance: np.ndarray
    n: int

    def omega_block(self) -> np.ndarray:
        return 0.5 * self.n * np.kron(self.covariance, self.covariance)


@dataclass(frozen=True, eq=False)
class SandwichWorkspace:
    """Per-observation quantities used by the closed-form inverse Hessian.

    ``a``, ``s`` and ``omega_diag`` are vectors standing for the diagonal
    matrices ``D_a``, ``D_s`` and ``Omega_D``; ``lam`` and ``g`` hold the
    diagonals of ``Lambda_i`` and ``G_i = D_s Lambda_i D_s``.
    """

    a: np.ndarray
    s: np.ndarray
    omega: np.ndarray
    omega_diag: np.ndarray
    lam: np.ndarray
    g: np.ndarray
    C: np.ndarray

    @property
    def E(self) -> np.ndarray:
        """``G + (I - G) C (I - G)``."""
        one_minus_g = 1.0 - self.g
        return np.diag(self.g) + one_minus_g[:, None] * self.C * one_minus_g[None, :]


@dataclass(frozen=True, eq=False)
class VarianceReport:
    """Per-coefficient variances of ``B`` and the matching confidence intervals."""

    method: str
    estimate: np.ndarray
    var_B: np.ndarray
    level: float
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    full_matrix: Optional[np.ndarray] = None
    var_Omega: Optional[np.ndarray] = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.var_B)

    def with_level(self, level: float) -> "VarianceReport":
        lower, upper = confidence_bounds(self.estimate, self.var_B, level)
        return VarianceReport(
            self.method, self.estimate, self.var_B, level, lower, upper,
            self.full_matrix, self.var_Omega,
        )


def confidence_bounds(estimate, variance, level):
    """``estimate -/+ phi_{1-alpha/2} sqrt(variance)``."""
    variance = np.asarray(variance, dtype=float)
    if np.any(~(variance > 0)):
        raise SingularMatrixError("variance estimates must be positive and finite")
    half = two_sided_quantile(level) * np.sqrt(variance)
    return estimate - half, estimate + half


def fisher_blocks(theta: ModelParams, vpar: VariationalParams, data: CountDataset) -> FisherBlocks:
    A = compute_a_tilde(theta, vpar, data)
    X = data.covariates
    blocks = np.einsum("ik,ij,il->jkl", X, A, X)
    return FisherBlocks(blocks, theta.covariance, data.n)


def fisher_variance(
    theta: ModelParams, vpar: VariationalParams, data: CountDataset, level: float = 0.95
) -> VarianceReport:
    """Variances from the inverse variational Fisher information."""
    blocks = fisher_blocks(theta, vpar, data).b_blocks
    m, p = theta.m, theta.p
    var_B = np.empty((m, p))
    for j in range(p):
        try:
            factor = linalg.cho_factor(blocks[j], lower=True)
        except linalg.LinAlgError as exc:
            raise SingularMatrixError(
                f"Fisher block of column {j} is singular; the covariates may be rank deficient"
            ) from exc
        var_B[:, j] = np.diag(linalg.cho_solve(factor, np.eye(m)))
    omega_diag = np.diag(theta.precision)
    var_Omega = (2.0 / data.n) * np.outer(omega_diag, omega_diag)
    lower, upper = confidence_bounds(theta.regression, var_B, level)
    return VarianceReport("fisher", theta.regression, var_B, level, lower, upper, var_Omega=var_Omega)


def compute_Dn(theta: ModelParams, vpar: VariationalParams, data: CountDataset) -> np.ndarray:
    """Average outer product of the per-observation ``vec(B)`` scores."""
    A = compute_a_tilde(theta, vpar, data)
    R = data.counts - A
    n, p = R.shape
    scores = (R[:, :, None] * data.covariates[:, None, :]).reshape(n, p * data.m)
    return scores.T @ scores / n


def sandwich_workspace(theta: ModelParams, vpar_i, obs_i) -> SandwichWorkspace:
    m_i, s_i = (np.asarray(v, dtype=float) for v in vpar_i)
    y, x, o, _ = obs_i
    a = exp_guarded(o + x @ theta.regression + m_i + 0.5 * s_i**2)
    Omega = theta.precision
    omega_diag = np.diag(Omega).copy()
    s2 = s_i**2
    lam = a * s2 / (1.0 + s2 * (a + a * s2 + omega_diag))
    g = s2 * lam
    root = 1.0 / np.sqrt(a)
    inner = np.eye(len(a)) + root[:, None] * Omega * root[None, :] - np.diag(g)
    try:
        C = linalg.cho_solve(linalg.cho_factor(inner, lower=True), np.eye(len(a)))
    except linalg.LinAlgError as exc:
        raise SingularMatrixError("C_i is not well defined at this point") from exc
    return SandwichWorkspace(a, s_i, Omega, omega_diag, lam, g, 0.5 * (C + C.T))


def inverse_variational_hessian(ws: SandwichWorkspace) -> np.ndarray:
    """Closed-form inverse of the ``2p x 2p`` Hessian of ``J_i`` in ``(m_i, s_i)``."""
    C = ws.C
    ds_lam = ws.s * ws.lam
    top_right = -C * ds_lam[None, :]
    bottom_right = np.diag(ws.lam) + ds_lam[:, None] * C * ds_lam[None, :]
    core = np.block([[C, top_right], [top_right.T, bottom_right]])
    root = np.tile(1.0 / np.sqrt(ws.a), 2)
    return -(root[:, None] * core * root[None, :])


# Rows are processed in blocks of this size so the working set of compute_Cn
# stays O(p^2 + (mp)^2) whatever the number of observations.
_ROW_CHUNK = 64


def _curvature_kernels(Sigma, A, S2, omega_diag, first_row=0):
    diag_part = 1.0 / A + S2 * S2 / (1.0 + S2 * (A + omega_diag))
    inner = Sigma[None, :, :] + diag_part[:, :, None] * np.eye(Sigma.shape[0])
    try:
        chol = np.linalg.cholesky(inner)
    except np.linalg.LinAlgError:
        for i in range(inner.shape[0]):
            try:
                np.linalg.cholesky(inner[i])
            except np.linalg.LinAlgError as exc:
                raise SingularMatrixError(
                    f"profiled curvature of observation {first_row + i} is not positive definite",
                    row=first_row + i,
                ) from exc
        raise
    chol_inv = np.linalg.inv(chol)
    return np.einsum("ikj,ikl->ijl", chol_inv, chol_inv)


def profiled_curvature_kernels(theta: ModelParams, vpar: VariationalParams, data: CountDataset) -> np.ndarray:
    """Per-observation ``p x p`` matrices ``K_i`` with ``C_n = -(1/n) sum K_i (x) x_i x_i'``.

    ``K_i = (Sigma + D_a^-1 + D_s^4 (I + D_s^2 (D_a + Omega_D))^-1)^-1``.
    """
    A = compute_a_tilde(theta, vpar, data)
    return _curvature_kernels(theta.covariance, A, vpar.sdevs**2, np.diag(theta.precision))


def compute_Cn(theta: ModelParams, vpar: VariationalParams, data: CountDataset) -> np.ndarray:
    """Average profiled Hessian of the bound in ``vec(B)`` (negative definite).

    Cost is O(n p^3); rows are accumulated in fixed blocks in index order.
    """
    A = compute_a_tilde(theta, vpar, data)
    S2 = vpar.sdevs**2
    omega_diag = np.diag(theta.precision)
    X = data.covariates
    n, p, m = data.n, data.p, data.m
    total = np.zeros((p, m, p, m))
    for start in range(0, n, _ROW_CHUNK):
        rows = slice(start, start + _ROW_CHUNK)
        K = _curvature_kernels(theta.covariance, A[rows], S2[rows], omega_diag, start)
        total += np.einsum("ijk,il,ir->jlkr", K, X[rows], X[rows])
    C = -total.reshape(p * m, p * m) / n
    return 0.5 * (C + C.T)


def _solve_curvature(C, rhs):
    try:
        factor = linalg.cho_factor(-C, lower=True)
        return -linalg.cho_solve(factor, rhs)
    except linalg.LinAlgError:
        pass
    try:
        lu = linalg.lu_factor(C, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularMatrixError(
            "profiled curvature C_n is singular; use more observations or fewer covariates"
        ) from exc
    if np.any(np.abs(np.diag(lu[0])) <= np.finfo(float).eps * np.abs(C).max() * C.shape[0]):
        raise SingularMatrixError(
            "profiled curvature C_n is singular; use more observations or fewer covariates"
        )
    return linalg.lu_solve(lu, rhs)


def sandwich_variance(
    theta: ModelParams, vpar: VariationalParams, data: CountDataset, level: float = 0.95
) -> VarianceReport:
    """Sandwich variance ``C_n^-1 D_n C_n^-1 / n`` of ``vec(B)``."""
    m, p, n = theta.m, theta.p, data.n
    if n <= m * p:
        warnings.warn(
            f"n = {n} does not exceed m*p = {m * p}; the sandwich variance is unreliable",
            RuntimeWarning,
            stacklevel=2,
        )
    C = compute_Cn(theta, vpar, data)
    D = compute_Dn(theta, vpar, data)
    C_inv_D = _solve_curvature(C, D)
    V = _solve_curvature(C, C_inv_D.T).T / n
    V = 0.5 * (V + V.T)
    var_B = unvec(np.diag(V).copy(), m, p)
    lower, upper = confidence_bounds(theta.regression, var_B, level)
    return VarianceReport("sandwich", theta.regression, var_B, level, lower, upper, full_matrix=V)


def variance_report(theta, vpar, data, method="sandwich", level=0.95) -> VarianceReport:
    if method == "fisher":
        return fisher_variance(theta, vpar, data, level)
    if method == "sandwich":
        return sandwich_variance(theta, vpar, data, level)
    raise ValueError(f"unknown variance method {method!r}; expected one of {METHODS}")
