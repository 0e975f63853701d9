"""Domain types, the variational lower bound and its closed-form derivatives.

Conventions used throughout the package:

* ``vec(B)`` stacks the columns of the ``m x p`` matrix ``B``; entry ``B[k, j]``
  sits at index ``j * m + k`` (``B.reshape(-1, order="F")``).
* Kronecker-structured matrices over ``vec(B)`` are ``p x p`` outer blocks with
  ``m x m`` inner blocks, i.e. ``np.kron(D, np.outer(x, x))``.
* Variational standard deviations are exposed as ``s``; optimisers work on
  ``log s`` internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .exceptions import (
    DatasetError,
    NumericOverflowError,
    ParameterDomainError,
    RankDeficiencyError,
)

#: Any exponentiated rate above this value is treated as an overflow.
OVERFLOW_LIMIT = 1e300
_LOG_OVERFLOW = float(np.log(OVERFLOW_LIMIT))


def vec(matrix: np.ndarray) -> np.ndarray:
    """Column-major vectorisation."""
    return np.asarray(matrix).reshape(-1, order="F")


def unvec(vector: np.ndarray, m: int, p: int) -> np.ndarray:
    """Inverse of :func:`vec` for an ``m x p`` matrix."""
    return np.asarray(vector).reshape((m, p), order="F")


def _as_2d_float(name, value):
    arr = np.array(value, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DatasetError(f"{name} must be a 2-d matrix, got {arr.ndim} dimensions")
    return arr


def _first_bad_cell(mask):
    i, j = np.argwhere(mask)[0]
    return int(i), int(j)


class Observation(NamedTuple):
    """One row of a :class:`CountDataset`."""

    counts: np.ndarray
    covariates: np.ndarray
    offsets: np.ndarray
    log_factorial: float


@dataclass(frozen=True, eq=False)
class CountDataset:
    """Counts ``Y`` (n x p), covariates ``X`` (n x m) and offsets ``O`` (n x p).

    Counts are stored as floats but must be nonnegative integers. ``X`` must
    have full column rank. ``log_factorial`` caches ``K(Y) = -sum log(Y_ij!)``.
    """

    counts: np.ndarray
    covariates: np.ndarray
    offsets: Optional[np.ndarray] = None
    row_log_factorial: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Y = _as_2d_float("counts", self.counts)
        X = _as_2d_float("covariates", self.covariates)
        n, p = Y.shape
        if n == 0 or p == 0:
            raise DatasetError("counts must have at least one row and one column")
        if X.shape[0] != n:
            raise DatasetError(
                f"covariates have {X.shape[0]} rows but counts have {n}"
            )
        if X.shape[1] == 0:
            raise DatasetError("covariates must have at least one column")
        if self.offsets is None:
            O = np.zeros((n, p))
        else:
            O = _as_2d_float("offsets", self.offsets)
            if O.shape != (n, p):
                raise DatasetError(
                    f"offsets have shape {O.shape} but counts have shape {(n, p)}"
                )
        for name, arr in (("counts", Y), ("covariates", X), ("offsets", O)):
            bad = ~np.isfinite(arr)
            if bad.any():
                i, j = _first_bad_cell(bad)
                raise DatasetError(f"{name} has a non-finite value at ({i}, {j})", i, j)
        bad = (Y < 0) | (Y != np.round(Y))
        if bad.any():
            i, j = _first_bad_cell(bad)
            raise DatasetError(
                f"counts must be nonnegative integers; got {Y[i, j]!r} at ({i}, {j})",
                i,
                j,
            )
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            raise RankDeficiencyError(
                f"covariates have rank {rank} < {X.shape[1]} columns"
            )
        for arr in (Y, X, O):
            arr.setflags(write=False)
        object.__setattr__(self, "counts", Y)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "offsets", O)
        K = -gammaln(Y + 1.0).sum(axis=1)
        K.setflags(write=False)
        object.__setattr__(self, "row_log_factorial", K)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def p(self) -> int:
        return self.counts.shape[1]

    @property
    def m(self) -> int:
        return self.covariates.shape[1]

    @property
    def log_factorial(self) -> float:
        """``K(Y)`` for the whole dataset."""
        return math.fsum(self.row_log_factorial)

    def row(self, i: int) -> Observation:
        return Observation(
            self.counts[i], self.covariates[i], self.offsets[i], float(self.row_log_factorial[i])
        )

    def with_offsets(self, offsets) -> "CountDataset":
        return CountDataset(self.counts, self.covariates, offsets)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Regression matrix ``B`` (m x p) and precision ``Omega`` (p x p, SPD).

    The covariance ``Sigma = inv(Omega)`` and both Cholesky factors are cached
    at construction. Build from a covariance with :meth:`from_covariance`.
    """

    regression: np.ndarray
    precision: np.ndarray
    covariance: np.ndarray = field(init=False, repr=False)
    precision_cholesky: np.ndarray = field(init=False, repr=False)
    covariance_cholesky: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        B = np.array(self.regression, dtype=float, ndmin=2)
        Omega = np.array(self.precision, dtype=float, ndmin=2)
        p = Omega.shape[0]
        if Omega.shape != (p, p):
            raise ParameterDomainError(f"precision must be square, got {Omega.shape}")
        if B.shape[1] != p:
            raise ParameterDomainError(
                f"regression has {B.shape[1]} columns but precision is {p} x {p}"
            )
        if not np.all(np.isfinite(Omega)) or not np.all(np.isfinite(B)):
            raise ParameterDomainError("model parameters must be finite")
        if not np.allclose(Omega, Omega.T, rtol=1e-10, atol=1e-12):
            raise ParameterDomainError("precision matrix is not symmetric")
        Omega = 0.5 * (Omega + Omega.T)
        try:
            L = linalg.cholesky(Omega, lower=True)
        except linalg.LinAlgError as exc:
            raise ParameterDomainError("precision matrix is not positive definite") from exc
        Sigma = linalg.cho_solve((L, True), np.eye(p))
        Sigma = 0.5 * (Sigma + Sigma.T)
        try:
            L_sigma = linalg.cholesky(Sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise ParameterDomainError("covariance matrix is not positive definite") from exc
        for arr in (B, Omega, Sigma, L, L_sigma):
            arr.setflags(write=False)
        object.__setattr__(self, "regression", B)
        object.__setattr__(self, "precision", Omega)
        object.__setattr__(self, "covariance", Sigma)
        object.__setattr__(self, "precision_cholesky", L)
        object.__setattr__(self, "covariance_cholesky", L_sigma)

    @classmethod
    def from_covariance(cls, regression, covariance) -> "ModelParams":
        Sigma = np.array(covariance, dtype=float, ndmin=2)
        try:
            L = linalg.cholesky(0.5 * (Sigma + Sigma.T), lower=True)
        except linalg.LinAlgError as exc:
            raise ParameterDomainError("covariance matrix is not positive definite") from exc
        Omega = linalg.cho_solve((L, True), np.eye(Sigma.shape[0]))
        return cls(regression, 0.5 * (Omega + Omega.T))

    @property
    def m(self) -> int:
        return self.regression.shape[0]

    @property
    def p(self) -> int:
        return self.regression.shape[1]

    @property
    def logdet_precision(self) -> float:
        return 2.0 * float(np.log(np.diag(self.precision_cholesky)).sum())

    def replace(self, regression=None, precision=None) -> "ModelParams":
        return ModelParams(
            self.regression if regression is None else regression,
            self.precision if precision is None else precision,
        )


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """Gaussian means ``M`` and standard deviations ``S`` (both n x p)."""

    means: np.ndarray
    sdevs: np.ndarray

    def __post_init__(self):
        M = np.array(self.means, dtype=float, ndmin=2)
        S = np.array(self.sdevs, dtype=float, ndmin=2)
        if M.shape != S.shape:
            raise ParameterDomainError(
                f"means {M.shape} and sdevs {S.shape} must have the same shape"
            )
        if not np.all(np.isfinite(M)) or not np.all(np.isfinite(S)):
            raise ParameterDomainError("variational parameters must be finite")
        if np.any(S <= 0):
            raise ParameterDomainError("variational standard deviations must be > 0")
        M.setflags(write=False)
        S.setflags(write=False)
        object.__setattr__(self, "means", M)
        object.__setattr__(self, "sdevs", S)

    @classmethod
    def from_log_sdevs(cls, means, log_sdevs) -> "VariationalParams":
        return cls(means, np.exp(log_sdevs))

    @property
    def log_sdevs(self) -> np.ndarray:
        return np.log(self.sdevs)

    @property
    def shape(self):
        return self.means.shape

    @property
    def sum_sq_sdevs(self) -> np.ndarray:
        """``S_bar^2 = sum_i diag(s_i^2)`` as a ``p x p`` matrix."""
        return np.diag((self.sdevs**2).sum(axis=0))

    def row(self, i: int):
        return self.means[i], self.sdevs[i]


@dataclass(frozen=True)
class VariationalHessianBlocks:
    """Blocks of the Hessian of ``J_i`` in ``(m_i, s_i)``.

    ``ms`` and ``ss`` are diagonal and stored as full matrices for clarity.
    """

    mm: np.ndarray
    ms: np.ndarray
    ss: np.ndarray

    @property
    def assembled(self) -> np.ndarray:
        return np.block([[self.mm, self.ms], [self.ms.T, self.ss]])


def _check_shapes(theta, M, data):
    if theta.m != data.m or theta.p != data.p:
        raise ParameterDomainError(
            f"parameters are {theta.m} x {theta.p} but data have m={data.m}, p={data.p}"
        )
    if M.shape != (data.n, data.p):
        raise ParameterDomainError(
            f"variational parameters have shape {M.shape}, expected {(data.n, data.p)}"
        )


def log_a_tilde(B, X, O, M, S):
    """Elementwise exponent ``o_ij + x_i'B_j + m_ij + s_ij^2 / 2``."""
    return O + X @ B + M + 0.5 * S**2


def exp_guarded(log_values):
    """``exp`` that refuses to exceed :data:`OVERFLOW_LIMIT`."""
    log_values = np.asarray(log_values, dtype=float)
    bad = ~(log_values <= _LOG_OVERFLOW)
    if bad.any():
        idx = tuple(int(k) for k in np.argwhere(bad)[0])
        raise NumericOverflowError(
            f"exponentiated rate overflows (exponent {log_values[idx]:.4g}) at index {idx}",
            idx,
        )
    return np.exp(log_values)


def compute_a_tilde(theta: ModelParams, vpar: VariationalParams, data: CountDataset) -> np.ndarray:
    """Variational expected rates ``A~_ij = exp(o_ij + x_i'B_j + m_ij + s_ij^2/2)``."""
    _check_shapes(theta, vpar.means, data)
    return exp_guarded(
        log_a_tilde(theta.regression, data.covariates, data.offsets, vpar.means, vpar.sdevs)
    )


def elbo_rows(theta: ModelParams, M, S, data: CountDataset, A=None) -> np.ndarray:
    """Per-observation lower bounds ``J_i`` as a length-``n`` vector."""
    Y, X, O = data.counts, data.covariates, data.offsets
    Omega = theta.precision
    if A is None:
        A = exp_guarded(log_a_tilde(theta.regression, X, O, M, S))
    linear = (Y * (O + M + X @ theta.regression)).sum(axis=1)
    quad = np.einsum("ij,jk,ik->i", M, Omega, M)
    return (
        linear
        - A.sum(axis=1)
        + data.row_log_factorial
        + 0.5 * theta.logdet_precision
        - 0.5 * quad
        - 0.5 * (S**2) @ np.diag(Omega)
        + np.log(S).sum(axis=1)
        + 0.5 * data.p
    )


def elbo_single(theta: ModelParams, vpar_i, obs_i: Observation) -> float:
    """Lower bound ``J_i`` of one observation's log-likelihood.

    ``vpar_i`` is a ``(m_i, s_i)`` pair, ``obs_i`` an :class:`Observation`.
    """
    m_i, s_i = (np.asarray(v, dtype=float) for v in vpar_i)
    if np.any(s_i <= 0):
        raise ParameterDomainError("variational standard deviations must be > 0")
    y, x, o, K = obs_i
    Omega = theta.precision
    a = exp_guarded(o + x @ theta.regression + m_i + 0.5 * s_i**2)
    return float(
        y @ (o + m_i + x @ theta.regression)
        - a.sum()
        + K
        + 0.5 * theta.logdet_precision
        - 0.5 * m_i @ Omega @ m_i
        - 0.5 * np.diag(Omega) @ s_i**2
        + np.log(s_i).sum()
        + 0.5 * len(y)
    )


def elbo_total(theta: ModelParams, vpar: VariationalParams, data: CountDataset) -> float:
    """Full-data lower bound in trace form."""
    _check_shapes(theta, vpar.means, data)
    Y, X, O = data.counts, data.covariates, data.offsets
    M, S = vpar.means, vpar.sdevs
    Omega = theta.precision
    n, p = data.n, data.p
    A = exp_guarded(log_a_tilde(theta.regression, X, O, M, S))
    # Tr(Y'[O + M + XB]) - Tr(A'1) - Tr(M Omega M')/2 - Tr(S_bar^2 Omega)/2
    # + Tr(log(S)'1). Every term is summed exactly and on its own, so a step
    # that leaves a term unchanged leaves its contribution bit-identical.
    terms = (
        Y * (O + M + X @ theta.regression),
        -A,
        -0.5 * (M @ Omega) * M,
        -0.5 * S**2 * np.diag(Omega),
        np.log(S),
    )
    return math.fsum(np.concatenate([t.ravel() for t in terms])) + data.log_factorial + 0.5 * n * (
        theta.logdet_precision + p
    )


def grad_model(theta: ModelParams, vpar: VariationalParams, data: CountDataset):
    """Gradients of the full-data bound in ``B`` (m x p) and ``Omega`` (p x p)."""
    A = compute_a_tilde(theta, vpar, data)
    M = vpar.means
    n = data.n
    grad_B = data.covariates.T @ (data.counts - A)
    grad_Omega = 0.5 * n * (theta.covariance - (M.T @ M + vpar.sum_sq_sdevs) / n)
    return grad_B, grad_Omega


def _row_a_tilde(theta, m_i, s_i, obs_i):
    y, x, o, _ = obs_i
    return exp_guarded(o + x @ theta.regression + m_i + 0.5 * s_i**2)


def grad_variational(theta: ModelParams, vpar_i, obs_i: Observation):
    """Gradients of ``J_i`` in ``m_i`` and ``s_i``."""
    m_i, s_i = (np.asarray(v, dtype=float) for v in vpar_i)
    a = _row_a_tilde(theta, m_i, s_i, obs_i)
    Omega = theta.precision
    grad_m = obs_i.counts - a - Omega @ m_i
    grad_s = -s_i * a + 1.0 / s_i - s_i * np.diag(Omega)
    return grad_m, grad_s


def hess_variational(theta: ModelParams, vpar_i, obs_i: Observation) -> VariationalHessianBlocks:
    """Hessian blocks of ``J_i`` in ``(m_i, s_i)``."""
    m_i, s_i = (np.asarray(v, dtype=float) for v in vpar_i)
    a = _row_a_tilde(theta, m_i, s_i, obs_i)
    Omega = theta.precision
    mm = -np.diag(a) - Omega
    ms = -np.diag(a * s_i)
    ss = -np.diag(a * (1.0 + s_i**2) + 1.0 / s_i**2 + np.diag(Omega))
    return VariationalHessianBlocks(mm=mm, ms=ms, ss=ss)


def single_obs_B_derivatives(theta: ModelParams, vpar_i, obs_i: Observation):
    """Derivatives of ``J_i`` involving ``vec(B)``.

    Returns ``(grad, hess, cross)`` with shapes ``(mp,)``, ``(mp, mp)`` and
    ``(mp, 2p)``; ``cross`` is the mixed derivative in ``(vec(B), (m_i, s_i))``.
    """
    m_i, s_i = (np.asarray(v, dtype=float) for v in vpar_i)
    a = _row_a_tilde(theta, m_i, s_i, obs_i)
    x = obs_i.covariates
    grad = np.kron(obs_i.counts - a, x)
    hess = -np.kron(np.diag(a), np.outer(x, x))
    xcol = x[:, None]
    cross = -np.hstack([np.kron(np.diag(a), xcol), np.kron(np.diag(a * s_i), xcol)])
    return grad, hess, cross
