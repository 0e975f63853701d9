"""Variational EM for the PLN model.

Each outer iteration runs three ascent steps on the lower bound:

1. profile every row's variational parameters ``(m_i, s_i)`` by damped Newton,
2. set ``Sigma`` to its closed-form maximiser ``(M'M + S_bar^2) / n``,
3. take one damped Newton step on every column of ``B``.

All three steps never decrease the bound, so the recorded trace is monotone.
Row-wise work is vectorised over observations; reductions use numpy's fixed
summation order and do not depend on any thread count.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy import linalg

from .core import (
    CountDataset,
    ModelParams,
    VariationalParams,
    elbo_total,
    exp_guarded,
    grad_model,
    unvec,
    vec,
)
from .exceptions import ParameterDomainError, ProfilingError, SPDRepairError

logger = logging.getLogger(__name__)

# Largest accepted change of log s in one Newton step.
_MAX_LOG_SD_STEP = 5.0
# Below this Newton decrement the full step is taken without a line search:
# the predicted gain is under the rounding noise of J_i and the quadratic
# model is exact to higher order.
_TINY_DECREMENT = 1e-10


@dataclass(frozen=True)
class FitConfig:
    """Stopping rules and safeguards for :func:`fit`."""

    outer_tol: float = 1e-8
    max_outer_iters: int = 500
    sigma_tol: float = 1e-8
    psi_grad_tol: float = 1e-8
    max_psi_iters: int = 100
    max_halvings: int = 30
    jitter: float = 1e-8
    max_jitter: float = 1e-2

    def __post_init__(self):
        for name in ("outer_tol", "sigma_tol", "psi_grad_tol", "jitter", "max_jitter"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("max_outer_iters", "max_psi_iters", "max_halvings"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: ModelParams
    vpar_hat: VariationalParams
    elbo_trace: Tuple[float, ...]
    converged: bool
    iterations: int
    warnings: Tuple[str, ...] = field(default=())

    @property
    def elbo(self) -> float:
        return self.elbo_trace[-1]


def init_params(data: CountDataset):
    """Starting point from a least-squares fit of ``log(1 + Y) - O`` on ``X``."""
    target = np.log1p(data.counts) - data.offsets
    B0 = np.linalg.lstsq(data.covariates, target, rcond=None)[0]
    M0 = target - data.covariates @ B0
    S0 = np.full_like(M0, 0.1)
    Sigma0 = M0.T @ M0 / data.n + 1e-4 * np.eye(data.p)
    return ModelParams.from_covariance(B0, Sigma0), VariationalParams(M0, S0)


def _psi_objective(Y, base, M, U, Omega, omega_diag):
    """Part of ``J_i`` that depends on ``(m_i, log s_i)``, one value per row.

    Non-finite rates give ``-inf`` so that line searches reject them.
    """
    S2 = np.exp(2.0 * U)
    with np.errstate(over="ignore"):
        A = np.exp(base + M + 0.5 * S2)
    val = (
        (Y * M).sum(axis=1)
        - A.sum(axis=1)
        - 0.5 * np.einsum("ij,jk,ik->i", M, Omega, M)
        - 0.5 * S2 @ omega_diag
        + U.sum(axis=1)
    )
    val[~np.isfinite(val)] = -np.inf
    return val


def _psi_gradients(Y, base, M, S, Omega, omega_diag):
    A = exp_guarded(base + M + 0.5 * S**2)
    grad_m = Y - A - M @ Omega
    grad_s = -S * A + 1.0 / S - S * omega_diag
    return A, grad_m, grad_s


def _profile_rows(theta, Y, base, M, S, cfg, row_ids=None):
    """Batched damped Newton on ``(m_i, log s_i)`` for all rows at once.

    The Newton system uses the Hessian in ``(m, s)`` rescaled to log-space,
    which is negative definite everywhere; the term dropped by the rescaling
    is proportional to the gradient, so local convergence stays quadratic.
    """
    Omega = theta.precision
    omega_diag = np.diag(Omega).copy()
    M = M.copy()
    U = np.log(S)
    n, p = M.shape
    eye = np.eye(p)
    tol = cfg.psi_grad_tol
    frozen = np.zeros(n, dtype=bool)
    for _ in range(cfg.max_psi_iters):
        S = np.exp(U)
        A, grad_m, grad_s = _psi_gradients(Y, base, M, S, Omega, omega_diag)
        gnorm = np.maximum(np.abs(grad_m).max(axis=1), np.abs(grad_s).max(axis=1))
        active = np.flatnonzero((gnorm >= tol) & ~frozen)
        if active.size == 0:
            break
        a, s = A[active], S[active]
        s2 = s * s
        g_m = grad_m[active]
        g_u = s * grad_s[active]
        # Negated log-space Hessian: [[D_a + Omega, D_{a s^2}], [D_{a s^2}, D_h]].
        off = a * s2
        h = a * s2 * (1.0 + s2) + 1.0 + omega_diag * s2
        # Eliminate the diagonal log-sd block, solve the p x p Schur system.
        schur = Omega[None, :, :] + (a - off * off / h)[:, :, None] * eye
        rhs = g_m - off * g_u / h
        d_m = np.linalg.solve(schur, rhs[:, :, None])[:, :, 0]
        d_u = (g_u - off * d_m) / h
        decrement = (g_m * d_m).sum(axis=1) + (g_u * d_u).sum(axis=1)
        d_u_max = np.abs(d_u).max(axis=1)
        scale = np.minimum(1.0, _MAX_LOG_SD_STEP / np.maximum(d_u_max, 1e-300))
        d_m *= scale[:, None]
        d_u *= scale[:, None]

        M_a, U_a = M[active], U[active]
        Y_a, base_a = Y[active], base[active]
        f0 = _psi_objective(Y_a, base_a, M_a, U_a, Omega, omega_diag)
        step = np.ones(active.size)
        pending = np.arange(active.size)
        for _ in range(cfg.max_halvings + 1):
            M_try = M_a[pending] + step[pending, None] * d_m[pending]
            U_try = U_a[pending] + step[pending, None] * d_u[pending]
            f1 = _psi_objective(Y_a[pending], base_a[pending], M_try, U_try, Omega, omega_diag)
            ok = (f1 >= f0[pending]) | ((decrement[pending] < _TINY_DECREMENT) & (step[pending] == 1.0))
            done = pending[ok]
            M[active[done]] = M_try[ok]
            U[active[done]] = U_try[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= 0.5
        # A row that cannot move at all sits at the floating-point floor of J_i.
        stuck = active[pending]
        frozen[stuck[gnorm[stuck] < np.sqrt(tol)]] = True
    S = np.exp(U)
    _, grad_m, grad_s = _psi_gradients(Y, base, M, S, Omega, omega_diag)
    gnorm = np.maximum(np.abs(grad_m).max(axis=1), np.abs(grad_s).max(axis=1))
    gnorm[frozen] = 0.0
    worst = int(np.argmax(gnorm))
    if gnorm[worst] < tol:
        return M, S
    row = worst if row_ids is None else int(row_ids[worst])
    raise ProfilingError(
        f"profiling of row {row} did not converge in {cfg.max_psi_iters} iterations "
        f"(gradient norm {gnorm[worst]:.3g})",
        row=row,
        grad_norm=float(gnorm[worst]),
    )


def profile_vpar(theta: ModelParams, obs_i, init, cfg: FitConfig = FitConfig()):
    """Maximise ``J_i`` over ``(m_i, s_i)`` for fixed ``theta``.

    Returns the maximiser ``(m_hat, s_hat)``. ``J_i`` is strictly concave in
    ``(m_i, s_i)`` so the maximiser is unique.
    """
    y, x, o, _ = obs_i
    m0, s0 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in init)
    if np.any(s0 <= 0):
        raise ParameterDomainError("initial standard deviations must be > 0")
    base = (o + x @ theta.regression)[None, :]
    M, S = _profile_rows(theta, np.asarray(y, float)[None, :], base, m0[None, :], s0[None, :], cfg)
    return M[0], S[0]


def profile_all(theta: ModelParams, data: CountDataset, vpar: VariationalParams, cfg: FitConfig = FitConfig()):
    """Profile every row; returns the maximising :class:`VariationalParams`."""
    base = data.offsets + data.covariates @ theta.regression
    M, S = _profile_rows(theta, data.counts, base, vpar.means, vpar.sdevs, cfg)
    return VariationalParams(M, S)


def _spd_repair(Sigma, cfg):
    Sigma = 0.5 * (Sigma + Sigma.T)
    try:
        linalg.cholesky(Sigma, lower=True)
        return Sigma
    except linalg.LinAlgError:
        pass
    eye = np.eye(Sigma.shape[0])
    jitter = cfg.jitter
    while jitter <= cfg.max_jitter * (1 + 1e-12):
        try:
            linalg.cholesky(Sigma + jitter * eye, lower=True)
            return Sigma + jitter * eye
        except linalg.LinAlgError:
            jitter *= 10.0
    raise SPDRepairError(f"covariance is not SPD even with jitter {cfg.max_jitter:g}")


def update_sigma(vpar: VariationalParams, cfg: FitConfig = FitConfig()) -> np.ndarray:
    """Closed-form maximiser of the bound in ``Sigma``: ``(M'M + S_bar^2) / n``."""
    M = vpar.means
    n = M.shape[0]
    Sigma = (M.T @ M + vpar.sum_sq_sdevs) / n
    return _spd_repair(Sigma, cfg)


def _update_B(theta, data, vpar, cfg):
    """One damped Newton step per column of ``B`` with ``psi`` fixed."""
    X, Y = data.covariates, data.counts
    B = theta.regression
    shift = data.offsets + vpar.means + 0.5 * vpar.sdevs**2
    eta = X @ B
    A = exp_guarded(shift + eta)
    grad = X.T @ (Y - A)
    # Column j Hessian (negated): X' diag(A_j) X.
    H = np.einsum("ik,ij,il->jkl", X, A, X)
    direction = np.linalg.solve(H, grad.T[:, :, None])[:, :, 0].T

    def column_objective(eta_cols, cols):
        with np.errstate(over="ignore"):
            rate = np.exp(shift[:, cols] + eta_cols)
        val = (Y[:, cols] * eta_cols).sum(axis=0) - rate.sum(axis=0)
        val[~np.isfinite(val)] = -np.inf
        return val

    p = B.shape[1]
    f0 = column_objective(eta, np.arange(p))
    step = np.ones(p)
    pending = np.arange(p)
    B_new = B.copy()
    d_eta = X @ direction
    for _ in range(cfg.max_halvings + 1):
        eta_try = eta[:, pending] + step[pending] * d_eta[:, pending]
        f1 = column_objective(eta_try, pending)
        ok = f1 >= f0[pending]
        done = pending[ok]
        B_new[:, done] = B[:, done] + step[done] * direction[:, done]
        pending = pending[~ok]
        if pending.size == 0:
            break
        step[pending] *= 0.5
    return B_new


def _joint_objective(Y, X, O, B, M, U, Omega, omega_diag):
    """Lower bound up to terms that do not depend on ``(B, M, log S)``."""
    base = O + X @ B
    return float(
        (Y * base).sum() + _psi_objective(Y, base, M, U, Omega, omega_diag).sum()
    )


def _joint_step(theta, data, vpar, cfg):
    """Damped Newton step on ``(B, M, log S)`` jointly, ``Omega`` held fixed.

    The bound is jointly concave in these blocks. Each row's variational block
    is eliminated through its ``p x p`` Schur complement, which leaves an
    ``mp x mp`` system in ``vec(B)`` of the same Kronecker form as the
    profiled curvature used by the sandwich variance.
    """
    X, Y, O = data.covariates, data.counts, data.offsets
    B, Omega = theta.regression, theta.precision
    omega_diag = np.diag(Omega).copy()
    M, S = vpar.means, vpar.sdevs
    U = np.log(S)
    n, p = M.shape
    m = B.shape[0]
    eye = np.eye(p)

    A = exp_guarded(O + X @ B + M + 0.5 * S**2)
    s2 = S * S
    g_m = Y - A - M @ Omega
    g_u = -s2 * A + 1.0 - s2 * omega_diag
    off = A * s2
    h = off * (1.0 + s2) + 1.0 + omega_diag * s2
    c = A - off * off / h
    schur_inv = np.linalg.inv(Omega[None, :, :] + c[:, :, None] * eye)

    def solve_psi(r_m, r_u):
        d_m = np.einsum("ijk,ik->ij", schur_inv, r_m - off * r_u / h)
        return d_m, (r_u - off * d_m) / h

    dm0, du0 = solve_psi(g_m, g_u)
    decrement = float((g_m * dm0).sum() + (g_u * du0).sum())
    K = c[:, :, None] * eye - c[:, :, None] * schur_inv * c[:, None, :]
    P = np.einsum("ijk,il,ir->jlkr", K, X, X).reshape(p * m, p * m)
    rhs = X.T @ (Y - A - A * dm0 - off * du0)
    try:
        factor = linalg.cho_factor(0.5 * (P + P.T), lower=True)
        d_b = linalg.cho_solve(factor, vec(rhs))
    except linalg.LinAlgError:
        return theta, vpar
    decrement += float(vec(rhs) @ d_b)
    dB = unvec(d_b, m, p)
    d_eta = X @ dB
    dm1, du1 = solve_psi(A * d_eta, off * d_eta)
    d_m, d_u = dm0 - dm1, du0 - du1
    d_u_max = np.abs(d_u).max()
    t = min(1.0, _MAX_LOG_SD_STEP / d_u_max) if d_u_max > 0 else 1.0

    f0 = _joint_objective(Y, X, O, B, M, U, Omega, omega_diag)
    for _ in range(cfg.max_halvings + 1):
        B1, M1, U1 = B + t * dB, M + t * d_m, U + t * d_u
        f1 = _joint_objective(Y, X, O, B1, M1, U1, Omega, omega_diag)
        if f1 >= f0 or (t == 1.0 and decrement < _TINY_DECREMENT):
            return theta.replace(regression=B1), VariationalParams(M1, np.exp(U1))
        t *= 0.5
    return theta, vpar


def _sigma_gap(theta, vpar):
    """Frobenius-relative distance of ``Sigma`` from its closed-form maximiser."""
    M = vpar.means
    target = (M.T @ M + vpar.sum_sq_sdevs) / M.shape[0]
    return float(np.linalg.norm(theta.covariance - target) / np.linalg.norm(target))


def _stationarity(theta, vpar, data):
    grad_B, grad_Omega = grad_model(theta, vpar, data)
    return float(np.abs(grad_B).max()), float(np.abs(grad_Omega).max())


def fit(data: CountDataset, cfg: FitConfig = FitConfig(), init=None, b_step="joint") -> FitResult:
    """Variational estimator of ``(B, Omega)`` by block-coordinate ascent.

    ``init`` optionally supplies a ``(ModelParams, VariationalParams)`` warm
    start. Reaching ``max_outer_iters`` returns ``converged=False``.
    """
    theta, vpar = init_params(data) if init is None else init
    notes = []
    zero_cols = np.flatnonzero(data.counts.sum(axis=0) == 0)
    if zero_cols.size:
        msg = (
            f"columns {zero_cols.tolist()} contain only zeros; their coefficients "
            "drift to -inf and are capped by the iteration limit"
        )
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)

    trace = [elbo_total(theta, vpar, data)]
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_outer_iters + 1):
        vpar = profile_all(theta, data, vpar, cfg)
        Sigma = update_sigma(vpar, cfg)
        theta = ModelParams.from_covariance(theta.regression, Sigma)
        if b_step == "joint":
            theta, vpar = _joint_step(theta, data, vpar, cfg)
        else:
            theta = theta.replace(regression=_update_B(theta, data, vpar, cfg))
        trace.append(elbo_total(theta, vpar, data))
        change = abs(trace[-1] - trace[-2]) / (1.0 + abs(trace[-1]))
        gap = _sigma_gap(theta, vpar)
        logger.debug("iteration %d: elbo %.10g, change %.3g, sigma gap %.3g", iterations, trace[-1], change, gap)
        if change < cfg.outer_tol and gap < cfg.sigma_tol:
            converged = True
            break
    # Leave psi at its profiled optimum for the returned theta.
    vpar = profile_all(theta, data, vpar, cfg)
    trace.append(elbo_total(theta, vpar, data))
    logger.debug("fit finished after %d iterations, converged=%s", iterations, converged)
    return FitResult(theta, vpar, tuple(trace), converged, iterations, tuple(notes))
