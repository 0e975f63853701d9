"""Normal quantiles, the Kolmogorov distribution and the one-sample KS test."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

# Wichura's AS241 (PPND16) coefficients.
_A = (
    3.387132872796366608,
    133.14166789178437745,
    1971.5909503065514427,
    13731.693765509461125,
    45921.953931549871457,
    67265.770927008700853,
    33430.575583588128105,
    2509.0809287301226727,
)
_B = (
    1.0,
    42.313330701600911252,
    687.1870074920579083,
    5394.1960214247511077,
    21213.794301586595867,
    39307.89580009271061,
    28729.085735721942674,
    5226.495278852545925,
)
_C = (
    1.42343711074968357734,
    4.6303378461565452959,
    5.7694972214606914055,
    3.64784832476320460504,
    1.27045825245236838258,
    0.24178072517745061177,
    0.0227238449892691845833,
    7.7454501427834140764e-4,
)
_D = (
    1.0,
    2.05319162663775882187,
    1.6763848301838038494,
    0.68976733498510000455,
    0.14810397642748007459,
    0.0151986665636164571966,
    5.475938084995344946e-4,
    1.05075007164441684324e-9,
)
_E = (
    6.6579046435011037772,
    5.4637849111641143699,
    1.7848265399172913358,
    0.29656057182850489123,
    0.026532189526576123093,
    0.0012426609473880784386,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_F = (
    1.0,
    0.59983220655588793769,
    0.13692988092273580531,
    0.0148753612908506148525,
    7.868691311456132591e-4,
    1.8463183175100546818e-5,
    1.4215117583164458887e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs, x):
    acc = 0.0
    for c in reversed(coeffs):
        acc = acc * x + c
    return acc


def normal_quantile(prob: float) -> float:
    """Inverse standard normal CDF by Wichura's AS241 rational approximation."""
    prob = float(prob)
    if not 0.0 < prob < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {prob}")
    q = prob - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = prob if q < 0 else 1.0 - prob
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return -val if q < 0 else val


def two_sided_quantile(level: float) -> float:
    """``phi_{1 - alpha/2}`` for a confidence level ``1 - alpha``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")
    return normal_quantile(1.0 - (1.0 - level) / 2.0)


def kolmogorov_sf(lam: float, term_tol: float = 1e-12) -> float:
    """Survival function ``Q(lam) = 2 sum_k (-1)^(k-1) exp(-2 k^2 lam^2)``.

    The alternating series is truncated once a term drops below ``term_tol``.
    For ``lam < 1`` it converges slowly, so the equivalent theta-function form
    ``1 - sqrt(2 pi)/lam sum_k exp(-(2k-1)^2 pi^2 / (8 lam^2))`` is used.
    """
    lam = float(lam)
    if lam <= 0.0:
        return 1.0
    if lam < 1.0:
        acc = 0.0
        k = 1
        while True:
            term = math.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8.0 * lam * lam))
            acc += term
            if term < term_tol:
                break
            k += 1
        return min(1.0, max(0.0, 1.0 - math.sqrt(2.0 * math.pi) / lam * acc))
    acc = 0.0
    k = 1
    while True:
        term = math.exp(-2.0 * k * k * lam * lam)
        acc += term if k % 2 else -term
        if term < term_tol:
            break
        k += 1
    return min(1.0, max(0.0, 2.0 * acc))


def ks_statistic_std_normal(samples) -> float:
    """``sup |F_n - Phi|`` for the empirical CDF of ``samples``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("KS test needs at least one sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("KS test samples must be finite")
    cdf = ndtr(x)
    ranks = np.arange(1, n + 1)
    d_plus = np.max(ranks / n - cdf)
    d_minus = np.max(cdf - (ranks - 1) / n)
    return float(max(d_plus, d_minus))


def ks_pvalue_std_normal(samples):
    """One-sample KS test of ``samples`` against ``N(0, 1)``.

    Returns ``(statistic, p_value)``; the p-value uses the asymptotic
    Kolmogorov law at Stephens' corrected ``lam = (sqrt(n) + 0.12 + 0.11/sqrt(n)) D``.
    """
    x = np.asarray(samples, dtype=float).ravel()
    d = ks_statistic_std_normal(x)
    rn = math.sqrt(x.size)
    lam = (rn + 0.12 + 0.11 / rn) * d
    return d, kolmogorov_sf(lam)
