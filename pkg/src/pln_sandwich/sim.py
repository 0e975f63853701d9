"""Synthetic PLN scenarios and the coverage / normality / consistency harness.

Random streams come from a counter-based generator (Philox) keyed by the
experiment seed plus a spawn key, so every replicate owns an independent
stream and can be regenerated on its own.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Union

import numpy as np

from .core import CountDataset
from .exceptions import PLNError, SamplingError
from .fit import FitConfig, fit
from .stats import ks_pvalue_std_normal, two_sided_quantile
from .variance import METHODS, variance_report

logger = logging.getLogger(__name__)

#: Largest Poisson rate the sampler accepts.
MAX_RATE = 1e12

_PARAM_STREAM = 0
_DESIGN_STREAM = 1
_COUNT_STREAM = 2


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the stream ``key`` of experiment ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class ScenarioConfig:
    """Sizes, correlation and seed of a simulation experiment.

    ``rho=None`` draws the Toeplitz correlation from ``U([0.8, 0.95])``.
    """

    n: int
    p: int
    m: int
    rho: Optional[float] = None
    seed: int = 0
    replicates: int = 1

    def __post_init__(self):
        for name in ("n", "p", "m", "replicates"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.rho is not None and not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")


@dataclass(frozen=True, eq=False)
class Scenario:
    B_star: np.ndarray
    Sigma_star: np.ndarray
    design: np.ndarray
    rho: float


def toeplitz_covariance(p: int, rho: float) -> np.ndarray:
    """``Sigma_kj = 1{k = j} + rho^|k - j|``."""
    lags = np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    return np.eye(p) + rho**lags


def multinomial_design(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """``n x m`` one-hot rows with each category drawn with probability ``1/m``."""
    return np.eye(m)[rng.integers(0, m, size=n)]


def generate_parameters(cfg: ScenarioConfig):
    """True ``(B_star, Sigma_star, rho)``, shared by all replicates."""
    rng = make_rng(cfg.seed, _PARAM_STREAM)
    rho = float(rng.uniform(0.8, 0.95)) if cfg.rho is None else float(cfg.rho)
    B_star = rng.normal(2.0, 1.0, size=(cfg.m, cfg.p))
    Sigma_star = toeplitz_covariance(cfg.p, rho)
    np.linalg.cholesky(Sigma_star)
    return B_star, Sigma_star, rho


def generate_scenario(cfg: ScenarioConfig, replicate: int = 0) -> Scenario:
    """True parameters plus the design matrix of one replicate."""
    B_star, Sigma_star, rho = generate_parameters(cfg)
    design = multinomial_design(cfg.n, cfg.m, make_rng(cfg.seed, _DESIGN_STREAM, replicate))
    return Scenario(B_star, Sigma_star, design, rho)


def sample_counts(scenario: Scenario, seed: Union[int, np.random.Generator], offsets=None) -> CountDataset:
    """Draw ``Z_i ~ N(0, Sigma*)`` and ``Y_ij ~ Poisson(exp(o_ij + x_i'B*_j + Z_ij))``.

    numpy's Poisson sampler uses inversion for small rates and PTRS
    transformed rejection otherwise.
    """
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(int(seed), _COUNT_STREAM)
    X = scenario.design
    n, p = X.shape[0], scenario.B_star.shape[1]
    O = np.zeros((n, p)) if offsets is None else np.asarray(offsets, dtype=float)
    L = np.linalg.cholesky(scenario.Sigma_star)
    Z = rng.standard_normal((n, p)) @ L.T
    log_rate = O + X @ scenario.B_star + Z
    bad = log_rate > math.log(MAX_RATE)
    if bad.any():
        i, j = (int(k) for k in np.argwhere(bad)[0])
        raise SamplingError(
            f"Poisson rate exp({log_rate[i, j]:.4g}) exceeds {MAX_RATE:g} at ({i}, {j})", (i, j)
        )
    Y = rng.poisson(np.exp(log_rate))
    return CountDataset(Y, X, None if offsets is None else O)


def rmse(estimate, truth) -> float:
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {truth.shape}")
    return float(np.sqrt(np.mean((estimate - truth) ** 2)))


def standardize(B_hat, B_star, var_hat) -> np.ndarray:
    """``(B_hat - B_star) / sqrt(var_hat)``, elementwise."""
    var_hat = np.asarray(var_hat, dtype=float)
    if np.any(~(var_hat > 0)):
        raise ValueError("variances must be strictly positive")
    return (np.asarray(B_hat, dtype=float) - np.asarray(B_star, dtype=float)) / np.sqrt(var_hat)


def coverage_rate(standardized, level: float = 0.95) -> float:
    """Fraction of standardized values inside ``[-phi, phi]``, ``phi = phi_{1-alpha/2}``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    z = np.asarray(standardized, dtype=float)
    return float(np.mean(np.abs(z) <= two_sided_quantile(level)))


@dataclass(frozen=True, eq=False)
class ReplicateResult:
    index: int
    ok: bool
    error: Optional[str] = None
    converged: bool = False
    iterations: int = 0
    rmse_B: float = float("nan")
    rmse_Sigma: float = float("nan")
    standardized: dict = field(default_factory=dict)
    wall_seconds: float = 0.0


@dataclass(frozen=True, eq=False)
class CoverageReport:
    """Aggregated results of :func:`run_coverage_experiment`.

    ``coverage[method]`` pools every coefficient and replicate;
    ``coefficient_coverage`` and ``ks_pvalues`` are ``m x p`` matrices.
    """

    config: ScenarioConfig
    level: float
    rho: float
    B_star: np.ndarray
    Sigma_star: np.ndarray
    replicates: List[ReplicateResult]
    coverage: dict
    coefficient_coverage: dict
    ks_statistics: dict
    ks_pvalues: dict

    @property
    def failures(self) -> int:
        return sum(not r.ok for r in self.replicates)

    def ks_pass_fraction(self, method: str, alpha: float = 0.05) -> float:
        return float(np.mean(self.ks_pvalues[method] > alpha))

    def to_dict(self) -> dict:
        def mat(a):
            a = np.asarray(a, dtype=float)
            return {"rows": a.shape[0], "cols": a.shape[1], "data": a.tolist()}

        return {
            "config": asdict(self.config),
            "level": self.level,
            "rho": self.rho,
            "B_star": mat(self.B_star),
            "Sigma_star": mat(self.Sigma_star),
            "failures": self.failures,
            "coverage": dict(self.coverage),
            "ks_pass_fraction": {m: self.ks_pass_fraction(m) for m in self.ks_pvalues},
            "coefficient_coverage": {m: mat(v) for m, v in self.coefficient_coverage.items()},
            "ks_statistics": {m: mat(v) for m, v in self.ks_statistics.items()},
            "ks_pvalues": {m: mat(v) for m, v in self.ks_pvalues.items()},
            "replicates": [
                {
                    "index": r.index,
                    "ok": r.ok,
                    "error": r.error,
                    "converged": r.converged,
                    "iterations": r.iterations,
                    "rmse_B": r.rmse_B if r.ok else None,
                    "rmse_Sigma": r.rmse_Sigma if r.ok else None,
                    "standardized": {m: mat(v) for m, v in r.standardized.items()},
                    "design_seed_key": [_DESIGN_STREAM, r.index],
                    "count_seed_key": [_COUNT_STREAM, r.index],
                    "wall_seconds": r.wall_seconds,
                }
                for r in self.replicates
            ],
        }


def run_replicate(cfg: ScenarioConfig, index: int, fit_config: FitConfig = FitConfig(), level: float = 0.95):
    """Simulate, fit and standardize one replicate; failures are captured."""
    start = time.perf_counter()
    scenario = generate_scenario(cfg, index)
    try:
        data = sample_counts(scenario, make_rng(cfg.seed, _COUNT_STREAM, index))
        result = fit(data, fit_config)
        standardized = {}
        for method in METHODS:
            report = variance_report(result.theta_hat, result.vpar_hat, data, method, level)
            standardized[method] = standardize(result.theta_hat.regression, scenario.B_star, report.var_B)
    except (PLNError, np.linalg.LinAlgError, ValueError) as exc:
        logger.warning("replicate %d failed: %s", index, exc)
        return ReplicateResult(index, False, error=f"{type(exc).__name__}: {exc}",
                               wall_seconds=time.perf_counter() - start)
    return ReplicateResult(
        index,
        True,
        converged=result.converged,
        iterations=result.iterations,
        rmse_B=rmse(result.theta_hat.regression, scenario.B_star),
        rmse_Sigma=rmse(result.theta_hat.covariance, scenario.Sigma_star),
        standardized=standardized,
        wall_seconds=time.perf_counter() - start,
    )


def _run_replicate_star(args):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        return run_replicate(*args)


def run_coverage_experiment(
    cfg: ScenarioConfig,
    fit_config: FitConfig = FitConfig(),
    level: float = 0.95,
    workers: int = 1,
) -> CoverageReport:
    """Run ``cfg.replicates`` independent replicates and aggregate them.

    Replicates may run in ``workers`` processes; results are assembled in
    replicate order so the report does not depend on ``workers``.
    """
    B_star, Sigma_star, rho = generate_parameters(cfg)
    jobs = [(cfg, k, fit_config, level) for k in range(cfg.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_replicate_star, jobs))
    else:
        results = [run_replicate(*job) for job in jobs]

    good = [r for r in results if r.ok]
    coverage, coef_cov, ks_stat, ks_p = {}, {}, {}, {}
    shape = (cfg.m, cfg.p)
    for method in METHODS:
        if not good:
            coverage[method] = float("nan")
            coef_cov[method] = np.full(shape, np.nan)
            ks_stat[method] = np.full(shape, np.nan)
            ks_p[method] = np.full(shape, np.nan)
            continue
        z = np.stack([r.standardized[method] for r in good])
        q = two_sided_quantile(level)
        coverage[method] = coverage_rate(z, level)
        coef_cov[method] = np.mean(np.abs(z) <= q, axis=0)
        stats = np.empty(shape)
        pvals = np.empty(shape)
        for k in range(cfg.m):
            for j in range(cfg.p):
                stats[k, j], pvals[k, j] = ks_pvalue_std_normal(z[:, k, j])
        ks_stat[method] = stats
        ks_p[method] = pvals
    return CoverageReport(cfg, level, rho, B_star, Sigma_star, results, coverage, coef_cov, ks_stat, ks_p)
