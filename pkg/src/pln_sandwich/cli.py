"""``pln`` command line: fit, variance, simulate, coverage.

Exit codes: 0 success, 1 error (including usage errors), 2 fit stopped at the
iteration cap without converging (the result is still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .core import ModelParams, VariationalParams
from .exceptions import PLNError
from .fit import FitConfig, fit
from .io import (
    RunManifest,
    config_digest,
    file_digest,
    manifest_path,
    matrix_from_json,
    matrix_to_json,
    parse_dataset,
    read_json,
    write_json,
    write_matrix_csv,
)
from .sim import ScenarioConfig, generate_scenario, make_rng, run_coverage_experiment, sample_counts
from .variance import METHODS, variance_report

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

logger = logging.getLogger("pln")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return value


def _level(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {text}")
    return value


def _rho(text):
    if text == "random":
        return None
    value = float(text)
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError(f"rho must lie in [0, 1) or be 'random', got {text}")
    return value


def _config_of(args, skip=("func", "threads")):
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _fit_config(args):
    return FitConfig(
        outer_tol=args.tol,
        max_outer_iters=args.max_iters,
        psi_grad_tol=args.psi_tol,
    )


def _inputs(**paths):
    paths = {k: os.fspath(v) for k, v in paths.items() if v is not None}
    return paths, {k: file_digest(v) for k, v in paths.items()}


def cmd_fit(args) -> int:
    start = time.perf_counter()
    named = parse_dataset(args.counts, args.covariates, args.offsets)
    data = named.data
    init = None
    if args.warm_start:
        prev = read_json(args.warm_start)
        B = matrix_from_json(prev["params"]["B"])
        Omega = matrix_from_json(prev["params"]["Omega"])
        M = matrix_from_json(prev["variational"]["M"])
        S = matrix_from_json(prev["variational"]["S"])
        if B.shape != (data.m, data.p) or M.shape != (data.n, data.p):
            raise PLNError("warm-start fit does not match the shape of the data")
        init = (ModelParams(B, Omega), VariationalParams(M, S))
    result = fit(data, _fit_config(args), init=init, b_step=args.b_step)
    theta, vpar = result.theta_hat, result.vpar_hat
    paths, digests = _inputs(counts=args.counts, covariates=args.covariates, offsets=args.offsets)
    manifest = RunManifest(
        command="fit",
        config_digest=config_digest(_config_of(args, skip=("func", "threads", "out"))),
        input_digests=digests,
        input_paths=paths,
        threads=args.threads,
        wall_clock_seconds=time.perf_counter() - start,
    )
    payload = {
        "params": {
            "B": matrix_to_json(theta.regression),
            "Sigma": matrix_to_json(theta.covariance),
            "Omega": matrix_to_json(theta.precision),
            "covariates": named.covariates,
            "variables": named.variables,
        },
        "variational": {"M": matrix_to_json(vpar.means), "S": matrix_to_json(vpar.sdevs)},
        "trace": {
            "elbo": list(result.elbo_trace),
            "converged": result.converged,
            "iterations": result.iterations,
            "warnings": list(result.warnings),
        },
        "manifest": manifest.to_dict(),
    }
    write_json(args.out, payload)
    status = "converged" if result.converged else "did NOT converge"
    print(f"fit {status} after {result.iterations} iterations; ELBO {result.elbo:.10g}; wrote {args.out}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_variance(args) -> int:
    start = time.perf_counter()
    fitted = read_json(args.fit)
    recorded = fitted["manifest"]["input_paths"]
    counts = args.counts or recorded["counts"]
    covariates = args.covariates or recorded["covariates"]
    offsets = args.offsets or recorded.get("offsets")
    named = parse_dataset(counts, covariates, offsets)
    paths, digests = _inputs(counts=counts, covariates=covariates, offsets=offsets)
    expected = fitted["manifest"]["input_digests"]
    for key, digest in digests.items():
        if key in expected and expected[key] != digest:
            logger.warning("%s file %s differs from the one used for the fit", key, paths[key])
    theta = ModelParams(matrix_from_json(fitted["params"]["B"]), matrix_from_json(fitted["params"]["Omega"]))
    vpar = VariationalParams(
        matrix_from_json(fitted["variational"]["M"]), matrix_from_json(fitted["variational"]["S"])
    )
    methods = METHODS if args.method == "both" else (args.method,)
    covariate_names = fitted["params"].get("covariates") or named.covariates
    variable_names = fitted["params"].get("variables") or named.variables
    rows = []
    for method in methods:
        report = variance_report(theta, vpar, named.data, method, args.level)
        for j, variable in enumerate(variable_names):
            for k, covariate in enumerate(covariate_names):
                rows.append(
                    [
                        covariate,
                        variable,
                        report.estimate[k, j],
                        report.se[k, j],
                        report.ci_lower[k, j],
                        report.ci_upper[k, j],
                        method,
                    ]
                )
    _write_ci_table(args.out, rows)
    paths["fit"] = os.fspath(args.fit)
    digests["fit"] = file_digest(args.fit)
    manifest = RunManifest(
        command="variance",
        config_digest=config_digest(_config_of(args, skip=("func", "threads", "out"))),
        input_digests=digests,
        input_paths=paths,
        threads=args.threads,
        wall_clock_seconds=time.perf_counter() - start,
    )
    write_json(manifest_path(args.out), {"manifest": manifest.to_dict()})
    print(f"wrote {len(rows)} confidence intervals to {args.out}")
    return EXIT_OK


def _write_ci_table(path, rows):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        writer.writerow(["covariate", "variable", "estimate", "se", "ci_low", "ci_high", "method"])
        for row in rows:
            writer.writerow(row[:2] + ["%.17g" % v for v in row[2:6]] + [row[6]])


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    cfg = ScenarioConfig(args.n, args.p, args.m, rho=args.rho, seed=args.seed, replicates=args.replicate + 1)
    scenario = generate_scenario(cfg, args.replicate)
    data = sample_counts(scenario, make_rng(args.seed, 2, args.replicate))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variables = [f"y{j + 1}" for j in range(args.p)]
    covariates = [f"x{k + 1}" for k in range(args.m)]
    files = {
        "B_star": out / "B_star.csv",
        "Sigma_star": out / "Sigma_star.csv",
        "X": out / "X.csv",
        "Y": out / "Y.csv",
    }
    write_matrix_csv(files["B_star"], scenario.B_star, variables, row_labels=covariates, row_label_name="covariate")
    write_matrix_csv(files["Sigma_star"], scenario.Sigma_star, variables, row_labels=variables, row_label_name="variable")
    write_matrix_csv(files["X"], data.covariates, covariates, integer=True)
    write_matrix_csv(files["Y"], data.counts, variables, integer=True)
    manifest = RunManifest(
        command="simulate",
        config_digest=config_digest(_config_of(args, skip=("func", "threads", "out_dir"))),
        seed=args.seed,
        threads=args.threads,
        wall_clock_seconds=time.perf_counter() - start,
    )
    write_json(
        out / "manifest.json",
        {
            "manifest": manifest.to_dict(),
            "rho": scenario.rho,
            "outputs": {k: {"path": v.name, "digest": file_digest(v)} for k, v in files.items()},
        },
    )
    print(f"wrote simulated scenario (rho={scenario.rho:.6f}) to {out}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    start = time.perf_counter()
    cfg = ScenarioConfig(args.n, args.p, args.m, rho=args.rho, seed=args.seed, replicates=args.replicates)
    report = run_coverage_experiment(cfg, _fit_config(args), level=args.level, workers=args.threads)
    manifest = RunManifest(
        command="coverage",
        config_digest=config_digest(_config_of(args, skip=("func", "threads", "out"))),
        seed=args.seed,
        threads=args.threads,
        wall_clock_seconds=time.perf_counter() - start,
    )
    payload = report.to_dict()
    payload["manifest"] = manifest.to_dict()
    write_json(args.out, payload)
    cov = ", ".join(f"{m} {v:.4f}" for m, v in report.coverage.items())
    print(f"coverage at level {args.level}: {cov}; {report.failures} failed replicates; wrote {args.out}")
    return EXIT_OK


def _add_fit_flags(parser):
    parser.add_argument("--tol", type=_positive_float, default=1e-8, help="relative ELBO change to stop")
    parser.add_argument("--max-iters", type=_positive_int, default=500, help="outer iteration cap")
    parser.add_argument("--psi-tol", type=_positive_float, default=1e-8, help="profiling gradient tolerance")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pln", description="Poisson-lognormal regression with sandwich confidence intervals")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    default_threads = os.cpu_count() or 1

    p_fit = sub.add_parser("fit", help="fit the model to CSV data")
    p_fit.add_argument("--counts", required=True)
    p_fit.add_argument("--covariates", required=True)
    p_fit.add_argument("--offsets")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--warm-start", help="previous fit JSON to start from")
    p_fit.add_argument("--b-step", choices=("joint", "column"), default="joint")
    p_fit.add_argument("--threads", type=_positive_int, default=default_threads)
    _add_fit_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_var = sub.add_parser("variance", help="confidence intervals for the regression coefficients")
    p_var.add_argument("--fit", required=True)
    p_var.add_argument("--method", choices=METHODS + ("both",), default="sandwich")
    p_var.add_argument("--level", type=_level, default=0.95)
    p_var.add_argument("--out", required=True)
    p_var.add_argument("--counts", help="override the counts path recorded in the fit")
    p_var.add_argument("--covariates", help="override the covariates path recorded in the fit")
    p_var.add_argument("--offsets", help="override the offsets path recorded in the fit")
    p_var.add_argument("--threads", type=_positive_int, default=default_threads)
    p_var.set_defaults(func=cmd_variance)

    for name, help_text in (("simulate", "simulate one synthetic dataset"), ("coverage", "run a coverage experiment")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--n", type=_positive_int, required=True)
        p.add_argument("--p", type=_positive_int, required=True)
        p.add_argument("--m", type=_positive_int, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--rho", type=_rho, default=None, help="Toeplitz correlation or 'random' (default)")
        p.add_argument("--threads", type=_positive_int, default=default_threads)
        if name == "simulate":
            p.add_argument("--replicate", type=int, default=0, help="replicate stream to draw")
            p.add_argument("--out-dir", required=True)
            p.set_defaults(func=cmd_simulate)
        else:
            p.add_argument("--replicates", type=_positive_int, required=True)
            p.add_argument("--level", type=_level, default=0.95)
            p.add_argument("--out", required=True)
            _add_fit_flags(p)
            p.set_defaults(func=cmd_coverage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (PLNError, OSError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"pln {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
