"""Command-line interface.

Exit codes: 0 on success, 1 on malformed input, 2 when a fit fails.
The default output directory for ``simulate`` and ``illustrate`` is taken
from ``ROBUSTMED_OUTPUT_DIR`` when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from robustmed.exceptions import (
    BootstrapError,
    NotEstimableError,
    OutOfRegionError,
    ProfilingError,
    RankDeficientError,
    SingularInformationError,
)
from robustmed.fitting import DataFormatError, Dataset, GridBounds, default_bounds, fit_ols, read_dataset_csv
from robustmed.intervals import (
    BootstrapConfig,
    EffectCurveBand,
    classical_effect_band,
    invert_band_for_med,
    percentile_bootstrap_band,
    profile_likelihood_band,
    wald_effect_band,
)
from robustmed.irwls import Criterion, IrwlsConfig, irwls_fit, irwls_med_ci
from robustmed.mcpmod import CandidateSet, CritMethod, Selection, mcpmod_med, poc_test
from robustmed.med import (
    MedEstimate,
    MedRequest,
    classical_med_ci,
    information_matrix,
    med_estimator_with_screen,
    med_from_theta,
)
from robustmed.models import DoseDesign, ModelKind, eval_mean
from robustmed.robust import ScoreFunction, _Problem, rr_fit, rr_med_ci
from robustmed.simlab import ScenarioError, load_scenario, run_study, write_outputs
from robustmed.weights import WeightSpec, WeightTag, compute_weight, design_weights

ENV_OUTPUT_DIR = "ROBUSTMED_OUTPUT_DIR"
EXIT_OK, EXIT_INPUT, EXIT_FIT = 0, 1, 2

FIT_ERRORS = (RankDeficientError, NotEstimableError, SingularInformationError, OutOfRegionError,
              ProfilingError, BootstrapError)
INPUT_ERRORS = (DataFormatError, ScenarioError, FileNotFoundError, ValueError, KeyError)

ILLUSTRATION_THETA = (0.32, 0.74, 0.14)
ILLUSTRATION_DOSES = (0.0, 0.05, 0.2, 0.6, 1.0)
WEIGHT_CURVE_THETA = (0.2, 0.7, 0.2)
WEIGHT_CURVE_DELTA = 0.4


class InputError(ValueError):
    """Invalid command-line input."""


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with the input-error code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _default_out_dir() -> str:
    return os.environ.get(ENV_OUTPUT_DIR, "robustmed_out")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


def _emit(report: dict, out: Optional[str]) -> None:
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _write_band(band: EffectCurveBand, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dose", "lower", "fitted", "upper"])
        for row in band.rows():
            writer.writerow(["" if v is None else repr(round(float(v), 12)) for v in row])


def _load(args) -> Dataset:
    if not Path(args.data).is_file():
        raise FileNotFoundError(f"data file not found: {args.data}")
    return read_dataset_csv(args.data)


def _bounds(kind: ModelKind, data: Dataset, grid_points: int) -> GridBounds:
    return default_bounds(kind, data.design, grid_points=grid_points)


def _weight(args) -> WeightSpec:
    if args.w7_k1 <= args.w7_k2:
        raise InputError("--w7-k1 must exceed --w7-k2")
    return WeightSpec(WeightTag(args.weight), clip=args.clip, k1=args.w7_k1, k2=args.w7_k2)


def _request(args) -> MedRequest:
    return MedRequest(args.delta, args.alpha, args.level)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    data = _load(args)
    kind = ModelKind.parse(args.model)
    fit = fit_ols(kind, data, _bounds(kind, data, args.grid_points))
    _emit({"fit": fit.to_dict(), "design": {"doses": list(data.design.doses),
                                           "allocations": list(data.design.allocations)}}, args.out)
    return EXIT_OK


def cmd_med(args) -> int:
    data = _load(args)
    kind = ModelKind.parse(args.model)
    req = _request(args)
    fit = fit_ols(kind, data, _bounds(kind, data, args.grid_points))
    point = med_estimator_with_screen(fit, req, grid_points=args.med_grid_points)
    ci = classical_med_ci(fit, req)
    report = {"value": point.value, "lower": ci.lower, "upper": ci.upper, "se": ci.se,
              "method": "classical", "med_theta": ci.value, "info": {**point.info, **ci.info}}
    _emit(report, args.out)
    return EXIT_OK if point.value is not None else EXIT_FIT


def cmd_irwls(args) -> int:
    data = _load(args)
    kind = ModelKind.parse(args.model)
    req = _request(args)
    weight = _weight(args)
    cfg = IrwlsConfig(weight, args.tol, args.max_iter, Criterion(args.criterion))
    fit, est = irwls_fit(kind, data, _bounds(kind, data, args.grid_points), req, cfg)
    report = {"fit": fit.to_dict(), "med": est.to_dict()}
    if fit.converged and weight.continuous:
        report["ci"] = irwls_med_ci(fit, req, weight).to_dict()
    _emit(report, args.out)
    return EXIT_OK if fit.converged else EXIT_FIT


def cmd_rr(args) -> int:
    data = _load(args)
    kind = ModelKind.parse(args.model)
    req = _request(args)
    weight = _weight(args)
    fit, cov = rr_fit(kind, data, _bounds(kind, data, args.grid_points), req, weight,
                      max_iter=args.max_iter, variant=args.variant, enforce_bounds=args.enforce_bounds)
    try:
        score = _Problem(ScoreFunction(kind, weight, req, data.design), data).score(fit.theta_vec)
        score_norm = float(np.max(np.abs(score)))
    except OutOfRegionError:
        score_norm = None
    report = {
        "fit": fit.to_dict(),
        "diagnostics": {"converged": fit.converged, "iterations": fit.iterations,
                        "score_norm": score_norm, "singular": fit.converged and cov is None,
                        "condition_number": None if cov is None else cov.condition,
                        "message": fit.message},
    }
    try:
        report["med"] = med_from_theta(kind, fit.theta_vec, req.delta, data.design.placebo)
    except NotEstimableError as exc:
        report["med"] = None
        report["diagnostics"]["med_reason"] = str(exc)
    if cov is not None:
        report["ci"] = rr_med_ci(fit.theta_vec, cov, req, data.n, kind, data.design.placebo).to_dict()
    _emit(report, args.out)
    return EXIT_OK if fit.converged else EXIT_FIT


def _ci_band(args, kind: ModelKind, data: Dataset, req: MedRequest) -> tuple[MedEstimate, Optional[EffectCurveBand]]:
    bounds = _bounds(kind, data, args.grid_points)
    method = args.method
    if method == "classical":
        fit = fit_ols(kind, data, bounds)
        return classical_med_ci(fit, req), classical_effect_band(fit, args.level, args.band_points)
    if method == "irwls":
        weight = _weight(args)
        fit, _ = irwls_fit(kind, data, bounds, req, IrwlsConfig(weight, args.tol, args.max_iter))
        if not fit.converged:
            raise NotEstimableError(f"IRWLS did not converge: {fit.message or 'fallback to OLS'}")
        est = irwls_med_ci(fit, req, weight)
        med = med_from_theta(kind, fit.theta_vec, req.delta, data.design.placebo)
        w = design_weights(weight, med, data.design)
        M = information_matrix(kind, fit.theta_vec, data.design, w) * data.n
        cov = fit.sigma ** 2 * np.linalg.pinv(M, rcond=float(np.sqrt(np.finfo(float).eps)), hermitian=True)
        return est, wald_effect_band(kind, fit.theta_vec, cov, data.design, args.level,
                                     grid_points=args.band_points, method="irwls")
    if method == "rr":
        weight = _weight(args)
        fit, cov = rr_fit(kind, data, bounds, req, weight, max_iter=args.max_iter)
        if not fit.converged or cov is None:
            raise NotEstimableError(f"robust regression failed: {fit.message or 'singular sandwich'}")
        est = rr_med_ci(fit.theta_vec, cov, req, data.n, kind, data.design.placebo)
        return est, wald_effect_band(kind, fit.theta_vec, cov.covariance / data.n, data.design, args.level,
                                     grid_points=args.band_points, method="rr")
    if method == "pboot":
        cfg = BootstrapConfig(args.b_samples, args.band_points, args.seed, args.level)
        band = percentile_bootstrap_band(kind, data, bounds, cfg)
        return invert_band_for_med(band, req.delta), band
    band = profile_likelihood_band(kind, data, bounds, args.level, grid_points=args.band_points)
    return invert_band_for_med(band, req.delta), band


def cmd_ci(args) -> int:
    data = _load(args)
    kind = ModelKind.parse(args.model)
    req = _request(args)
    est, band = _ci_band(args, kind, data, req)
    report = est.to_dict()
    report["method"] = args.method
    if band is not None and args.band_out:
        _write_band(band, args.band_out)
        report["band_file"] = str(args.band_out)
    _emit(report, args.out)
    return EXIT_OK


def cmd_mcpmod(args) -> int:
    data = _load(args)
    if args.candidates:
        with open(args.candidates) as fh:
            try:
                candidates = CandidateSet.from_json(json.load(fh))
            except json.JSONDecodeError as exc:
                raise InputError(f"{args.candidates}: line {exc.lineno}: {exc.msg}") from None
    else:
        candidates = CandidateSet()
    req = _request(args)
    poc = poc_test(candidates, data, args.alpha, CritMethod(args.crit_method), Selection(args.selection),
                   seed=args.crit_seed)
    est = mcpmod_med(data, candidates, req, args.estimator, _weight(args), poc=poc)
    _emit({"poc": poc.to_dict(), "med": est.to_dict()}, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    changes = {}
    if args.replicates is not None:
        changes["replicates"] = args.replicates
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n is not None:
        changes["n_per_group"] = args.n
    if args.b_samples is not None:
        changes["b_samples"] = args.b_samples
    if changes:
        scenario = scenario.with_changes(**changes)
    out_dir = Path(args.out_dir) / scenario.name if args.subdir else Path(args.out_dir)
    summary = run_study(scenario, threads=args.threads)
    paths = write_outputs(summary, out_dir)
    print(json.dumps({k: str(v) for k, v in sorted(paths.items())}, indent=2))
    return EXIT_OK


def _write_weight_curves(path: Path, design: DoseDesign, grid_points: int) -> None:
    """Weight functions ``w1`` .. ``w7`` centred at the MED of the reference Emax curve."""
    med = med_from_theta(ModelKind.EMAX, WEIGHT_CURVE_THETA, WEIGHT_CURVE_DELTA)
    grid = np.linspace(design.placebo, design.d_max, grid_points)
    tags = [t for t in WeightTag if t is not WeightTag.UNIT]
    curves = [np.asarray(compute_weight(WeightSpec(t), grid, med, design), dtype=np.float64) for t in tags]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dose"] + [t.value for t in tags])
        for i, d in enumerate(grid):
            writer.writerow([repr(round(float(d), 12))] + [repr(round(float(c[i]), 12)) for c in curves])


def cmd_illustrate(args) -> int:
    """Effect curves and bands for one simulated Emax dataset, plus the weight curves."""
    kind = ModelKind.EMAX
    design = DoseDesign.balanced(ILLUSTRATION_DOSES, args.n)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed]))
    mu = eval_mean(kind, ILLUSTRATION_THETA, design.dose_array.repeat(args.n))
    y = mu + rng.normal(0.0, args.sigma, mu.size)
    data = Dataset(design, np.arange(len(design.doses)).repeat(args.n), y)
    req = MedRequest(args.delta, level=args.level)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.to_csv(out / "data.csv")

    fit = fit_ols(kind, data)
    classical = classical_effect_band(fit, args.level, args.band_points)
    grid = classical.grid
    weight = WeightSpec(WeightTag(args.weight))
    rr, cov = rr_fit(kind, data, request=req, weight=weight)
    truth = eval_mean(kind, ILLUSTRATION_THETA, grid) - eval_mean(kind, ILLUSTRATION_THETA, design.placebo)
    columns = {"dose": grid, "true_effect": truth, "classical_fitted": classical.fitted,
               "classical_lower": classical.lower, "classical_upper": classical.upper}
    if rr.converged and cov is not None:
        band = wald_effect_band(kind, rr.theta_vec, cov.covariance / data.n, design, args.level, grid=grid,
                                method="rr")
        columns.update(rr_fitted=band.fitted, rr_lower=band.lower, rr_upper=band.upper)
    with open(out / "effect_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(columns))
        for row in zip(*columns.values()):
            writer.writerow([repr(round(float(v), 12)) for v in row])
    _write_weight_curves(out / "weight_curves.csv", design, args.band_points)
    summary = {
        "true_med": med_from_theta(kind, ILLUSTRATION_THETA, args.delta),
        "classical": classical_med_ci(fit, req).to_dict(),
        "rr_converged": rr.converged,
        "rr_message": rr.message,
        "rr": (rr_med_ci(rr.theta_vec, cov, req, data.n, kind).to_dict()
               if rr.converged and cov is not None else None),
        "config": {"n": args.n, "seed": args.seed, "sigma": args.sigma, "delta": args.delta,
                   "weight": args.weight, "level": args.level, "theta": list(ILLUSTRATION_THETA),
                   "doses": list(ILLUSTRATION_DOSES)},
    }
    _emit(summary, str(out / "illustration.json"))
    print(json.dumps({"data": str(out / "data.csv"), "curves": str(out / "effect_curves.csv"),
                      "weights": str(out / "weight_curves.csv"),
                      "summary": str(out / "illustration.json")}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def _int_at_least(lo: int):
    def parse(text: str) -> int:
        v = int(text)
        if v < lo:
            raise argparse.ArgumentTypeError(f"expected an integer >= {lo}, got {text}")
        return v
    return parse


def _add_data(p: argparse.ArgumentParser, model: bool = True) -> None:
    p.add_argument("--data", required=True, help="CSV file with 'dose' and 'response' columns")
    if model:
        p.add_argument("--model", required=True, choices=[k.value for k in ModelKind], help="dose-response model")
    p.add_argument("--grid-points", type=_int_at_least(2), default=30,
                   help="grid points per nonlinear parameter in the least squares search")
    p.add_argument("--out", help="write the JSON report here instead of standard output")


def _add_request(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta", type=_positive_float, default=0.4, help="clinically relevant effect over placebo")
    p.add_argument("--alpha", type=_unit_interval, default=0.025, help="one-sided level of the significance screen")
    p.add_argument("--level", type=_unit_interval, default=0.95, help="two-sided confidence level")


def _add_weight(p: argparse.ArgumentParser, default: str = "w5") -> None:
    p.add_argument("--weight", choices=[t.value for t in WeightTag], default=default, help="weight function centred at the MED")
    p.add_argument("--clip", type=_unit_interval, default=0.9999, help="clipping constant for |z|")
    p.add_argument("--w7-k1", type=_int_at_least(1), default=5, help="w7 weight at the dose closest to the MED")
    p.add_argument("--w7-k2", type=_int_at_least(1), default=1, help="w7 weight elsewhere")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="robustmed", description="Minimum effective dose estimation.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="least squares fit of a dose-response model", formatter_class=fmt)
    _add_data(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("med", help="classical MED estimate and delta-method interval", formatter_class=fmt)
    _add_data(p)
    _add_request(p)
    p.add_argument("--med-grid-points", type=_int_at_least(2), default=1001,
                   help="dose grid size for the screened estimator")
    p.set_defaults(func=cmd_med)

    p = sub.add_parser("irwls", help="iteratively reweighted least squares", formatter_class=fmt)
    _add_data(p)
    _add_request(p)
    _add_weight(p, "w6")
    p.add_argument("--criterion", choices=[c.value for c in Criterion], default="a",
                   help="a: relative change of the MED; b: relative change of the response at the MED")
    p.add_argument("--tol", type=_positive_float, default=0.001, help="convergence tolerance")
    p.add_argument("--max-iter", type=_int_at_least(1), default=100, help="maximum number of iterations")
    p.set_defaults(func=cmd_irwls)

    p = sub.add_parser("rr", help="robust regression by weighted estimating equations", formatter_class=fmt)
    _add_data(p)
    _add_request(p)
    _add_weight(p, "w5")
    p.add_argument("--max-iter", type=_int_at_least(1), default=100, help="maximum Newton iterations")
    p.add_argument("--variant", choices=["full", "expected"], default="full", help="sandwich bread matrix")
    p.add_argument("--enforce-bounds", action="store_true",
                   help="keep nonlinear parameters inside the least squares search box")
    p.set_defaults(func=cmd_rr)

    p = sub.add_parser("ci", help="MED confidence interval and effect-curve band", formatter_class=fmt)
    _add_data(p)
    _add_request(p)
    _add_weight(p, "w5")
    p.add_argument("--method", choices=["classical", "irwls", "rr", "pboot", "proflik"], default="classical",
                   help="interval method")
    p.add_argument("--b-samples", type=_int_at_least(100), default=1000, help="bootstrap resamples")
    p.add_argument("--band-points", type=_int_at_least(11), default=201, help="dose grid size of the band")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--tol", type=_positive_float, default=0.001, help="IRWLS convergence tolerance")
    p.add_argument("--max-iter", type=_int_at_least(1), default=100, help="maximum iterations")
    p.add_argument("--band-out", help="write the band as CSV (dose, lower, fitted, upper)")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("mcpmod", help="proof-of-concept test and MED", formatter_class=fmt)
    _add_data(p, model=False)
    _add_request(p)
    _add_weight(p, "w6")
    p.add_argument("--candidates", help="JSON list of {model, gamma}; default linear, emax(0.2), sigemax(0.4, 4)")
    p.add_argument("--estimator", choices=["classical", "rr"], default="classical", help="MED estimator")
    p.add_argument("--crit-method", choices=[c.value for c in CritMethod], default="simulate",
                   help="critical value of the maximum contrast test")
    p.add_argument("--selection", choices=[s.value for s in Selection], default="maxt", help="model selection")
    p.add_argument("--crit-seed", type=int, default=20180829, help="seed of the critical value simulation")
    p.set_defaults(func=cmd_mcpmod)

    p = sub.add_parser("simulate", help="run a simulation scenario", formatter_class=fmt)
    p.add_argument("scenario", help="bundled scenario name, scenario JSON or run manifest")
    p.add_argument("--out-dir", default=_default_out_dir(), help=f"output directory (env {ENV_OUTPUT_DIR})")
    p.add_argument("--subdir", action="store_true", help="write into a subdirectory named after the scenario")
    p.add_argument("--threads", type=_int_at_least(1), default=os.cpu_count() or 1, help="worker processes")
    p.add_argument("--replicates", type=_int_at_least(1), help="override the replicate count")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--n", type=_int_at_least(2), nargs="+", help="override the group sizes")
    p.add_argument("--b-samples", type=_int_at_least(100), help="override the bootstrap resamples")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("illustrate", help="effect curves and bands for one simulated Emax dataset",
                       formatter_class=fmt)
    p.add_argument("--out-dir", default=_default_out_dir(), help=f"output directory (env {ENV_OUTPUT_DIR})")
    p.add_argument("--n", type=_int_at_least(2), default=50, help="patients per dose group")
    p.add_argument("--seed", type=int, default=1, help="data seed")
    p.add_argument("--sigma", type=_positive_float, default=0.65, help="residual standard deviation")
    p.add_argument("--delta", type=_positive_float, default=0.2, help="clinically relevant effect")
    p.add_argument("--level", type=_unit_interval, default=0.95, help="band level")
    p.add_argument("--weight", choices=["w1", "w2", "w3", "w4", "w5", "w6"], default="w5",
                   help="weight of the robust fit")
    p.add_argument("--band-points", type=_int_at_least(11), default=201, help="dose grid size")
    p.set_defaults(func=cmd_illustrate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FIT_ERRORS as exc:
        print(f"robustmed {args.command}: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except INPUT_ERRORS as exc:
        print(f"robustmed {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"robustmed {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
