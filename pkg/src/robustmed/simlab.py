"""Monte-Carlo studies: data generation, MED accuracy and interval coverage.

A :class:`SimScenario` fixes the data-generating curve, the design, the
methods to compare and a master seed.  Replicate ``i`` at per-group size
``n`` draws from its own RNG stream seeded by ``(seed, n, i)``, so results
do not depend on how replicates are scheduled across workers.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from robustmed.exceptions import RobustMedError
from robustmed.fitting import Dataset, fit_ols
from robustmed.intervals import (
    BootstrapConfig,
    invert_band_for_med,
    percentile_bootstrap_band,
    profile_likelihood_band,
)
from robustmed.irwls import IrwlsConfig, irwls_fit, irwls_med_ci
from robustmed.mcpmod import Candidate, CandidateSet, CritMethod, mcpmod_med, poc_test
from robustmed.med import MedEstimate, MedRequest, classical_med_ci, med_estimator_with_screen, med_from_theta
from robustmed.models import DoseDesign, ModelKind, Theta, eval_mean
from robustmed.robust import rr_fit, rr_med_ci
from robustmed.weights import WeightSpec

NOISE_RANGES = {"e1": (0.0, 0.01), "e2": (0.0, 0.06)}
STUDIES = ("estimation", "coverage")


class ScenarioError(ValueError):
    """Invalid scenario definition; the message names the offending field."""


@dataclass(frozen=True)
class SimScenario:
    name: str
    truth_kind: ModelKind
    truth_theta: tuple[float, ...]
    doses: tuple[float, ...]
    n_per_group: tuple[int, ...]
    delta: float
    methods: tuple[str, ...]
    study: str = "estimation"
    fit_kind: Optional[ModelKind] = None
    sigma: float = 0.65
    replicates: int = 500
    seed: int = 1
    noise: tuple[tuple[str, str], ...] = ()
    noiseless: bool = False
    level: float = 0.95
    alpha: float = 0.025
    b_samples: int = 1000
    grid_points: int = 201
    candidates: Optional[tuple[tuple[str, tuple[float, ...]], ...]] = None
    crit_method: str = "simulate"

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "truth_kind", ModelKind.parse(self.truth_kind))
        except ValueError as exc:
            raise ScenarioError(f"truth_kind: {exc}") from None
        fit = self.truth_kind if self.fit_kind is None else self.fit_kind
        try:
            object.__setattr__(self, "fit_kind", ModelKind.parse(fit))
        except ValueError as exc:
            raise ScenarioError(f"fit_kind: {exc}") from None
        theta = tuple(float(v) for v in self.truth_theta)
        if len(theta) != self.truth_kind.n_params:
            raise ScenarioError(f"truth_theta: {self.truth_kind.value} needs {self.truth_kind.n_params} values")
        object.__setattr__(self, "truth_theta", theta)
        object.__setattr__(self, "doses", tuple(float(d) for d in self.doses))
        object.__setattr__(self, "n_per_group", tuple(int(n) for n in self.n_per_group))
        object.__setattr__(self, "methods", tuple(str(m) for m in self.methods))
        object.__setattr__(self, "noise", tuple((str(k), str(v)) for k, v in dict(self.noise).items()))
        if self.candidates is not None:
            object.__setattr__(self, "candidates", tuple((str(k), tuple(float(g) for g in gam))
                                                         for k, gam in self.candidates))
        checks = [
            ("sigma", self.sigma > 0),
            ("replicates", self.replicates >= 1),
            ("delta", self.delta > 0),
            ("n_per_group", len(self.n_per_group) > 0 and min(self.n_per_group) >= 2),
            ("doses", len(self.doses) >= 2 and list(self.doses) == sorted(set(self.doses))),
            ("study", self.study in STUDIES),
            ("methods", len(self.methods) > 0),
            ("level", 0 < self.level < 1),
            ("b_samples", self.b_samples >= 100),
            ("grid_points", self.grid_points >= 11),
            ("crit_method", self.crit_method in ("simulate", "bonferroni")),
        ]
        for name, ok in checks:
            if not ok:
                raise ScenarioError(f"{name}: invalid value {getattr(self, name)!r}")
        for key, var in self.noise:
            if var not in NOISE_RANGES:
                raise ScenarioError(f"noise: unknown noise variable {var!r} for {key!r}")
            if key not in self.truth_kind.param_names:
                raise ScenarioError(f"noise: {key!r} is not a parameter of {self.truth_kind.value}")
        for m in self.methods:
            try:
                parse_method(m)
            except ValueError as exc:
                raise ScenarioError(f"methods: {exc}") from None

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out = asdict(self)
        out["truth_kind"] = self.truth_kind.value
        out["fit_kind"] = self.fit_kind.value
        out["noise"] = dict(self.noise)
        out["candidates"] = None if self.candidates is None else [
            {"model": k, "gamma": list(g)} for k, g in self.candidates]
        for key in ("truth_theta", "doses", "n_per_group", "methods"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "SimScenario":
        """Build from a scenario mapping or from a run manifest."""
        if not isinstance(obj, dict):
            raise ScenarioError("scenario: expected a JSON object")
        if "scenario" in obj and isinstance(obj["scenario"], dict):
            obj = obj["scenario"]
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ScenarioError(f"{unknown[0]}: unknown scenario field")
        for req in ("name", "truth_kind", "truth_theta", "doses", "n_per_group", "delta", "methods"):
            if req not in obj:
                raise ScenarioError(f"{req}: missing required field")
        obj = dict(obj)
        if isinstance(obj.get("n_per_group"), int):
            obj["n_per_group"] = [obj["n_per_group"]]
        if obj.get("candidates") is not None:
            obj["candidates"] = [(c["model"], tuple(c.get("gamma", ()))) for c in obj["candidates"]]
        try:
            return cls(**obj)
        except ScenarioError:
            raise
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"scenario: {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "SimScenario":
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(f"{path}: line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(obj)

    def with_changes(self, **changes) -> "SimScenario":
        obj = self.to_dict()
        obj.update(changes)
        return SimScenario.from_dict(obj)

    # -- derived quantities -------------------------------------------------

    @property
    def request(self) -> MedRequest:
        return MedRequest(self.delta, self.alpha, self.level)

    def design(self, n: int) -> DoseDesign:
        return DoseDesign.balanced(self.doses, n)

    def candidate_set(self) -> CandidateSet:
        if self.candidates is None:
            return CandidateSet()
        return CandidateSet(tuple(Candidate(k, g) for k, g in self.candidates))


@dataclass(frozen=True)
class MethodSpec:
    name: str
    family: str
    weight: Optional[WeightSpec] = None


def parse_method(text: str) -> MethodSpec:
    """Parse a method label such as ``classical``, ``rr-w5``, ``irwls-w6``,
    ``pboot``, ``proflik``, ``truth``, ``mcpmod`` or ``mcpmod-rr-w6``."""
    t = text.strip().lower()
    if t in ("classical", "pboot", "proflik", "truth", "mcpmod"):
        return MethodSpec(t, t)
    for prefix in ("mcpmod-rr-", "irwls-", "rr-"):
        if t.startswith(prefix):
            tag = t[len(prefix):]
            try:
                w = WeightSpec.parse(tag)
            except ValueError:
                raise ValueError(f"unknown weight {tag!r} in method {text!r}") from None
            return MethodSpec(t, prefix.rstrip("-"), w)
    raise ValueError(f"unknown method {text!r}")


@dataclass
class SimSummary:
    scenario: SimScenario
    records: list[dict]
    rows: list[dict]

    def row(self, method: str, n: int) -> dict:
        for r in self.rows:
            if r["method"] == method and r["n"] == n:
                return r
        raise KeyError((method, n))


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def _rng(scenario: SimScenario, n: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([scenario.seed, n, index]))


def replicate_truth(scenario: SimScenario, rng: np.random.Generator) -> np.ndarray:
    """True parameter vector for one replicate, with parameter noise drawn when requested."""
    theta = np.array(scenario.truth_theta)
    if scenario.noise:
        draws = {var: rng.uniform(*NOISE_RANGES[var]) for var in sorted(NOISE_RANGES)}
        names = scenario.truth_kind.param_names
        for key, var in scenario.noise:
            theta[names.index(key)] += draws[var]
    return theta


def _generate(scenario: SimScenario, n: int, index: int):
    rng = _rng(scenario, n, index)
    theta = replicate_truth(scenario, rng)
    design = scenario.design(n)
    doses = design.dose_array.repeat(n)
    mu = eval_mean(scenario.truth_kind, theta, doses)
    y = mu if scenario.noiseless else mu + rng.normal(0.0, scenario.sigma, doses.size)
    idx = np.arange(design.dose_array.size).repeat(n)
    return Dataset(design, idx, np.asarray(y, dtype=np.float64)), theta, rng


def generate_dataset(scenario: SimScenario, replicate_index: int, n: Optional[int] = None) -> Dataset:
    """Dataset of replicate ``replicate_index``; ``n`` defaults to the first group size."""
    n = scenario.n_per_group[0] if n is None else n
    return _generate(scenario, n, replicate_index)[0]


# ---------------------------------------------------------------------------
# Per-replicate evaluation
# ---------------------------------------------------------------------------

def _true_med(scenario: SimScenario, theta: np.ndarray) -> Optional[float]:
    try:
        m = med_from_theta(scenario.truth_kind, theta, scenario.delta, scenario.doses[0])
    except (RobustMedError, ValueError):
        return None
    return m if m > scenario.doses[0] else None


def _in_range(value: Optional[float], scenario: SimScenario) -> Optional[float]:
    if value is None or not np.isfinite(value):
        return None
    return value if scenario.doses[0] < value <= scenario.doses[-1] else None


def _point_estimate(spec: MethodSpec, scenario: SimScenario, data: Dataset, theta: np.ndarray,
                    shared: dict) -> MedEstimate:
    kind, req = scenario.fit_kind, scenario.request
    if spec.family == "truth":
        return MedEstimate(_true_med(scenario, theta), "truth")
    if spec.family == "classical":
        return med_estimator_with_screen(fit_ols(kind, data), req)
    if spec.family == "rr":
        fit, _ = rr_fit(kind, data, request=req, weight=spec.weight)
        est = MedEstimate(med_from_theta(kind, fit.theta_vec, req.delta, scenario.doses[0]), spec.name)
        est.info["converged"] = fit.converged
        return est
    if spec.family == "irwls":
        fit, est = irwls_fit(kind, data, request=req, config=IrwlsConfig(weight=spec.weight))
        est.info["converged"] = fit.converged
        return est
    if spec.family in ("mcpmod", "mcpmod-rr"):
        if "poc" not in shared:
            shared["poc"] = poc_test(scenario.candidate_set(), data, scenario.alpha,
                                     CritMethod(scenario.crit_method))
        estimator = "classical" if spec.family == "mcpmod" else "rr"
        weight = spec.weight or WeightSpec("w6")
        return mcpmod_med(data, scenario.candidate_set(), req, estimator, weight, poc=shared["poc"])
    raise ValueError(f"method {spec.name} does not produce point estimates")


def _interval(spec: MethodSpec, scenario: SimScenario, data: Dataset, boot_seed: int) -> MedEstimate:
    kind, req = scenario.fit_kind, scenario.request
    if spec.family == "classical":
        return classical_med_ci(fit_ols(kind, data), req)
    if spec.family == "irwls":
        fit, est = irwls_fit(kind, data, request=req, config=IrwlsConfig(weight=spec.weight))
        if fit.converged:
            out = irwls_med_ci(fit, req, spec.weight)
        else:
            # the interval is defined for converged fits only
            out = MedEstimate(est.value, spec.name, info={"fallback": True, "no_interval": True})
        out.method = spec.name
        return out
    if spec.family == "rr":
        fit, cov = rr_fit(kind, data, request=req, weight=spec.weight)
        if fit.converged and cov is not None:
            out = rr_med_ci(fit.theta_vec, cov, req, data.n, kind, scenario.doses[0])
        else:
            out = classical_med_ci(fit_ols(kind, data), req)
            out.info["fallback"] = True
        out.method = spec.name
        return out
    if spec.family == "pboot":
        cfg = BootstrapConfig(scenario.b_samples, scenario.grid_points, boot_seed, scenario.level)
        return invert_band_for_med(percentile_bootstrap_band(kind, data, None, cfg), req.delta)
    if spec.family == "proflik":
        band = profile_likelihood_band(kind, data, None, scenario.level, grid_points=scenario.grid_points)
        return invert_band_for_med(band, req.delta)
    if spec.family == "truth":
        return MedEstimate(None, "truth")
    raise ValueError(f"method {spec.name} has no interval")


def _num(v) -> Optional[float]:
    return None if v is None or not np.isfinite(v) else float(v)


def run_replicate(scenario: SimScenario, n: int, index: int) -> list[dict]:
    """Evaluate every method on replicate ``index`` at per-group size ``n``."""
    data, theta, rng = _generate(scenario, n, index)
    truth = _true_med(scenario, theta)
    boot_seed = int(np.random.SeedSequence([scenario.seed, n, index, 1]).generate_state(1)[0])
    shared: dict = {}
    out = []
    for m in scenario.methods:
        spec = parse_method(m)
        rec = {"n": n, "replicate": index, "method": spec.name, "true_med": truth,
               "estimate": None, "lower": None, "upper": None, "covered": None,
               "failed": False, "converged": None, "selected": None, "rel_dev": None}
        try:
            if scenario.study == "estimation":
                est = _point_estimate(spec, scenario, data, theta, shared)
                value = _in_range(est.value, scenario)
                rec["estimate"] = value
                rec["converged"] = est.info.get("converged")
                rec["selected"] = est.info.get("selected")
                if value is not None and truth is not None:
                    rec["rel_dev"] = 100.0 * (value - truth) / truth
            else:
                est = _interval(spec, scenario, data, boot_seed)
                rec["estimate"] = _num(est.value) if est.value is not None else None
                rec["lower"] = None if est.lower is None else _num(est.lower)
                rec["upper"] = None if est.upper is None else _num(est.upper)
                no_interval = est.info.get("no_interval", False)
                rec["covered"] = None if truth is None or no_interval else bool(est.covers(truth))
                rec["converged"] = not est.info.get("fallback", False)
        except (RobustMedError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            rec["failed"] = True
            rec["error"] = type(exc).__name__
        out.append(rec)
    return out


def _run_chunk(args):
    scenario_dict, jobs = args
    scenario = SimScenario.from_dict(scenario_dict)
    return [run_replicate(scenario, n, i) for n, i in jobs]


def run_replicates(scenario: SimScenario, threads: Optional[int] = None) -> list[dict]:
    """All replicate records, ordered by ``(n, replicate, method)``."""
    jobs = [(n, i) for n in scenario.n_per_group for i in range(scenario.replicates)]
    threads = (os.cpu_count() or 1) if threads is None else max(int(threads), 1)
    if threads == 1 or len(jobs) == 1:
        results = [run_replicate(scenario, n, i) for n, i in jobs]
    else:
        size = max(1, math.ceil(len(jobs) / (threads * 4)))
        chunks = [jobs[k:k + size] for k in range(0, len(jobs), size)]
        payload = scenario.to_dict()
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = [r for part in pool.map(_run_chunk, [(payload, c) for c in chunks]) for r in part]
    return [rec for recs in results for rec in recs]


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _quantiles(values: np.ndarray):
    if values.size == 0:
        return None, None, None
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return float(values.mean()), float(med), float(q3 - q1)


def summarize(scenario: SimScenario, records: Sequence[dict]) -> list[dict]:
    rows = []
    for n in scenario.n_per_group:
        for m in scenario.methods:
            name = parse_method(m).name
            recs = [r for r in records if r["n"] == n and r["method"] == name]
            failed = sum(r["failed"] for r in recs)
            row = {"n": n, "method": name, "replicates": len(recs), "n_failed": failed}
            if scenario.study == "estimation":
                est = np.array([r["estimate"] for r in recs if r["estimate"] is not None], dtype=float)
                rel = np.array([r["rel_dev"] for r in recs if r["rel_dev"] is not None], dtype=float)
                row["n_not_estimable"] = sum(1 for r in recs if r["estimate"] is None)
                row["not_estimable_rate"] = row["n_not_estimable"] / max(len(recs), 1)
                row["mean_R"], row["median_R"], row["iqr_R"] = _quantiles(rel)
                row["mean_med"], row["median_med"], row["iqr_med"] = _quantiles(est)
            else:
                cov = [r["covered"] for r in recs if not r["failed"] and r["covered"] is not None]
                p = float(np.mean(cov)) if cov else None
                row["n_intervals"] = len(cov)
                row["coverage"] = p
                row["coverage_se"] = None if p is None else math.sqrt(p * (1 - p) / len(cov))
                row["n_fallback"] = sum(1 for r in recs if r["converged"] is False)
                widths = [r["upper"] - r["lower"] for r in recs
                          if r["upper"] is not None and r["lower"] is not None]
                row["median_width"] = float(np.median(widths)) if widths else None
            rows.append(row)
    return rows


def _study(scenario: SimScenario, threads: Optional[int]) -> SimSummary:
    records = run_replicates(scenario, threads)
    return SimSummary(scenario, records, summarize(scenario, records))


def run_estimation_study(scenario: SimScenario, threads: Optional[int] = None) -> SimSummary:
    """Relative-deviation summaries of point estimates per method and group size."""
    if scenario.study != "estimation":
        scenario = scenario.with_changes(study="estimation")
    return _study(scenario, threads)


def run_coverage_study(scenario: SimScenario, threads: Optional[int] = None) -> SimSummary:
    """Coverage of the interval methods per group size."""
    if scenario.study != "coverage":
        scenario = scenario.with_changes(study="coverage")
    return _study(scenario, threads)


def run_study(scenario: SimScenario, threads: Optional[int] = None) -> SimSummary:
    return _study(scenario, threads)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

RECORD_COLUMNS = ["n", "replicate", "method", "true_med", "estimate", "lower", "upper", "covered",
                  "rel_dev", "converged", "selected", "failed"]
ESTIMATION_COLUMNS = ["n", "method", "replicates", "n_failed", "n_not_estimable", "not_estimable_rate",
                      "mean_R", "median_R", "iqr_R", "mean_med", "median_med", "iqr_med"]
COVERAGE_COLUMNS = ["n", "method", "replicates", "n_failed", "n_intervals", "coverage", "coverage_se",
                    "n_fallback", "median_width"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def _write_csv(path: Path, columns: list[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in columns])


def write_outputs(summary: SimSummary, out_dir: str | Path) -> dict[str, Path]:
    """Write ``summary.csv``, ``replicates.csv``, ``coverage.csv`` and ``manifest.json``.

    ``summary.csv`` always holds the point-estimate statistics and
    ``coverage.csv`` the interval statistics; the file that does not
    apply to the study type carries only its header.
    """
    from robustmed import __version__

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sc = summary.scenario
    paths = {name: out / f"{name}.csv" for name in ("summary", "replicates", "coverage")}
    if sc.study == "estimation":
        _write_csv(paths["summary"], ESTIMATION_COLUMNS, summary.rows)
        _write_csv(paths["coverage"], COVERAGE_COLUMNS, [])
    else:
        _write_csv(paths["summary"], ESTIMATION_COLUMNS, [])
        _write_csv(paths["coverage"], COVERAGE_COLUMNS, summary.rows)
    _write_csv(paths["replicates"], RECORD_COLUMNS, summary.records)
    manifest = {
        "scenario": sc.to_dict(),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "outputs": sorted(p.name for p in paths.values()),
    }
    paths["manifest"] = out / "manifest.json"
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def bundled_scenarios() -> dict[str, Path]:
    root = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.json"))}


def load_scenario(name_or_path: str | Path) -> SimScenario:
    """Load a scenario from a path, or by the name of a bundled scenario."""
    p = Path(name_or_path)
    if p.exists():
        return SimScenario.from_json(p)
    bundled = bundled_scenarios()
    key = p.stem if p.suffix == ".json" else str(name_or_path)
    if key in bundled:
        return SimScenario.from_json(bundled[key])
    raise FileNotFoundError(f"scenario not found: {name_or_path}")
