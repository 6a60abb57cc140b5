"""Multiple-contrast proof-of-concept test and model-based MED estimation.

Each candidate shape contributes an optimal contrast; the maximum contrast
statistic is compared with a multiplicity-adjusted critical value.  When
the test rejects, the selected shape is refitted and the MED estimated
either by the classical screened estimator or by robust regression.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.stats import t as student_t

from robustmed.exceptions import NotEstimableError, RankDeficientError
from robustmed.fitting import Dataset, fit_ols
from robustmed.med import MedEstimate, MedRequest, med_estimator_with_screen, med_from_theta
from robustmed.models import DoseDesign, ModelKind, _shape, validate_gamma
from robustmed.robust import rr_fit
from robustmed.weights import WeightSpec

CRIT_SEED = 20180829


@dataclass(frozen=True)
class Candidate:
    kind: ModelKind
    gamma: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if len(self.gamma) != self.kind.arity:
            raise ValueError(f"{self.kind.value} needs {self.kind.arity} guesstimate(s), got {len(self.gamma)}")
        validate_gamma(self.kind, self.gamma)

    @property
    def label(self) -> str:
        return self.kind.value

    def shape(self, doses: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.asarray(_shape(self.kind, doses, self.gamma), dtype=np.float64)


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...] = (
        Candidate(ModelKind.LINEAR),
        Candidate(ModelKind.EMAX, (0.2,)),
        Candidate(ModelKind.SIGEMAX, (0.4, 4.0)),
    )

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ValueError("candidate set must not be empty")

    @classmethod
    def from_json(cls, obj) -> "CandidateSet":
        """Build from ``[{"model": "emax", "gamma": [0.2]}, ...]``."""
        items = obj["candidates"] if isinstance(obj, dict) else obj
        return cls(tuple(Candidate(item["model"], tuple(item.get("gamma", ()))) for item in items))

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)


class CritMethod(str, enum.Enum):
    SIMULATE = "simulate"
    BONFERRONI = "bonferroni"


class Selection(str, enum.Enum):
    MAX_T = "maxt"
    AIC = "aic"


@dataclass
class PocResult:
    statistics: NDArray[np.float64]
    critical_value: float
    significant: tuple[int, ...]
    selected: Optional[int]
    labels: tuple[str, ...]
    df: int
    info: dict = field(default_factory=dict)

    @property
    def poc(self) -> bool:
        return self.selected is not None

    def to_dict(self) -> dict:
        return {
            "statistics": dict(zip(self.labels, map(float, self.statistics))),
            "critical_value": self.critical_value,
            "significant": [self.labels[i] for i in self.significant],
            "selected": None if self.selected is None else self.labels[self.selected],
            "df": self.df,
        }


def optimal_contrasts(candidates: CandidateSet, design: DoseDesign) -> NDArray[np.float64]:
    """Unit-norm contrasts ``c_m`` proportional to ``n_i (mu0_i - weighted mean)``.

    Returns an array of shape ``(M, k)``.
    """
    doses = design.dose_array
    n_i = design.n_array.astype(np.float64)
    if doses.size < 2:
        raise ValueError("contrasts need at least two doses")
    rows = []
    for cand in candidates:
        mu = cand.shape(doses)
        c = n_i * (mu - np.sum(n_i * mu) / n_i.sum())
        norm = np.linalg.norm(c)
        if not np.isfinite(norm) or norm <= 1e-12 * max(np.abs(mu).max(), 1.0):
            raise ValueError(f"candidate {cand.label} has a constant mean vector on this design")
        c = c / norm
        c -= c.mean()
        rows.append(c / np.linalg.norm(c))
    return np.vstack(rows)


def contrast_correlation(contrasts: NDArray[np.float64], n_i: NDArray[np.float64]) -> NDArray[np.float64]:
    cov = (contrasts / n_i) @ contrasts.T
    sd = np.sqrt(np.diag(cov))
    return cov / np.outer(sd, sd)


@lru_cache(maxsize=64)
def _simulated_crit(corr_key: bytes, m: int, df: int, alpha: float, n_sim: int, seed: int) -> float:
    corr = np.frombuffer(corr_key, dtype=np.float64).reshape(m, m)
    vals, vecs = np.linalg.eigh(corr)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    rng = np.random.default_rng(np.random.SeedSequence([seed, m, df]))
    z = rng.standard_normal((n_sim, m)) @ root.T
    w = np.sqrt(rng.chisquare(df, size=n_sim) / df)
    tmax = np.max(z / w[:, None], axis=1)
    return float(np.quantile(tmax, 1.0 - alpha))


def critical_value(corr: NDArray[np.float64], df: int, alpha: float, method: CritMethod = CritMethod.SIMULATE,
                   n_sim: int = 50_000, seed: int = CRIT_SEED) -> float:
    """One-sided critical value for the maximum of correlated t statistics."""
    method = CritMethod(getattr(method, "value", method))
    m = corr.shape[0]
    if method is CritMethod.BONFERRONI or m == 1:
        return float(student_t.ppf(1.0 - alpha / m, df))
    key = np.ascontiguousarray(np.round(corr, 10), dtype=np.float64).tobytes()
    return _simulated_crit(key, m, int(df), float(alpha), int(n_sim), int(seed))


def _aic(kind: ModelKind, data: Dataset) -> float:
    fit = fit_ols(kind, data)
    rss = max(fit.rss, 1e-300)
    return data.n * np.log(rss / data.n) + 2.0 * (kind.n_free + 1)


def poc_test(candidates: CandidateSet, data: Dataset, alpha_level: float = 0.025,
             crit_method: CritMethod = CritMethod.SIMULATE, selection: Selection = Selection.MAX_T,
             n_sim: int = 50_000, seed: int = CRIT_SEED) -> PocResult:
    """Multiple contrast test of a flat dose-response curve."""
    selection = Selection(getattr(selection, "value", selection))
    design = data.design
    n_i, ybar, within = data.group_stats()
    k = n_i.size
    df = data.n - k
    if df < 1:
        raise ValueError("need more observations than dose groups for a pooled variance")
    s = float(np.sqrt(within.sum() / df))
    contrasts = optimal_contrasts(candidates, design)
    num = contrasts @ ybar
    den = s * np.sqrt((contrasts ** 2 / n_i).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        stats = np.where(den > 0, num / np.where(den > 0, den, 1.0),
                         np.where(np.abs(num) <= 1e-12, 0.0, np.sign(num) * np.inf))
    crit = critical_value(contrast_correlation(contrasts, n_i), df, alpha_level, crit_method, n_sim, seed)
    significant = tuple(int(i) for i in np.flatnonzero(stats > crit))
    labels = tuple(c.label for c in candidates)
    selected = None
    info: dict = {}
    if significant:
        if selection is Selection.MAX_T:
            selected = max(significant, key=lambda i: (stats[i], -i))
        else:
            aic = {}
            for i in significant:
                try:
                    aic[i] = _aic(candidates.candidates[i].kind, data)
                except RankDeficientError:
                    continue
            info["aic"] = {labels[i]: float(v) for i, v in aic.items()}
            selected = min(aic, key=lambda i: (aic[i], i)) if aic else None
    return PocResult(stats, crit, significant, selected, labels, df, info)


def mcpmod_med(data: Dataset, candidates: CandidateSet = CandidateSet(), request: MedRequest = MedRequest(0.4),
               estimator: str = "classical", weight: WeightSpec = WeightSpec("w6"),
               poc: Optional[PocResult] = None, alpha_level: float = 0.025,
               crit_method: CritMethod = CritMethod.SIMULATE,
               selection: Selection = Selection.MAX_T) -> MedEstimate:
    """MED after the proof-of-concept step.

    ``estimator="classical"`` applies the screened estimator to the
    least squares refit of the selected shape; ``estimator="rr"`` solves the
    weighted estimating equations and inverts the fitted curve at
    ``delta``.  Passing a precomputed ``poc`` guarantees that both
    estimators share one model selection.
    """
    if estimator not in ("classical", "rr"):
        raise ValueError(f"unknown estimator {estimator!r}")
    poc = poc_test(candidates, data, alpha_level, crit_method, selection) if poc is None else poc
    method = "mcpmod" if estimator == "classical" else f"mcpmod-rr-{weight.tag.value}"
    if not poc.poc:
        return MedEstimate(None, method, info={"poc": False, "selected": None})
    kind = candidates.candidates[poc.selected].kind
    info = {"poc": True, "selected": kind.value}
    try:
        if estimator == "classical":
            est = med_estimator_with_screen(fit_ols(kind, data), request)
            est.method = method
            est.info.update(info)
            return est
        fit, _ = rr_fit(kind, data, request=request, weight=weight)
        info["converged"] = fit.converged
        value = med_from_theta(kind, fit.theta_vec, request.delta, data.design.placebo)
    except (NotEstimableError, RankDeficientError) as exc:
        info["reason"] = str(exc)
        return MedEstimate(None, method, info=info)
    return MedEstimate(value, method, info=info)
