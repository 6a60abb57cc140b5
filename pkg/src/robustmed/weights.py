"""Weight functions that emphasise residuals near the current MED estimate.

Six continuous kernels (``w1`` .. ``w6``) differ in how the distance to
the MED is standardized; odd tags use ``1 - z^2`` and even tags its
square.  ``w7`` is a discrete two-level weight.  ``unit`` is the constant
weight 1 and reduces every weighted estimator to its unweighted form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from robustmed.models import DoseDesign


class WeightTag(str, enum.Enum):
    W1 = "w1"
    W2 = "w2"
    W3 = "w3"
    W4 = "w4"
    W5 = "w5"
    W6 = "w6"
    W7 = "w7"
    UNIT = "unit"

    @property
    def continuous(self) -> bool:
        return self is not WeightTag.W7


@dataclass(frozen=True)
class WeightSpec:
    tag: WeightTag = WeightTag.W5
    clip: float = 0.9999
    k1: int = 5
    k2: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", WeightTag(str(getattr(self.tag, "value", self.tag)).lower()))
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip must lie in (0, 1), got {self.clip}")
        if self.tag is WeightTag.W7 and not (self.k1 > self.k2 >= 1):
            raise ValueError(f"w7 needs integers k1 > k2 >= 1, got k1={self.k1}, k2={self.k2}")

    @classmethod
    def parse(cls, text: str, **kwargs) -> "WeightSpec":
        return cls(WeightTag(text.strip().lower()), **kwargs)

    @property
    def continuous(self) -> bool:
        return self.tag.continuous

    @property
    def floor(self) -> float:
        """Smallest value a continuous weight can take."""
        base = 1.0 - self.clip ** 2
        if self.tag in (WeightTag.W2, WeightTag.W4, WeightTag.W6):
            return base ** 2
        if self.tag is WeightTag.UNIT:
            return 1.0
        return base


def _closest_order(active: NDArray[np.float64], d_med: float) -> NDArray[np.intp]:
    # distance order; ties resolved toward the smaller dose
    dist = np.abs(active - d_med)
    return np.lexsort((active, dist))


def compute_weight(spec: WeightSpec, d: ArrayLike, d_med: float, design: DoseDesign):
    """Weight of dose ``d`` given the MED estimate ``d_med``.

    Parameters
    ----------
    spec : WeightSpec
    d : float or array
        Dose(s) at which to evaluate the weight.
    d_med : float
        Current MED estimate; must be positive.
    design : DoseDesign
        Supplies the active doses used by ``w3`` .. ``w7``.
    """
    if not np.isfinite(d_med) or d_med <= 0:
        raise ValueError(f"weights need a positive MED estimate, got {d_med}")
    d_arr = np.asarray(d, dtype=np.float64)
    tag = spec.tag
    if tag is WeightTag.UNIT:
        out = np.ones_like(d_arr)
        return float(out) if out.ndim == 0 else out

    active = design.active_doses
    order = _closest_order(active, d_med)
    if tag is WeightTag.W7:
        closest = active[order[0]]
        out = np.where(d_arr == closest, float(spec.k1), float(spec.k2))
        return float(out) if out.ndim == 0 else out

    if tag in (WeightTag.W1, WeightTag.W2):
        scale = d_med
    elif tag in (WeightTag.W3, WeightTag.W4):
        scale = float(np.abs(active[order[0]] - d_med))
    else:
        if active.size < 2:
            raise ValueError("w5/w6 need at least two active doses")
        scale = float(np.abs(active[order[1]] - d_med))

    num = d_med - d_arr
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.abs(num) / scale
    z = np.where(num == 0, 0.0, z)
    z = np.where(z < spec.clip, z, spec.clip)
    base = 1.0 - z * z
    out = base if tag in (WeightTag.W1, WeightTag.W3, WeightTag.W5) else base * base
    return float(out) if out.ndim == 0 else out


def design_weights(spec: WeightSpec, d_med: float, design: DoseDesign) -> NDArray[np.float64]:
    """Per-dose weights for every dose of ``design``."""
    return np.asarray(compute_weight(spec, design.dose_array, d_med, design), dtype=np.float64)
