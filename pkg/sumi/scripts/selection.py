#!/usr/bin/env python3
"""
Sample identification for adaptation batches.

Two gates, applied in order:
  1. IQR smoothing - a per-dimension Tukey band around the batch quartiles of
     the concatenated representation h, widened over time by f(t). A sample
     passes when at least beta + (1 - beta) f(t) of its dimensions are inside.
  2. Unimodal assistance - keep samples with low multimodal entropy whose
     unimodal entropies (first + mu * second) are not trivially low.

All comparisons are inclusive.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from objective import QUANTILE_MODES, SCHEDULE_FAMILIES

QUANTILE_MODE_ALIASES = {
    "minmax": "minmax-interp",
    "minmax-interp": "minmax-interp",
    "order": "order-stat",
    "order-stat": "order-stat",
}

SCHEDULE_ALIASES = {
    "linear": "linear",
    "exp": "exponential",
    "exponential": "exponential",
    "log": "logarithmic",
    "logarithmic": "logarithmic",
}

# Band edges are compared with a relative slack of a few thousand ulps so that
# algebraically inclusive bounds stay inclusive after rounding.
BAND_RTOL = 1e-12


def canonical_quantile_mode(mode: str) -> str:
    try:
        return QUANTILE_MODE_ALIASES[mode]
    except KeyError:
        raise ValueError(f"unknown quantile mode {mode!r}, expected one of {QUANTILE_MODES}") from None


def canonical_schedule(family: str) -> str:
    try:
        return SCHEDULE_ALIASES[family]
    except KeyError:
        raise ValueError(f"unknown schedule {family!r}, expected one of {SCHEDULE_FAMILIES}") from None


@dataclass(frozen=True)
class SmoothingSchedule:
    family: str
    iterations: int

    def __post_init__(self):
        object.__setattr__(self, "family", canonical_schedule(self.family))
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")

    def value(self, t: float) -> float:
        return smoothing_value(self, t)


def smoothing_value(schedule: SmoothingSchedule, t: float) -> float:
    """f(t) in [0, 1] with f(0) = 0 and f(iter) = 1 for every family."""
    total = schedule.iterations
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    if t == 0:
        return 0.0
    if t == total:
        return 1.0
    ratio = t / total
    if schedule.family == "linear":
        value = ratio
    elif schedule.family == "exponential":
        value = math.exp(ratio * math.log(2.0)) - 1.0
    else:
        value = math.log((math.e - 1.0) * ratio + 1.0)
    return min(max(value, 0.0), 1.0)


@dataclass(frozen=True)
class QuartileStats:
    q1: np.ndarray
    q3: np.ndarray
    iqr: np.ndarray
    mode: str


def _as_batch(batch) -> np.ndarray:
    h = np.asarray(batch, dtype=np.float64)
    if h.ndim == 1:
        h = h[None, :]
    if h.ndim != 2 or h.shape[0] == 0:
        raise ValueError(f"batch must be a non-empty sequence of equal-length vectors, got shape {h.shape}")
    return h


def quartiles(batch, mode: str = "minmax-interp") -> QuartileStats:
    """Per-dimension Q1/Q3/IQR.

    minmax-interp: Q1 = min + 0.25 (max - min), Q3 = min + 0.75 (max - min).
    order-stat:    linearly interpolated order statistics at (n - 1) q.
    """
    mode = canonical_quantile_mode(mode)
    h = _as_batch(batch)
    if mode == "minmax-interp":
        lo = h.min(axis=0)
        spread = h.max(axis=0) - lo
        q1 = lo + 0.25 * spread
        q3 = lo + 0.75 * spread
    else:
        q1 = np.quantile(h, 0.25, axis=0, method="linear")
        q3 = np.quantile(h, 0.75, axis=0, method="linear")
    return QuartileStats(q1=q1, q3=q3, iqr=np.maximum(q3 - q1, 0.0), mode=mode)


@dataclass
class SelectionMask:
    """Per-sample selection with the diagnostics that produced it."""
    selected: np.ndarray
    in_band_fraction: Optional[np.ndarray] = None
    ent_m: Optional[np.ndarray] = None
    ent_u1: Optional[np.ndarray] = None
    ent_u2: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.selected.shape[0])

    @property
    def count(self) -> int:
        return int(self.selected.sum())

    @property
    def indices(self) -> list:
        return [int(i) for i in np.flatnonzero(self.selected)]

    def restrict(self, other: "SelectionMask") -> "SelectionMask":
        """Samples selected here AND in other; diagnostics merged."""
        if len(other) != len(self):
            raise ValueError(f"mask lengths differ: {len(self)} vs {len(other)}")
        pick = lambda a, b: a if a is not None else b
        return SelectionMask(
            selected=self.selected & other.selected,
            in_band_fraction=pick(self.in_band_fraction, other.in_band_fraction),
            ent_m=pick(self.ent_m, other.ent_m),
            ent_u1=pick(self.ent_u1, other.ent_u1),
            ent_u2=pick(self.ent_u2, other.ent_u2),
        )


def band(stats: QuartileStats, f: float) -> Tuple[np.ndarray, np.ndarray]:
    """Inclusive Tukey band [Q1 - 1.5 f IQR, Q3 + 1.5 f IQR] with rounding slack."""
    lower = stats.q1 - 1.5 * f * stats.iqr
    upper = stats.q3 + 1.5 * f * stats.iqr
    slack = BAND_RTOL * (1.0 + np.abs(stats.q1) + np.abs(stats.q3))
    return lower - slack, upper + slack


def required_fraction(beta: float, f: float) -> float:
    if f >= 1.0:
        return 1.0
    return beta + (1.0 - beta) * f


def iqr_mask(batch, stats: QuartileStats, schedule: SmoothingSchedule, t: float, beta: float) -> SelectionMask:
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    h = _as_batch(batch)
    if h.shape[1] != stats.q1.shape[0]:
        raise ValueError(f"batch width {h.shape[1]} does not match stats width {stats.q1.shape[0]}")
    f = smoothing_value(schedule, t)
    lower, upper = band(stats, f)
    inside = (h >= lower) & (h <= upper)
    fraction = inside.sum(axis=1) / h.shape[1]
    return SelectionMask(selected=fraction >= required_fraction(beta, f), in_band_fraction=fraction)


def ua_mask(
    entropies,
    gamma_m: float,
    gamma_u: float,
    mu: float,
    order: Sequence[str] = ("u1", "u2"),
) -> SelectionMask:
    """Ent_m <= gamma_m and Ent_first + mu * Ent_second >= gamma_u.

    entropies: (n, 3) array with columns (Ent_m, Ent_u1, Ent_u2).
    """
    ent = np.asarray(entropies, dtype=np.float64)
    if ent.ndim == 1:
        ent = ent[None, :]
    if ent.ndim != 2 or ent.shape[1] != 3:
        raise ValueError(f"entropies must have shape (n, 3), got {ent.shape}")
    if (ent < 0).any():
        raise ValueError("entropies must be >= 0")
    ent_m, ent_u1, ent_u2 = ent[:, 0], ent[:, 1], ent[:, 2]
    first, second = (ent_u1, ent_u2) if tuple(order) == ("u1", "u2") else (ent_u2, ent_u1)
    selected = (ent_m <= gamma_m) & (first + mu * second >= gamma_u)
    return SelectionMask(selected=selected, ent_m=ent_m, ent_u1=ent_u1, ent_u2=ent_u2)


def entropy_gate(ent_m, gamma_m: float) -> SelectionMask:
    """Multimodal-entropy-only gate, Ent_m <= gamma_m."""
    ent_m = np.asarray(ent_m, dtype=np.float64)
    return SelectionMask(selected=ent_m <= gamma_m, ent_m=ent_m)


def all_selected(n: int) -> SelectionMask:
    return SelectionMask(selected=np.ones(n, dtype=bool))
