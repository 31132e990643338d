"""Goal-conditioned property rewards, conditional-range sampling and the
thermometer encoding that feeds the ranges to the policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import truncnorm

from .descriptors import ExternalScoreTable, compute
from .molgraph import MolGraph

NUM_THERMOMETER_DIM = 16
ILLEGAL_LOG_REWARD = -512.0


@dataclass(frozen=True)
class PropertyConditional:
    """Target range ``[c_low, c_high]`` with preference direction ``d``."""
    prop: str
    c_low: float
    c_high: float
    d: int = 0
    lam: float = 1.0

    def __post_init__(self):
        if not self.c_low < self.c_high:
            raise ValueError(f"{self.prop}: need c_low < c_high, got {self.c_low}, {self.c_high}")
        if self.lam <= 0:
            raise ValueError(f"{self.prop}: decay rate must be positive")
        if self.d not in (-1, 0, 1):
            raise ValueError(f"{self.prop}: preference direction must be -1, 0 or 1")


@dataclass(frozen=True)
class PropertyBounds:
    """Sampling bounds ``[c_min, c_max]`` inside extrema ``[c_min*, c_max*]``."""
    c_min: float
    c_max: float
    c_min_star: float
    c_max_star: float

    def __post_init__(self):
        if not (self.c_min_star <= self.c_min < self.c_max <= self.c_max_star):
            raise ValueError(f"bounds must satisfy c*_min <= c_min < c_max <= c*_max: {self}")

    @property
    def width(self) -> float:
        return self.c_max - self.c_min


# Pretraining conditionals: standard sampling bounds per property; the
# extrema are our choice (wide but plausible values).
DEFAULT_LAMBDA = {"QED": 1.0, "SAS": 1.0, "NumRings": 1.0, "TPSA": 20.0,
                  "MolWt": 1.0, "LogP": 1.0}
DEFAULT_BOUNDS = {
    "QED": PropertyBounds(0.65, 0.80, 0.0, 1.0),
    "NumRings": PropertyBounds(1.0, 3.0, 0.0, 10.0),
    "TPSA": PropertyBounds(60.0, 100.0, 0.0, 200.0),
    "SAS": PropertyBounds(1.0, 3.0, 1.0, 10.0),
    "MolWt": PropertyBounds(100.0, 800.0, 0.0, 1000.0),
    "LogP": PropertyBounds(-5.0, 6.0, -10.0, 10.0),
}
DEFAULT_DIRECTION = {"QED": 0, "NumRings": 1, "TPSA": 0, "SAS": 0}


def property_reward(p_x: float, cond: PropertyConditional) -> float:
    """Piecewise reward: exponential decay outside the range, a ramp of
    slope ``d/2`` inside it. Values lie in (0, 1]."""
    lo, hi, d, lam = cond.c_low, cond.c_high, cond.d, cond.lam
    if p_x < lo:
        return (2 - max(d, 0)) / 2 * math.exp((p_x - lo) / lam)
    if p_x > hi:
        return (2 - max(-d, 0)) / 2 * math.exp((hi - p_x) / lam)
    return (2 - max(d, 0)) / 2 + d / 2 * (p_x - lo) / (hi - lo)


def thermometer_encode(value: float, lo: float, hi: float, dims: int = NUM_THERMOMETER_DIM
                       ) -> np.ndarray:
    if dims < 2 or not lo < hi:
        raise ValueError("thermometer encoding needs dims >= 2 and lo < hi")
    v = min(max(value, lo), hi)
    b = (v - lo) / (hi - lo) * dims
    return np.clip(b - np.arange(dims), 0.0, 1.0)


@dataclass(frozen=True)
class ConditioningContext:
    conditionals: tuple[PropertyConditional, ...]
    bounds: Mapping[str, PropertyBounds] = field(default_factory=lambda: DEFAULT_BOUNDS)
    dims: int = NUM_THERMOMETER_DIM

    def __post_init__(self):
        for c in self.conditionals:
            if c.prop not in self.bounds:
                raise ValueError(f"no bounds configured for {c.prop}")

    def __hash__(self):
        return hash((self.conditionals, self.dims))

    def __eq__(self, other):
        return (isinstance(other, ConditioningContext)
                and self.conditionals == other.conditionals and self.dims == other.dims)

    @property
    def encoding_size(self) -> int:
        return len(self.conditionals) * (2 * self.dims + 3)

    def encode(self) -> np.ndarray:
        """Per property: thermometer(c_low), thermometer(c_high), one-hot(d)."""
        parts = []
        for c in self.conditionals:
            b = self.bounds[c.prop]
            parts.append(thermometer_encode(c.c_low, b.c_min_star, b.c_max_star, self.dims))
            parts.append(thermometer_encode(c.c_high, b.c_min_star, b.c_max_star, self.dims))
            parts.append(np.eye(3)[c.d + 1])
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_conditional(self, cond: PropertyConditional) -> ConditioningContext:
        """Replace (or append) the conditional for ``cond.prop``."""
        conds = [c for c in self.conditionals if c.prop != cond.prop]
        idx = next((i for i, c in enumerate(self.conditionals) if c.prop == cond.prop),
                   len(conds))
        conds.insert(idx, cond)
        return replace(self, conditionals=tuple(conds))


def pretraining_context(props: Sequence[str] = ("QED", "NumRings", "TPSA", "SAS")
                        ) -> ConditioningContext:
    """The pretraining ranges with their default directions."""
    conds = tuple(
        PropertyConditional(p, DEFAULT_BOUNDS[p].c_min, DEFAULT_BOUNDS[p].c_max,
                            DEFAULT_DIRECTION.get(p, 0), DEFAULT_LAMBDA.get(p, 1.0))
        for p in props)
    return ConditioningContext(conds)


def property_values(x: MolGraph, ctx: ConditioningContext,
                    tables: Mapping[str, ExternalScoreTable] | None = None,
                    ring_sizes: tuple[int, ...] | None = (5, 6)) -> dict[str, float]:
    return {c.prop: compute(c.prop, x, tables, ring_sizes) for c in ctx.conditionals}


def aggregate_reward(x: MolGraph, ctx: ConditioningContext, ext: float | None = None,
                     tables: Mapping[str, ExternalScoreTable] | None = None,
                     values: Mapping[str, float] | None = None,
                     ring_sizes: tuple[int, ...] | None = (5, 6)) -> float:
    """Product of per-property rewards, times an external reward if given."""
    if values is None:
        values = property_values(x, ctx, tables, ring_sizes)
    r = 1.0
    for c in ctx.conditionals:
        r *= property_reward(values[c.prop], c)
    if ext is not None:
        r *= ext
    return r


def log_reward(r: float, floor: float = ILLEGAL_LOG_REWARD) -> float:
    """``log r`` clamped below at ``floor`` (also for r <= 0)."""
    return max(math.log(r), floor) if r > 0 else floor


def _ordered_pair(a: float, b: float) -> tuple[float, float]:
    return (a, b) if a <= b else (b, a)


def _distinct(lo: float, hi: float, bound_lo: float, bound_hi: float) -> tuple[float, float]:
    # ties (probability zero except in degenerate limits) get a tiny spread
    if lo < hi:
        return lo, hi
    eps = 1e-9 * max(1.0, bound_hi - bound_lo)
    return (lo - eps, hi) if lo - eps >= bound_lo else (lo, hi + eps)


def sample_range(bounds: PropertyBounds, rng: np.random.Generator, mode: str = "online",
                 p_x: float | None = None, sigma: float | None = None,
                 epsilon: float = 0.1) -> tuple[float, float]:
    """Draw one ``(c_low, c_high)``.

    online: both ends uniform on ``[c_min, c_max]`` (with probability
    ``epsilon`` on the extrema instead). offline: both ends from a normal
    centred at ``p_x`` truncated to ``[c_min, c_max]``; with probability
    ``epsilon`` a negative range that excludes ``p_x`` on one side.
    """
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    lo_b, hi_b = bounds.c_min, bounds.c_max
    if mode == "online":
        if rng.random() < epsilon:
            lo_b, hi_b = bounds.c_min_star, bounds.c_max_star
        lo, hi = _ordered_pair(rng.uniform(lo_b, hi_b), rng.uniform(lo_b, hi_b))
        return _distinct(lo, hi, lo_b, hi_b)
    if mode != "offline":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if p_x is None:
        raise ValueError("offline sampling needs the property value p_x")
    if sigma is None:
        sigma = 0.05 * bounds.width
    if rng.random() < epsilon:
        # negative example: the range sits entirely on one side of p_x
        centre = min(max(p_x, lo_b), hi_b)
        if rng.random() < 0.5:
            lo, hi = lo_b, rng.uniform(lo_b, centre)
        else:
            lo, hi = rng.uniform(centre, hi_b), hi_b
        return _distinct(lo, hi, lo_b, hi_b)
    if sigma <= 0:
        c = min(max(p_x, lo_b), hi_b)
        return _distinct(c, c, lo_b, hi_b)
    a, b = (lo_b - p_x) / sigma, (hi_b - p_x) / sigma
    draws = truncnorm.rvs(a, b, loc=p_x, scale=sigma, size=2, random_state=rng)
    lo, hi = _ordered_pair(float(draws[0]), float(draws[1]))
    return _distinct(lo, hi, lo_b, hi_b)


def sample_conditionals(template: ConditioningContext, rng: np.random.Generator,
                        mode: str = "online", p_x: Mapping[str, float] | None = None,
                        sigma: Mapping[str, float] | None = None, epsilon: float = 0.1,
                        resample: Sequence[str] | None = None) -> ConditioningContext:
    """New context with freshly sampled ranges; directions and decay rates are
    kept from ``template``. ``resample`` limits which properties are redrawn
    (the others keep the template's range)."""
    conds = []
    for c in template.conditionals:
        if resample is not None and c.prop not in resample:
            conds.append(c)
            continue
        b = template.bounds[c.prop]
        lo, hi = sample_range(b, rng, mode, None if p_x is None else p_x[c.prop],
                              None if sigma is None else sigma.get(c.prop), epsilon)
        conds.append(replace(c, c_low=lo, c_high=hi))
    return replace(template, conditionals=tuple(conds))
