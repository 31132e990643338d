"""Evaluation metrics over sets of generated molecules.

Greedy counts (#modes, #circles) scan molecules by descending reward with
the canonical key as tie-break, so results do not depend on sample order.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Iterable, Mapping, Sequence

import numpy as np

from .descriptors import (ExternalScoreTable, Fingerprint, compute, fingerprint, qed_like,
                          sas_like)
from .molgraph import MolGraph, ValenceError, bemis_murcko_scaffold
from .reward import ConditioningContext, PropertyConditional
from .smiles import canonical_key

MODE_REWARD = 0.5
MODE_SIMILARITY = 0.5
CIRCLE_DISTANCE = 0.75
NOVEL_HIT_SIMILARITY = 0.4


class SampleSet:
    """Molecules with aligned rewards; keys and fingerprints are memoized.

    ``n_invalid`` counts generated entries that could not be read back as
    valid molecules; they only enter the validity rate.
    """

    def __init__(self, molecules: Sequence[MolGraph], rewards: Sequence[float] | None = None,
                 n_invalid: int = 0, radius: int = 2, width: int = 2048):
        self.molecules = list(molecules)
        self.rewards = np.zeros(len(self.molecules)) if rewards is None \
            else np.asarray(rewards, dtype=float)
        if len(self.rewards) != len(self.molecules):
            raise ValueError("molecules and rewards must have equal length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards must be finite")
        self.n_invalid = n_invalid
        self.radius, self.width = radius, width
        self._keys: list[str] | None = None
        self._fps: list[Fingerprint] | None = None

    def __len__(self) -> int:
        return len(self.molecules)

    @property
    def keys(self) -> list[str]:
        if self._keys is None:
            self._keys = [canonical_key(m) for m in self.molecules]
        return self._keys

    @property
    def fingerprints(self) -> list[Fingerprint]:
        if self._fps is None:
            self._fps = [fingerprint(m, self.radius, self.width) for m in self.molecules]
        return self._fps

    def greedy_order(self) -> list[int]:
        keys = self.keys
        return sorted(range(len(self)), key=lambda i: (-self.rewards[i], keys[i]))


# -- pairwise similarity ---------------------------------------------------------------


def _packed(fps: Sequence[Fingerprint]) -> tuple[np.ndarray, np.ndarray]:
    width = fps[0].width
    nbytes = width // 8 or 1
    arr = np.frombuffer(b"".join(fp.bits.to_bytes(nbytes, "little") for fp in fps),
                        dtype=np.uint8).reshape(len(fps), nbytes)
    counts = np.bitwise_count(arr).sum(axis=1, dtype=np.int64)
    return arr, counts


def similarity_matrix(fps: Sequence[Fingerprint], workers: int = 1) -> np.ndarray:
    """Full Tanimoto matrix; rows are computed in parallel chunks."""
    n = len(fps)
    if n == 0:
        return np.zeros((0, 0))
    if len({fp.width for fp in fps}) != 1:
        raise ValueError("fingerprints have different widths")
    arr, counts = _packed(fps)
    out = np.empty((n, n))

    def rows(lo: int, hi: int) -> None:
        inter = np.bitwise_count(arr[lo:hi, None, :] & arr[None, :, :]).sum(axis=2,
                                                                             dtype=np.int64)
        union = counts[lo:hi, None] + counts[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            out[lo:hi] = np.where(union > 0, inter / np.maximum(union, 1), np.nan)

    step = max(1, min(256, (1 << 24) // max(1, n * arr.shape[1])))
    chunks = [(lo, min(n, lo + step)) for lo in range(0, n, step)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(lambda c: rows(*c), chunks))
    else:
        for c in chunks:
            rows(*c)
    return out


# -- individual metrics ----------------------------------------------------------------


def validity(s: SampleSet) -> float:
    total = len(s) + s.n_invalid
    if total == 0:
        return 0.0
    ok = 0
    for m in s.molecules:
        try:
            m.validate()
            ok += 1
        except (ValueError, ValenceError):
            pass
    return ok / total


def uniqueness(s: SampleSet) -> float:
    return len(set(s.keys)) / len(s) if len(s) else 0.0


def novelty(s: SampleSet, reference_keys: Iterable[str]) -> float:
    """Distinct keys absent from the reference, over the set size; so
    novelty <= uniqueness."""
    if not len(s):
        return 0.0
    ref = set(reference_keys)
    return len(set(s.keys) - ref) / len(s)


def diversity(s: SampleSet, workers: int = 1) -> float:
    """1 - mean pairwise Tanimoto similarity."""
    n = len(s)
    if n < 2:
        raise ValueError("diversity needs at least two molecules")
    sim = similarity_matrix(s.fingerprints, workers)
    upper = sim[np.triu_indices(n, 1)]
    return 1.0 - math.fsum(upper.tolist()) * 2.0 / (n * (n - 1))


def n_modes(s: SampleSet, reward_threshold: float = MODE_REWARD,
            sim_threshold: float = MODE_SIMILARITY, workers: int = 1) -> int:
    """Greedy count of molecules with reward >= threshold whose similarity to
    every previously admitted mode is below ``sim_threshold``."""
    cand = [i for i in s.greedy_order() if s.rewards[i] >= reward_threshold]
    if not cand:
        return 0
    sim = similarity_matrix([s.fingerprints[i] for i in cand], workers)
    admitted: list[int] = []
    for j in range(len(cand)):
        if all(sim[j, a] < sim_threshold for a in admitted):
            admitted.append(j)
    return len(admitted)


def n_circles(s: SampleSet, dist_threshold: float = CIRCLE_DISTANCE, workers: int = 1) -> int:
    """Sphere exclusion: admit a molecule iff its Tanimoto distance to every
    admitted one is at least ``dist_threshold``."""
    if not 0 < dist_threshold < 1:
        raise ValueError("distance threshold must lie in (0, 1)")
    if not len(s):
        return 0
    order = s.greedy_order()
    sim = similarity_matrix([s.fingerprints[i] for i in order], workers)
    admitted: list[int] = []
    for j in range(len(order)):
        if all(1.0 - sim[j, a] >= dist_threshold for a in admitted):
            admitted.append(j)
    return len(admitted)


def n_scaffolds(s: SampleSet) -> int:
    """Distinct non-empty Bemis-Murcko scaffolds."""
    keys = set()
    for m in s.molecules:
        sc = bemis_murcko_scaffold(m)
        if sc.atoms:
            keys.add(canonical_key(sc))
    return len(keys)


def top_k_mean(s: SampleSet, k: int) -> float:
    if not len(s):
        return 0.0
    top = np.sort(s.rewards)[::-1][:k]
    return math.fsum(top.tolist()) / len(top)


def q10(c: PropertyConditional) -> float:
    return c.c_low + 0.1 * (c.c_high - c.c_low)


def l1_dist(values: Sequence[Mapping[str, float]], ctx: ConditioningContext) -> dict[str, float]:
    """Per property: mean |p_x - q10| normalized by the sampling range width."""
    out = {}
    for c in ctx.conditionals:
        width = ctx.bounds[c.prop].width
        q = q10(c)
        out[c.prop] = math.fsum(abs(v[c.prop] - q) / width for v in values) / len(values) \
            if values else 0.0
    return out


def indicator(value: float, c: PropertyConditional) -> bool:
    if c.d < 0:
        return abs(value - c.c_low) <= 0.1 * abs(c.c_low)
    if c.d > 0:
        return abs(value - c.c_high) <= 0.1 * abs(c.c_high)
    return c.c_low <= value <= c.c_high


def success_pct(values: Sequence[Mapping[str, float]], ctx: ConditioningContext) -> float:
    if not values or not ctx.conditionals:
        return 0.0
    k = len(ctx.conditionals)
    per_mol = [sum(indicator(v[c.prop], c) for c in ctx.conditionals) / k for v in values]
    return math.fsum(per_mol) / len(values) * 100.0


@dataclass
class HitResult:
    hit_ratio: float
    novel_hit_ratio: float
    n_scored: int
    n_missing: int


def hit_ratios(s: SampleSet, scores: ExternalScoreTable, actives_median: float,
               reference: Sequence[Fingerprint] = (), qed: Sequence[float] | None = None,
               sas: Sequence[float] | None = None) -> HitResult:
    """A hit has a docking score below (better than) the actives' median,
    QED > 0.5 and SA < 5. A novel hit is additionally a first occurrence of
    its key with max Tanimoto similarity to the reference below 0.4.
    Molecules without a score are excluded and counted."""
    if not len(scores):
        raise ValueError("empty score table")
    hits = novel = scored = missing = 0
    seen: set[str] = set()
    for i, m in enumerate(s.molecules):
        key = s.keys[i]
        if key not in scores.values:
            missing += 1
            continue
        scored += 1
        q = qed[i] if qed is not None else qed_like(m)
        sa = sas[i] if sas is not None else sas_like(m)
        if not (scores.values[key] < actives_median and q > 0.5 and sa < 5):
            continue
        hits += 1
        if key in seen:
            continue
        seen.add(key)
        fp = s.fingerprints[i]
        if all(_tanimoto(fp, r) < NOVEL_HIT_SIMILARITY for r in reference):
            novel += 1
    if scored == 0:
        return HitResult(0.0, 0.0, 0, missing)
    return HitResult(hits / scored, novel / scored, scored, missing)


def _tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    union = (a.bits | b.bits).bit_count()
    return (a.bits & b.bits).bit_count() / union if union else 0.0


# -- report ----------------------------------------------------------------------------


@dataclass
class MetricsReport:
    n: int
    validity: float
    uniqueness: float
    novelty: float | None
    diversity: float
    n_modes: int
    n_scaffolds: int
    n_circles: int
    rw_c: float
    rw_s: float
    rwtd: float
    success_pct: float
    top_1: float
    top_10: float
    top_100: float
    l1_dist: dict[str, float] = field(default_factory=dict)
    hit_ratio: float | None = None
    novel_hit_ratio: float | None = None
    parameters: dict[str, object] = field(default_factory=dict)

    def as_text(self) -> str:
        lines = [f"# {k} = {v}" for k, v in self.parameters.items()]
        for f in fields(self):
            if f.name == "parameters":
                continue
            v = getattr(self, f.name)
            if f.name == "l1_dist":
                for prop, x in v.items():
                    lines.append(f"l1_dist.{prop}: {x:.6g}")
                continue
            lines.append(f"{f.name}: {'absent' if v is None else _fmt(v)}")
        return "\n".join(lines) + "\n"

    def as_table(self) -> str:
        """Two-line tab-separated table (header, values)."""
        cols, vals = [], []
        for f in fields(self):
            if f.name == "parameters":
                continue
            v = getattr(self, f.name)
            if f.name == "l1_dist":
                for prop, x in v.items():
                    cols.append(f"l1_dist.{prop}")
                    vals.append(_fmt(x))
                continue
            cols.append(f.name)
            vals.append("NA" if v is None else _fmt(v))
        return "\t".join(cols) + "\n" + "\t".join(vals) + "\n"


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def evaluate(s: SampleSet, ctx: ConditioningContext, reference_keys: Iterable[str] | None = None,
             values: Sequence[Mapping[str, float]] | None = None,
             scores: ExternalScoreTable | None = None, actives_median: float | None = None,
             reference_fps: Sequence[Fingerprint] = (), tables=None,
             circle_threshold: float = CIRCLE_DISTANCE, workers: int = 1,
             ring_sizes: tuple[int, ...] | None = (5, 6)) -> MetricsReport:
    if len(s) < 2:
        raise ValueError("evaluation needs at least two molecules")
    if values is None:
        values = [{c.prop: compute(c.prop, m, tables, ring_sizes) for c in ctx.conditionals}
                  for m in s.molecules]
    div = diversity(s, workers)
    circles = n_circles(s, circle_threshold, workers)
    scaffolds = n_scaffolds(s)
    top100 = top_k_mean(s, 100)
    hit = novel_hit = None
    if scores is not None and actives_median is not None:
        hr = hit_ratios(s, scores, actives_median, reference_fps)
        hit, novel_hit = hr.hit_ratio, hr.novel_hit_ratio
    return MetricsReport(
        n=len(s), validity=validity(s), uniqueness=uniqueness(s),
        novelty=None if reference_keys is None else novelty(s, reference_keys),
        diversity=div, n_modes=n_modes(s, workers=workers), n_scaffolds=scaffolds,
        n_circles=circles, rw_c=top100 * circles, rw_s=top100 * scaffolds, rwtd=top100 * div,
        success_pct=success_pct(values, ctx), top_1=top_k_mean(s, 1),
        top_10=top_k_mean(s, 10), top_100=top100, l1_dist=l1_dist(values, ctx),
        hit_ratio=hit, novel_hit_ratio=novel_hit,
        parameters={"fingerprint_radius": s.radius, "fingerprint_width": s.width,
                    "mode_reward": MODE_REWARD, "mode_similarity": MODE_SIMILARITY,
                    "circle_distance": circle_threshold,
                    "novel_hit_similarity": NOVEL_HIT_SIMILARITY},
    )
