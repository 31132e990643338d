"""Run configuration: flat, typed ``section.key = value`` text.

Lines starting with ``#`` are comments. Unknown keys are rejected. Tuples
are comma separated; ``none`` (or an empty value) stands for an unset
optional field. Conditionals use ``conditionals.<PROP>.<field>`` keys.
"""
from __future__ import annotations

import hashlib
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .mdp import MDPConfig
from .molgraph import BOND_ORDERS, MAX_EDGES, MAX_NODES, VOCABULARY
from .policy import PolicyConfig
from .reward import (DEFAULT_BOUNDS, DEFAULT_DIRECTION, DEFAULT_LAMBDA, NUM_THERMOMETER_DIM,
                     ConditioningContext, PropertyBounds, PropertyConditional)
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    num_emb: int = 32
    num_layers: int = 3
    num_heads: int = 1
    num_mlp_layers: int = 2
    dtype: str = "float32"
    i2h_width: int = 1  # accepted for completeness; no effect on this architecture


@dataclass
class MDPSection:
    elements: tuple[str, ...] = VOCABULARY
    bond_orders: tuple[int, ...] = BOND_ORDERS
    chirality: bool = True
    max_nodes: int = MAX_NODES
    max_edges: int = MAX_EDGES
    max_traj_len: int = 40


@dataclass
class TrainingSection(TrainConfig):
    num_workers: int = 1
    num_data_loader_workers: int = 1
    bootstrap_own_reward: bool = False
    gfn_batch_shuffle: bool = False
    reward_aggregation: str = "mul"
    reward_loss_multiplier: float = 1.0
    zinc_rad_scale: float = 1.0
    ring_sizes: tuple[int, ...] = (5, 6)
    objective: str = "tb"
    seed_scaffold: Optional[str] = None

    def __post_init__(self):
        super().__post_init__()
        if self.reward_aggregation != "mul":
            raise ValueError("only multiplicative reward aggregation is supported")
        if self.bootstrap_own_reward:
            raise ValueError("bootstrap_own_reward is not supported")
        if self.objective not in ("tb", "rtb"):
            raise ValueError("objective must be tb or rtb")

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})


@dataclass
class DataSection:
    dataset: Optional[str] = None
    novelty_reference: Optional[str] = None
    score_tables: tuple[str, ...] = ()      # PROP=path entries
    external_reward: Optional[str] = None   # smiles<TAB>value table used as R_ext
    docking_scores: Optional[str] = None
    actives_median: Optional[float] = None
    strict: bool = False


@dataclass
class IOSection:
    out_dir: str = "run"
    seed: int = 0


@dataclass
class SampleSection:
    n: int = 1000
    batch_size: int = 1024
    temperature: float = 1.0
    unique_filter: bool = False
    max_attempts: int = 100_000


@dataclass
class EvaluateSection:
    circle_threshold: float = 0.75
    fingerprint_radius: int = 2
    fingerprint_width: int = 2048


@dataclass
class ConditionalsSection:
    props: tuple[str, ...] = ("QED", "NumRings", "TPSA", "SAS")
    thermometer_dim: int = NUM_THERMOMETER_DIM
    # per property: range (c_low, c_high), direction, lambda, bounds (4 values)
    entries: dict = field(default_factory=dict)

    def __post_init__(self):
        # resolve defaults so that equal configurations compare equal
        self.entries = {p: self.entry(p) for p in self.props}

    def entry(self, prop: str) -> dict:
        e = {"range": (DEFAULT_BOUNDS[prop].c_min, DEFAULT_BOUNDS[prop].c_max)
             if prop in DEFAULT_BOUNDS else None,
             "direction": DEFAULT_DIRECTION.get(prop, 0),
             "lambda": DEFAULT_LAMBDA.get(prop, 1.0),
             "bounds": _bounds_tuple(DEFAULT_BOUNDS[prop]) if prop in DEFAULT_BOUNDS else None}
        e.update(self.entries.get(prop, {}))
        for k in ("range", "bounds"):
            if e[k] is not None:
                e[k] = tuple(float(x) for x in e[k])
        e["direction"], e["lambda"] = int(e["direction"]), float(e["lambda"])
        return e

    def context(self) -> ConditioningContext:
        conds, bounds = [], {}
        for p in self.props:
            e = self.entry(p)
            if e["range"] is None or e["bounds"] is None:
                raise ConfigError(f"conditionals.{p}: range and bounds are required")
            bounds[p] = PropertyBounds(*e["bounds"])
            conds.append(PropertyConditional(p, e["range"][0], e["range"][1],
                                             int(e["direction"]), float(e["lambda"])))
        return ConditioningContext(tuple(conds), bounds, self.thermometer_dim)


def _bounds_tuple(b: PropertyBounds) -> tuple[float, ...]:
    return (b.c_min, b.c_max, b.c_min_star, b.c_max_star)


_COND_FIELDS = {"range": (tuple[float, ...], 2), "direction": (int, None),
                "lambda": (float, None), "bounds": (tuple[float, ...], 4)}

SECTIONS = {"model": ModelSection, "mdp": MDPSection, "training": TrainingSection,
            "data": DataSection, "io": IOSection, "sample": SampleSection,
            "evaluate": EvaluateSection}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    mdp: MDPSection = field(default_factory=MDPSection)
    conditionals: ConditionalsSection = field(default_factory=ConditionalsSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    io: IOSection = field(default_factory=IOSection)
    sample: SampleSection = field(default_factory=SampleSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    # -- derived objects ---------------------------------------------------------

    def mdp_config(self) -> MDPConfig:
        m = self.mdp
        return MDPConfig(tuple(m.elements), tuple(m.bond_orders), m.chirality, m.max_nodes,
                         m.max_edges, m.max_traj_len)

    def policy_config(self) -> PolicyConfig:
        m = self.model
        return PolicyConfig(m.num_emb, m.num_layers, m.num_heads, m.num_mlp_layers, m.dtype)

    def context(self) -> ConditioningContext:
        return self.conditionals.context()

    def dump(self) -> str:
        return dump(self)

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()


# -- text format -------------------------------------------------------------------------


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def _parse_value(raw: str, tp, where: str):
    tp, optional = _unwrap_optional(tp)
    raw = raw.strip()
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tp is int:
            return int(raw.replace("_", ""))
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(_parse_value(x, inner, where) for x in items)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    updates: dict[str, dict] = {name: {} for name in SECTIONS}
    cond_updates: dict[str, dict] = {}
    cond_top: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (x.strip() for x in s.split("=", 1))
        parts = key.split(".")
        where = f"line {lineno} ({key})"
        if parts[0] == "conditionals":
            if len(parts) == 2 and parts[1] in ("props", "thermometer_dim"):
                tp = tuple[str, ...] if parts[1] == "props" else int
                cond_top[parts[1]] = _parse_value(raw, tp, where)
            elif len(parts) == 3 and parts[2] in _COND_FIELDS:
                tp, n = _COND_FIELDS[parts[2]]
                val = _parse_value(raw, tp, where)
                if n is not None and len(val) != n:
                    raise ConfigError(f"{where}: expected {n} values")
                cond_updates.setdefault(parts[1], {})[parts[2]] = val
            else:
                raise ConfigError(f"{where}: unknown conditionals key")
            continue
        if len(parts) != 2 or parts[0] not in SECTIONS:
            raise ConfigError(f"{where}: unknown key")
        types_ = _field_types(SECTIONS[parts[0]])
        if parts[1] not in types_:
            raise ConfigError(f"{where}: unknown key")
        updates[parts[0]][parts[1]] = _parse_value(raw, types_[parts[1]], where)
    kwargs = {}
    for name in SECTIONS:
        try:
            kwargs[name] = replace(getattr(cfg, name), **updates[name])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}] {e}") from None
    entries = {p: dict(v) for p, v in cfg.conditionals.entries.items()}
    for p, v in cond_updates.items():
        entries.setdefault(p, {}).update(v)
    cond = replace(cfg.conditionals, entries=entries, **cond_top)
    out = RunConfig(conditionals=cond, **kwargs)
    try:
        out.mdp_config()
        out.policy_config()
        out.context()
    except ConfigError:
        raise
    except (ValueError, KeyError) as e:
        raise ConfigError(str(e)) from None
    return out


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return loads(text)


def dump(cfg: RunConfig) -> str:
    lines = []
    for name in ("model", "mdp", "training", "data", "io", "sample", "evaluate"):
        sec = getattr(cfg, name)
        for f in fields(sec):
            lines.append(f"{name}.{f.name} = {_format_value(getattr(sec, f.name))}")
    c = cfg.conditionals
    lines.append(f"conditionals.props = {_format_value(c.props)}")
    lines.append(f"conditionals.thermometer_dim = {c.thermometer_dim}")
    for p in c.props:
        e = c.entry(p)
        for k in ("range", "direction", "lambda", "bounds"):
            if e[k] is not None:
                lines.append(f"conditionals.{p}.{k} = {_format_value(e[k])}")
    return "\n".join(lines) + "\n"
