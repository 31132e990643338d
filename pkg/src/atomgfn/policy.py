"""Graph policy for the forward and backward action distributions.

States in a batch are packed into one disjoint graph. Each molecule gets an
extra virtual node that carries the conditioning vector and is wired to all
atoms. A layer is an additive-aggregation convolution whose output is
concatenated to the node states and fed to a multi-head attention block
over neighbours (bonds, the virtual node, self). Heads read node, bond,
atom-pair and graph (virtual node) embeddings and produce one logit per
legal action; illegal actions never get a logit, so they have probability
zero and receive no gradient.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (Tensor, concat, layer_norm, no_grad, segment_log_softmax,
                       segment_logsumexp, segment_softmax, segment_sum)
from .mdp import Action, ActionType, MDPConfig, MolMDP
from .molgraph import ELEMENTS, MolGraph

# edge types inside the packed graph
_EDGE_TYPES = 6  # unset, single, double, triple, virtual link, self loop
_VIRTUAL, _SELF = 4, 5


@dataclass(frozen=True)
class PolicyConfig:
    num_emb: int = 32
    num_layers: int = 3
    num_heads: int = 1
    num_mlp_layers: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_emb % self.num_heads:
            raise ValueError("num_emb must be divisible by num_heads")
        if self.num_layers < 0 or self.num_mlp_layers < 1:
            raise ValueError("need num_layers >= 0 and num_mlp_layers >= 1")


@dataclass
class Query:
    """Log-probability of the transition reached by any action in ``group``
    (indices into ``actions``) from batch state ``state``."""
    state: int
    backward: bool
    actions: Sequence[Action]
    group: Sequence[int] = ()


class PolicyParams(dict):
    """Ordered name -> Tensor mapping with flat-vector helpers."""

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    @property
    def size(self) -> int:
        return sum(t.data.size for t in self.values())

    def copy(self, requires_grad: bool = True) -> PolicyParams:
        return PolicyParams((k, Tensor(v.data.copy(), requires_grad=requires_grad, name=k))
                            for k, v in self.items())

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def as_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel().astype(np.float64) for t in self.values()])

    def set_vector(self, vec: np.ndarray) -> None:
        i = 0
        for t in self.values():
            n = t.data.size
            t.data = vec[i:i + n].reshape(t.shape).astype(t.data.dtype)
            i += n

    def grad_vector(self) -> np.ndarray:
        return np.concatenate([
            (t.grad if t.grad is not None else np.zeros_like(t.data)).ravel().astype(np.float64)
            for t in self.values()])


class GraphPolicy:
    """Parameterized P_F, P_B and log Z(c) for one MDP configuration."""

    def __init__(self, mdp_config: MDPConfig, cond_dim: int, config: PolicyConfig | None = None,
                 seed: int = 0, params: PolicyParams | None = None):
        self.mdp_config = mdp_config
        self.cond_dim = cond_dim
        self.config = config or PolicyConfig()
        self.dtype = np.dtype(self.config.dtype)
        self.elements = tuple(mdp_config.elements)
        self._el_index = {e: i for i, e in enumerate(self.elements)}
        self.orders = tuple(mdp_config.bond_orders)
        self._order_index = {o: i for i, o in enumerate(self.orders)}
        self.max_val = max(ELEMENTS[e].max_valence for e in self.elements)
        self.n_tags = 2 if mdp_config.chirality else 0
        self.feat_dim = (len(self.elements) + (3 if mdp_config.chirality else 0)
                         + 2 * (self.max_val + 1) + 2)
        self.params = params if params is not None else self.init_params(seed)

    # -- parameters ---------------------------------------------------------------

    def _shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        c = self.config
        d = c.num_emb
        shapes = [("embed.w", (self.feat_dim, d)), ("embed.b", (d,)),
                  ("cond.w", (max(self.cond_dim, 1), d)), ("cond.b", (d,))]
        for layer in range(c.num_layers):
            p = f"layer{layer}."
            shapes += [(p + "conv_edge", (_EDGE_TYPES, d)), (p + "conv.w", (d, d)),
                       (p + "conv.b", (d,)), (p + "att_edge", (_EDGE_TYPES, d)),
                       (p + "q", (2 * d, d)), (p + "k", (2 * d, d)), (p + "v", (2 * d, d)),
                       (p + "o", (d, d)), (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
                       (p + "ff1.w", (d, 2 * d)), (p + "ff1.b", (2 * d,)),
                       (p + "ff2.w", (2 * d, d)), (p + "ff2.b", (d,)),
                       (p + "ln2.g", (d,)), (p + "ln2.b", (d,))]
        n_el, n_ord = len(self.elements), len(self.orders)
        heads = {
            # forward
            "head.add_node": (2 * d, n_el),
            "head.add_root": (d, n_el),
            "head.add_edge": (2 * d, 1),
            "head.set_edge": (2 * d, n_ord),
            "head.stop": (d, 1),
            # backward
            "head.del_node": (2 * d, 1),
            "head.del_edge": (2 * d, 1),
            "head.unset_edge": (2 * d, 1),
        }
        if self.n_tags:
            heads["head.set_node"] = (2 * d, self.n_tags)
            heads["head.unset_node"] = (2 * d, 1)
        for name, (fan_in, fan_out) in heads.items():
            shapes += self._mlp_shapes(name, fan_in, d, fan_out)
        shapes += self._mlp_shapes("logz", max(self.cond_dim, 1), d, 1)
        return shapes

    def _mlp_shapes(self, name: str, fan_in: int, hidden: int, fan_out: int):
        n = self.config.num_mlp_layers
        dims = [fan_in] + [hidden] * (n - 1) + [fan_out]
        out = []
        for i in range(n):
            out += [(f"{name}.{i}.w", (dims[i], dims[i + 1])), (f"{name}.{i}.b", (dims[i + 1],))]
        return out

    def init_params(self, seed: int) -> PolicyParams:
        rng = np.random.default_rng(seed)
        params = PolicyParams()
        for name, shape in self._shapes():
            if name.endswith((".g",)):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            params[name] = Tensor(arr.astype(self.dtype), requires_grad=True, name=name)
        return params

    def config_hash(self) -> str:
        blob = json.dumps({"mdp": asdict(self.mdp_config), "cond_dim": self.cond_dim,
                           "policy": asdict(self.config)}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_params(self, params: PolicyParams) -> GraphPolicy:
        return GraphPolicy(self.mdp_config, self.cond_dim, self.config, params=params)

    # -- building blocks ------------------------------------------------------------

    def _mlp(self, params, name: str, x: Tensor) -> Tensor:
        n = self.config.num_mlp_layers
        for i in range(n):
            x = x @ params[f"{name}.{i}.w"] + params[f"{name}.{i}.b"]
            if i < n - 1:
                x = x.leaky_relu()
        return x

    def _pack(self, graphs: Sequence[MolGraph], frozen: frozenset[int]):
        """Numpy arrays describing the disjoint union of ``graphs``."""
        n_el = len(self.elements)
        chir = self.mdp_config.chirality
        feats, node_graph = [], []
        src, dst, etype = [], [], []
        atom_offset = np.zeros(len(graphs), dtype=np.intp)
        virtual = np.zeros(len(graphs), dtype=np.intp)
        bond_u, bond_v, bond_graph = [], [], []
        bond_offset = np.zeros(len(graphs), dtype=np.intp)
        n = 0
        width = self.max_val + 1
        for b, g in enumerate(graphs):
            atom_offset[b] = n
            bond_offset[b] = len(bond_u)
            m = len(g.atoms)
            committed = [0] * m
            for bond in g.bonds:
                o = bond.order or 1
                committed[bond.u] += o
                committed[bond.v] += o
            for i, a in enumerate(g.atoms):
                f = np.zeros(self.feat_dim)
                f[self._el_index[a.element]] = 1
                off = n_el
                if chir:
                    f[off + (0 if a.chirality is None else 1 if a.chirality == "R" else 2)] = 1
                    off += 3
                f[off + min(g.degree(i), self.max_val)] = 1
                off += width
                spare = ELEMENTS[a.element].max_valence - committed[i]
                f[off + min(max(spare, 0), self.max_val)] = 1
                off += width
                f[off] = 1.0 if i in frozen else 0.0
                feats.append(f)
                node_graph.append(b)
            vf = np.zeros(self.feat_dim)
            vf[-1] = 1.0
            feats.append(vf)
            node_graph.append(b)
            v = n + m
            virtual[b] = v
            for bond in g.bonds:
                u, w = n + bond.u, n + bond.v
                src += [u, w]
                dst += [w, u]
                etype += [bond.order, bond.order]
                bond_u.append(u)
                bond_v.append(w)
                bond_graph.append(b)
            for i in range(n, n + m):
                src += [i, v]
                dst += [v, i]
                etype += [_VIRTUAL, _VIRTUAL]
            n += m + 1
        feats_arr = np.asarray(feats, dtype=self.dtype).reshape(-1, self.feat_dim)
        return dict(
            x=feats_arr, node_graph=np.asarray(node_graph, dtype=np.intp), n=n,
            src=np.asarray(src, dtype=np.intp), dst=np.asarray(dst, dtype=np.intp),
            etype=np.asarray(etype, dtype=np.intp), virtual=virtual, atom_offset=atom_offset,
            bond_u=np.asarray(bond_u, dtype=np.intp), bond_v=np.asarray(bond_v, dtype=np.intp),
            bond_graph=np.asarray(bond_graph, dtype=np.intp), bond_offset=bond_offset,
        )

    def encode(self, params, graphs: Sequence[MolGraph], cond: np.ndarray,
               frozen: frozenset[int] = frozenset()):
        """Node embeddings (packed) and per-graph embeddings (virtual nodes)."""
        pk = self._pack(graphs, frozen)
        cfg = self.config
        d, heads = cfg.num_emb, cfg.num_heads
        cond = np.asarray(cond, dtype=self.dtype).reshape(len(graphs), -1)
        if cond.shape[1] == 0:
            cond = np.zeros((len(graphs), 1), dtype=self.dtype)
        is_virtual = np.zeros((pk["n"], 1), dtype=self.dtype)
        is_virtual[pk["virtual"]] = 1
        cond_proj = (Tensor(cond) @ params["cond.w"] + params["cond.b"])[pk["node_graph"]]
        h = Tensor(pk["x"]) @ params["embed.w"] + params["embed.b"] + cond_proj * is_virtual
        n = pk["n"]
        self_loops = np.arange(n, dtype=np.intp)
        src_all = np.concatenate([pk["src"], self_loops])
        dst_all = np.concatenate([pk["dst"], self_loops])
        et_all = np.concatenate([pk["etype"], np.full(n, _SELF, dtype=np.intp)])
        dh = d // heads
        head_sum = np.zeros((d, heads), dtype=self.dtype)
        for k in range(heads):
            head_sum[k * dh:(k + 1) * dh, k] = 1.0
        scale = 1.0 / np.sqrt(dh)
        for layer in range(cfg.num_layers):
            p = f"layer{layer}."
            if len(pk["src"]):
                msg = h[pk["src"]] + params[p + "conv_edge"][pk["etype"]]
                agg = segment_sum(msg, pk["dst"], n)
            else:
                agg = Tensor(np.zeros((n, d), dtype=self.dtype))
            conv = (agg @ params[p + "conv.w"] + params[p + "conv.b"]).leaky_relu()
            z = concat([h, conv], axis=1)
            q, k_, v = z @ params[p + "q"], z @ params[p + "k"], z @ params[p + "v"]
            keys = k_[src_all] + params[p + "att_edge"][et_all]
            scores = ((q[dst_all] * keys) @ head_sum) * scale
            alpha = segment_softmax(scores, dst_all, n)
            att = segment_sum((alpha @ head_sum.T) * v[src_all], dst_all, n)
            h = layer_norm(h + att @ params[p + "o"], params[p + "ln1.g"], params[p + "ln1.b"])
            ff = (h @ params[p + "ff1.w"] + params[p + "ff1.b"]).leaky_relu()
            ff = ff @ params[p + "ff2.w"] + params[p + "ff2.b"]
            h = layer_norm(h + ff, params[p + "ln2.g"], params[p + "ln2.b"])
        return h, h[pk["virtual"]], pk

    # -- action log-probabilities ------------------------------------------------------

    def log_probs(self, params, graphs: Sequence[MolGraph], cond: np.ndarray,
                  queries: Sequence[Query], frozen: frozenset[int] = frozenset(),
                  full: bool = False):
        """Grouped log-probabilities, one per query (a Tensor).

        With ``full=True`` also return the per-action log-probabilities of each
        query as numpy arrays (used for sampling).
        """
        h, gemb, pk = self.encode(params, graphs, cond, frozen)
        node_graph = pk["node_graph"]
        blocks: dict[str, list] = {}   # head -> (rows, cols, query, local index)

        def put(head, row, col, q, j):
            blocks.setdefault(head, []).append((row, col, q, j))

        pair_rows: list[tuple[int, int, int]] = []
        for qi, qr in enumerate(queries):
            b = qr.state
            ao, bo = pk["atom_offset"][b], pk["bond_offset"][b]
            for j, a in enumerate(qr.actions):
                k = a.kind
                if k is ActionType.ADD_NODE:
                    if a.a < 0:
                        put("add_root", b, self._el_index[a.value], qi, j)
                    else:
                        put("add_node", ao + a.a, self._el_index[a.value], qi, j)
                elif k is ActionType.ADD_EDGE:
                    put("add_edge", len(pair_rows), 0, qi, j)
                    pair_rows.append((ao + a.a, ao + a.b, b))
                elif k is ActionType.SET_NODE_ATTR:
                    put("set_node", ao + a.a, 0 if a.value == "R" else 1, qi, j)
                elif k is ActionType.SET_EDGE_ATTR:
                    put("set_edge", bo + a.a, self._order_index[a.value], qi, j)
                elif k is ActionType.STOP:
                    put("stop", b, 0, qi, j)
                elif k is ActionType.DELETE_NODE:
                    put("del_node", ao + a.a, 0, qi, j)
                elif k is ActionType.DELETE_EDGE:
                    put("del_edge", bo + a.a, 0, qi, j)
                elif k is ActionType.UNSET_NODE_ATTR:
                    put("unset_node", ao + a.a, 0, qi, j)
                elif k is ActionType.UNSET_EDGE_ATTR:
                    put("unset_edge", bo + a.a, 0, qi, j)

        pieces, qids, locs = [], [], []
        for head, items in blocks.items():
            rows = np.fromiter((r for r, _, _, _ in items), dtype=np.intp, count=len(items))
            cols = np.fromiter((c for _, c, _, _ in items), dtype=np.intp, count=len(items))
            uniq, inv = np.unique(rows, return_inverse=True)
            if head in ("add_root", "stop"):
                inp = gemb[uniq]
            elif head in ("add_node", "set_node", "del_node", "unset_node"):
                inp = concat([h[uniq], gemb[node_graph[uniq]]], axis=1)
            elif head in ("set_edge", "del_edge", "unset_edge"):
                u, v = pk["bond_u"][uniq], pk["bond_v"][uniq]
                inp = concat([h[u] + h[v], gemb[pk["bond_graph"][uniq]]], axis=1)
            else:  # add_edge: candidate atom pairs
                pr = np.asarray(pair_rows, dtype=np.intp)[uniq]
                inp = concat([h[pr[:, 0]] + h[pr[:, 1]], gemb[pr[:, 2]]], axis=1)
            out = self._mlp(params, "head." + head, inp)
            pieces.append(out[(inv, cols)])
            qids.append(np.fromiter((q for _, _, q, _ in items), dtype=np.intp, count=len(items)))
            locs.append(np.fromiter((j for _, _, _, j in items), dtype=np.intp, count=len(items)))
        logits = concat(pieces, axis=0)
        qid = np.concatenate(qids)
        loc = np.concatenate(locs)
        logp = segment_log_softmax(logits, qid, len(queries))

        # flat position of (query, local action index)
        starts = np.zeros(len(queries) + 1, dtype=np.intp)
        starts[1:] = np.cumsum([len(qr.actions) for qr in queries])
        position = np.empty(len(qid), dtype=np.intp)
        position[starts[qid] + loc] = np.arange(len(qid))
        grouped = None
        if any(len(qr.group) for qr in queries):
            gpos, gq = [], []
            for qi, qr in enumerate(queries):
                for j in qr.group:
                    gpos.append(position[starts[qi] + j])
                    gq.append(qi)
            grouped = segment_logsumexp(logp[np.asarray(gpos, dtype=np.intp)],
                                        np.asarray(gq, dtype=np.intp), len(queries))
        if not full:
            return grouped
        per_action = [logp.data[position[starts[qi]:starts[qi + 1]]]
                      for qi in range(len(queries))]
        return grouped, per_action

    def log_prob_of(self, params, mdp: MolMDP, trajectories: Sequence, cond: np.ndarray,
                    backward: bool = False) -> Tensor:
        """Per-trajectory sum of step log-probabilities, shape ``(B,)``.

        Forward: ``sum_t log P_F(s_{t+1} | s_t)`` including the final Stop.
        Backward: ``sum_t log P_B(s_t | s_{t+1})`` over the non-Stop steps.
        Each step is the probability of the successor's isomorphism class,
        i.e. summed over every action that leads to it.
        """
        cond = np.asarray(cond, dtype=self.dtype).reshape(len(trajectories), -1)
        graphs, rows, queries, owner = [], [], [], []
        for i, tr in enumerate(trajectories):
            base = len(graphs)
            n_states = len(tr.actions) if tr.terminal else len(tr.states)
            graphs.extend(tr.states[:n_states])
            rows.extend([i] * n_states)
            for t, a in enumerate(tr.actions):
                nxt = tr.states[t + 1]
                if not backward:
                    g = tr.states[t]
                    legal = mdp.forward_actions(g)
                    if a not in legal:
                        raise ValueError(f"trajectory {i} step {t}: {a!r} is not legal")
                    group = mdp.forward_group(g, a, nxt)
                    queries.append(Query(base + t, False, legal, group))
                elif a.kind is not ActionType.STOP:
                    b = mdp.backward_for(tr.states[t], a, nxt)
                    legal = mdp.backward_actions(nxt)
                    group = mdp.backward_group(nxt, b, tr.states[t])
                    if not group:
                        raise ValueError(f"trajectory {i} step {t}: no backward action undoes {a!r}")
                    queries.append(Query(base + t + 1, True, legal, group))
                else:
                    continue
                owner.append(i)
        if not queries:
            return Tensor(np.zeros(len(trajectories), dtype=self.dtype))
        per_step = self.log_probs(params, graphs, cond[np.asarray(rows, dtype=np.intp)],
                                  queries, mdp.frozen_atoms)
        return segment_sum(per_step, np.asarray(owner, dtype=np.intp), len(trajectories))

    def action_distributions(self, graphs: Sequence[MolGraph], cond: np.ndarray,
                             mdp: MolMDP, backward: bool = False,
                             params: PolicyParams | None = None) -> list[np.ndarray]:
        """Per-state log-probabilities over the legal actions (no gradient)."""
        params = params if params is not None else self.params
        queries = [Query(b, backward, mdp.backward_actions(g) if backward
                         else mdp.forward_actions(g))
                   for b, g in enumerate(graphs)]
        with no_grad():
            _, dists = self.log_probs(params, graphs, cond, queries, mdp.frozen_atoms, full=True)
        return dists

    def log_z(self, params, cond: np.ndarray) -> Tensor:
        cond = np.asarray(cond, dtype=self.dtype)
        if cond.ndim == 1:
            cond = cond[None, :]
        if cond.shape[1] == 0:
            cond = np.zeros((len(cond), 1), dtype=self.dtype)
        return self._mlp(params, "logz", Tensor(cond)).reshape(-1)


def recalibrate_log_z(params: PolicyParams, sigma: float, rng: np.random.Generator) -> None:
    """Add N(0, sigma) noise to every logZ-head parameter, in place."""
    if sigma <= 0:
        return
    for name, t in params.items():
        if name.startswith("logz."):
            t.data = (t.data + rng.normal(0.0, sigma, size=t.shape)).astype(t.data.dtype)


# -- checkpoints ----------------------------------------------------------------------

_MAGIC = b"AGFNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointMismatch(CheckpointError):
    """The checkpoint was written for a different configuration."""


def save_checkpoint(path: str | Path, params: PolicyParams, config_hash: str,
                    meta: dict | None = None) -> None:
    """Binary layout: magic, version, config hash, JSON metadata, then per
    tensor (name length, name, rank, dims, little-endian float32 data)."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    h = config_hash.encode("ascii")
    buf.write(struct.pack("<I", len(h)) + h)
    m = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(m)) + m)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)) + nb)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path, expected_hash: str | None = None, force: bool = False,
                    dtype="float32") -> tuple[PolicyParams, str, dict]:
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(_MAGIC))) != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hl,) = struct.unpack("<I", take(4))
    config_hash = bytes(take(hl)).decode("ascii")
    (ml,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(ml)).decode("utf-8"))
    if expected_hash is not None and config_hash != expected_hash and not force:
        raise CheckpointMismatch(f"{path}: config hash {config_hash[:12]} does not match "
                              f"{expected_hash[:12]} (use --force to override)")
    (count,) = struct.unpack("<I", take(4))
    params = PolicyParams()
    for _ in range(count):
        (nl,) = struct.unpack("<I", take(4))
        name = bytes(take(nl)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return params, config_hash, meta


def params_digest(params: PolicyParams) -> str:
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
