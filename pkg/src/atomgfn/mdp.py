"""Atom-level construction MDP with valence masks and its backward twin.

Forward actions grow a connected graph one atom, bond or attribute at a
time; backward actions undo them. Every state stays a valid (if partially
specified) molecular graph, and a trajectory-length budget is enforced by
the masks themselves: the number of steps already taken is a function of
the state, so the masks stay Markov.

Transition probabilities are defined between isomorphism classes of
states. Several labelled actions can lead to isomorphic graphs (adding an
oxygen to either end of ethane), and :meth:`MolMDP.forward_group` /
:meth:`MolMDP.backward_group` list all of them so the policy can sum
their probabilities.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .molgraph import (BOND_ORDERS, CHIRALITY_TAGS, ELEMENTS, MAX_EDGES, MAX_NODES, UNSET,
                       VOCABULARY, MolGraph)
from .smiles import state_key


class ActionType(Enum):
    ADD_NODE = "AddNode"
    ADD_EDGE = "AddEdge"
    SET_NODE_ATTR = "SetNodeAttr"
    SET_EDGE_ATTR = "SetEdgeAttr"
    STOP = "Stop"
    DELETE_NODE = "DeleteNode"
    DELETE_EDGE = "DeleteEdge"
    UNSET_NODE_ATTR = "UnsetNodeAttr"
    UNSET_EDGE_ATTR = "UnsetEdgeAttr"

    @property
    def is_backward(self) -> bool:
        return self in _BACKWARD


_BACKWARD = frozenset({ActionType.DELETE_NODE, ActionType.DELETE_EDGE,
                       ActionType.UNSET_NODE_ATTR, ActionType.UNSET_EDGE_ATTR})


class Action(NamedTuple):
    """``a`` is a node index (attach point for AddNode, -1 for none) or an
    edge index; ``b`` is the second node of AddEdge; ``value`` holds the
    element, chirality tag or bond order."""
    kind: ActionType
    a: int = -1
    b: int = -1
    value: object = None

    def __repr__(self) -> str:
        args = [str(x) for x in (self.a, self.b) if x != -1]
        if self.value is not None:
            args.append(repr(self.value))
        return f"{self.kind.value}({', '.join(args)})"


def add_node(attach_to: int | None, element: str) -> Action:
    return Action(ActionType.ADD_NODE, -1 if attach_to is None else attach_to, -1, element)


def add_edge(u: int, v: int) -> Action:
    return Action(ActionType.ADD_EDGE, min(u, v), max(u, v))


def set_node_attr(node: int, tag: str) -> Action:
    return Action(ActionType.SET_NODE_ATTR, node, -1, tag)


def set_edge_attr(edge: int, order: int) -> Action:
    return Action(ActionType.SET_EDGE_ATTR, edge, -1, order)


STOP = Action(ActionType.STOP)


def delete_node(node: int) -> Action:
    return Action(ActionType.DELETE_NODE, node)


def delete_edge(edge: int) -> Action:
    return Action(ActionType.DELETE_EDGE, edge)


def unset_node_attr(node: int) -> Action:
    return Action(ActionType.UNSET_NODE_ATTR, node)


def unset_edge_attr(edge: int) -> Action:
    return Action(ActionType.UNSET_EDGE_ATTR, edge)


class IllegalActionError(ValueError):
    pass


@dataclass(frozen=True)
class MDPConfig:
    elements: tuple[str, ...] = VOCABULARY
    bond_orders: tuple[int, ...] = BOND_ORDERS
    chirality: bool = True
    max_nodes: int = MAX_NODES
    max_edges: int = MAX_EDGES
    max_traj_len: int = 40

    def __post_init__(self):
        unknown = set(self.elements) - set(ELEMENTS)
        if unknown or not self.elements:
            raise ValueError(f"bad element vocabulary {self.elements!r}")
        if not self.bond_orders or not set(self.bond_orders) <= set(BOND_ORDERS) \
                or 1 not in self.bond_orders:
            raise ValueError(f"bond orders must include 1 and lie in {BOND_ORDERS}")
        if self.max_traj_len < 2:
            raise ValueError("max_traj_len must allow at least AddNode + Stop")


# tetrahedral-capable elements; halogens and oxygen never carry a tag
_MAX_VALENCE = {e: el.max_valence for e, el in ELEMENTS.items()}
_CHIRAL_ELEMENTS = frozenset(e for e, el in ELEMENTS.items() if el.max_valence >= 3)


def steps_to_build(g: MolGraph) -> int:
    """Forward steps from the empty graph to ``g`` (excluding Stop).

    Each step adds exactly one atom-with-bond, bond, bond order or tag, so the
    count is the same along every path.
    """
    if not g.atoms:
        return 0
    n_set = sum(1 for b in g.bonds if b.order != UNSET)
    n_chiral = sum(1 for a in g.atoms if a.chirality is not None)
    return len(g.bonds) + 1 + n_set + n_chiral


@dataclass
class Trajectory:
    """States ``s_0 .. s_T`` and the ``T`` actions between them.

    A terminal trajectory ends with Stop, whose successor is a copy of the
    last graph. ``log_reward`` is filled in by the trainer.
    """
    states: list[MolGraph]
    actions: list[Action]
    cond: object = None
    offline: bool = False
    log_reward: float | None = None
    logpf: list[float] = field(default_factory=list)
    logpb: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(self.actions) != len(self.states) - 1:
            raise ValueError("a trajectory needs exactly one more state than actions")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def terminal(self) -> bool:
        return bool(self.actions) and self.actions[-1].kind is ActionType.STOP

    @property
    def final(self) -> MolGraph:
        return self.states[-1]


class MolMDP:
    """Action enumeration, masks and transitions; optionally seeded.

    With a seed graph (e.g. a Bemis-Murcko scaffold) the seed is ``s_0``; its
    atoms occupy indices ``0..m-1`` of every later state and neither its
    atoms nor its bonds can be deleted, unset or re-tagged.
    """

    def __init__(self, config: MDPConfig | None = None, seed: MolGraph | None = None):
        self.config = config or MDPConfig()
        seed = seed if seed is not None else MolGraph()
        if seed.atoms:
            seed.validate(self.config.max_nodes, self.config.max_edges)
            if any(b.order == UNSET for b in seed.bonds):
                raise ValueError("seed graph must have every bond order set")
            bad = {a.element for a in seed.atoms} - set(self.config.elements)
            if bad:
                raise ValueError(f"seed uses elements outside the vocabulary: {sorted(bad)}")
        self.seed = seed
        self.frozen_atoms = frozenset(range(len(seed.atoms)))
        self.frozen_bonds = frozenset((b.u, b.v) for b in seed.bonds)
        self._seed_steps = steps_to_build(seed)
        if self.cost(seed) > self.config.max_traj_len:
            raise ValueError("seed graph does not fit in max_traj_len")
        self._fwd_cache: dict[MolGraph, tuple[Action, ...]] = {}
        self._bwd_cache: dict[MolGraph, tuple[Action, ...]] = {}
        self._templates: dict[int, tuple[Action, ...]] = {}

    # -- bookkeeping ------------------------------------------------------

    @property
    def initial_state(self) -> MolGraph:
        return self.seed

    def steps_taken(self, g: MolGraph) -> int:
        return steps_to_build(g) - self._seed_steps

    def cost(self, g: MolGraph) -> int:
        """Minimal trajectory length of any completion of ``g`` (incl. Stop)."""
        unset = sum(1 for b in g.bonds if b.order == UNSET)
        return self.steps_taken(g) + unset + 1

    def is_frozen_bond(self, g: MolGraph, k: int) -> bool:
        b = g.bonds[k]
        return (b.u, b.v) in self.frozen_bonds

    def state_key(self, g: MolGraph) -> str:
        return state_key(g, self.frozen_atoms)

    # -- enumeration ------------------------------------------------------

    def forward_actions(self, g: MolGraph) -> tuple[Action, ...]:
        """Legal constructive actions of ``g``, in a fixed order."""
        hit = self._fwd_cache.get(g)
        if hit is None:
            hit = self._fwd_cache[g] = tuple(self._forward_actions(g))
            if len(self._fwd_cache) > 200_000:
                self._fwd_cache.clear()
        return hit

    def _forward_actions(self, g: MolGraph) -> list[Action]:
        cfg = self.config
        n, e = len(g.atoms), len(g.bonds)
        budget = cfg.max_traj_len - self.cost(g)
        if n == 0:
            return list(self._add_node_templates(-1)) if budget >= 1 else []
        committed = [0] * n
        unset = []
        for k, b in enumerate(g.bonds):
            o = b.order or 1
            committed[b.u] += o
            committed[b.v] += o
            if b.order == UNSET:
                unset.append(k)
        spare = [_MAX_VALENCE[a.element] - c for a, c in zip(g.atoms, committed)]
        out: list[Action] = []
        grow = e < cfg.max_edges and budget >= 2
        open_atoms = [i for i in range(n) if spare[i] >= 1]
        if grow and n < cfg.max_nodes:
            for i in open_atoms:
                out.extend(self._add_node_templates(i))
        if grow:
            bonded = g.bond_index
            for x, u in enumerate(open_atoms):
                for v in open_atoms[x + 1:]:
                    if (u, v) not in bonded:
                        out.append(Action(ActionType.ADD_EDGE, u, v))
        if cfg.chirality and budget >= 1:
            for i, a in enumerate(g.atoms):
                if a.chirality is None and a.element in _CHIRAL_ELEMENTS \
                        and i not in self.frozen_atoms:
                    out.extend(self._tag_templates(i))
        for k in unset:
            b = g.bonds[k]
            room = min(spare[b.u], spare[b.v]) + 1
            out.extend(Action(ActionType.SET_EDGE_ATTR, k, -1, order)
                       for order in cfg.bond_orders if order <= room)
        if not unset:
            out.append(STOP)
        return out

    def _tag_templates(self, i: int) -> tuple[Action, ...]:
        hit = self._templates.get(("tag", i))
        if hit is None:
            hit = self._templates[("tag", i)] = tuple(
                Action(ActionType.SET_NODE_ATTR, i, -1, t) for t in CHIRALITY_TAGS)
        return hit

    def _add_node_templates(self, i: int) -> tuple[Action, ...]:
        hit = self._templates.get(i)
        if hit is None:
            hit = self._templates[i] = tuple(
                Action(ActionType.ADD_NODE, i, -1, el) for el in self.config.elements)
        return hit

    def backward_actions(self, g: MolGraph) -> tuple[Action, ...]:
        """Legal deconstructive actions of ``g`` (empty at the seed)."""
        hit = self._bwd_cache.get(g)
        if hit is None:
            hit = self._bwd_cache[g] = tuple(self._backward_actions(g))
            if len(self._bwd_cache) > 200_000:
                self._bwd_cache.clear()
        return hit

    def _backward_actions(self, g: MolGraph) -> list[Action]:
        n = len(g.atoms)
        out: list[Action] = []
        for i, a in enumerate(g.atoms):
            if i in self.frozen_atoms:
                continue
            if a.chirality is not None:
                continue
            deg = g.degree(i)
            if deg == 0 and n == 1:
                out.append(delete_node(i))
            elif deg == 1 and g.bonds[g.adjacency[i][0][1]].order == UNSET:
                out.append(delete_node(i))
        ring = g.ring_bonds
        for k, b in enumerate(g.bonds):
            if self.is_frozen_bond(g, k):
                continue
            if b.order == UNSET:
                if k in ring:
                    out.append(delete_edge(k))
            else:
                out.append(unset_edge_attr(k))
        for i, a in enumerate(g.atoms):
            if a.chirality is not None and i not in self.frozen_atoms:
                out.append(unset_node_attr(i))
        return out

    # -- transitions ------------------------------------------------------

    def apply(self, g: MolGraph, a: Action, check: bool = False) -> MolGraph:
        """Successor of ``g`` under ``a``; Stop returns ``g`` itself."""
        if check:
            legal = self.backward_actions(g) if a.kind.is_backward else self.forward_actions(g)
            if a not in legal:
                raise IllegalActionError(f"{a!r} is not legal here")
        k = a.kind
        if k is ActionType.ADD_NODE:
            return g.with_atom(a.value, None if a.a < 0 else a.a)
        if k is ActionType.ADD_EDGE:
            return g.with_bond(a.a, a.b)
        if k is ActionType.SET_NODE_ATTR:
            return g.with_chirality(a.a, a.value)
        if k is ActionType.SET_EDGE_ATTR:
            return g.with_bond_order(a.a, a.value)
        if k is ActionType.STOP:
            return g
        if k is ActionType.DELETE_NODE:
            return g.without_atom(a.a)
        if k is ActionType.DELETE_EDGE:
            return g.without_bond(a.a)
        if k is ActionType.UNSET_NODE_ATTR:
            return g.with_chirality(a.a, None)
        if k is ActionType.UNSET_EDGE_ATTR:
            return g.with_bond_order(a.a, UNSET)
        raise IllegalActionError(f"unknown action {a!r}")

    def inverse(self, g: MolGraph, a: Action) -> Action:
        """The action that undoes ``a`` when applied to ``apply(g, a)``.

        Undoing a DeleteNode re-appends the atom, so the round trip gives an
        isomorphic graph rather than an identical one in that single case.
        """
        k = a.kind
        if k is ActionType.ADD_NODE:
            return delete_node(len(g.atoms))
        if k is ActionType.ADD_EDGE:
            return delete_edge(len(g.bonds))
        if k is ActionType.SET_NODE_ATTR:
            return unset_node_attr(a.a)
        if k is ActionType.SET_EDGE_ATTR:
            return unset_edge_attr(a.a)
        if k is ActionType.DELETE_NODE:
            nbrs = g.neighbors(a.a)
            attach = None if not nbrs else (nbrs[0] - (nbrs[0] > a.a))
            return add_node(attach, g.atoms[a.a].element)
        if k is ActionType.DELETE_EDGE:
            b = g.bonds[a.a]
            return add_edge(b.u, b.v)
        if k is ActionType.UNSET_NODE_ATTR:
            return set_node_attr(a.a, g.atoms[a.a].chirality)
        if k is ActionType.UNSET_EDGE_ATTR:
            # a bond re-set by the inverse keeps its index
            return set_edge_attr(a.a, g.bonds[a.a].order)
        raise IllegalActionError(f"{a!r} has no inverse")

    # -- isomorphism-merged transitions ------------------------------------

    def _signature(self, g: MolGraph, i: int, extra=(0, 0), chirality="keep"):
        a = g.atoms[i]
        tag = a.chirality if chirality == "keep" else chirality
        return (a.element, g.degree(i) + extra[0], g.committed_valence(i) + extra[1],
                tag, i in self.frozen_atoms)

    def _delta(self, g: MolGraph, a: Action):
        """Signed multiset change of (atom signatures, bond orders) under ``a``.

        It is an isomorphism invariant of the successor relative to ``g``, so
        two actions can only produce isomorphic successors if deltas agree.
        """
        d: Counter = Counter()
        sig = self._signature
        k = a.kind
        if k is ActionType.ADD_NODE:
            d[(a.value, 1 if a.a >= 0 else 0, 1 if a.a >= 0 else 0, None, False)] += 1
            if a.a >= 0:
                d[sig(g, a.a)] -= 1
                d[sig(g, a.a, (1, 1))] += 1
                d[("bond", UNSET)] += 1
        elif k is ActionType.ADD_EDGE:
            for x in (a.a, a.b):
                d[sig(g, x)] -= 1
                d[sig(g, x, (1, 1))] += 1
            d[("bond", UNSET)] += 1
        elif k in (ActionType.SET_NODE_ATTR, ActionType.UNSET_NODE_ATTR):
            d[sig(g, a.a)] -= 1
            d[sig(g, a.a, chirality=a.value)] += 1
        elif k is ActionType.SET_EDGE_ATTR:
            b = g.bonds[a.a]
            for x in (b.u, b.v):
                d[sig(g, x)] -= 1
                d[sig(g, x, (0, a.value - 1))] += 1
            d[("bond", UNSET)] -= 1
            d[("bond", a.value)] += 1
        elif k is ActionType.UNSET_EDGE_ATTR:
            b = g.bonds[a.a]
            for x in (b.u, b.v):
                d[sig(g, x)] -= 1
                d[sig(g, x, (0, 1 - b.order))] += 1
            d[("bond", b.order)] -= 1
            d[("bond", UNSET)] += 1
        elif k is ActionType.DELETE_NODE:
            d[sig(g, a.a)] -= 1
            for j in g.neighbors(a.a):
                d[sig(g, j)] -= 1
                d[sig(g, j, (-1, -1))] += 1
                d[("bond", UNSET)] -= 1
        elif k is ActionType.DELETE_EDGE:
            b = g.bonds[a.a]
            for x in (b.u, b.v):
                d[sig(g, x)] -= 1
                d[sig(g, x, (-1, -1))] += 1
            d[("bond", UNSET)] -= 1
        return frozenset((key, c) for key, c in d.items() if c)

    def _group(self, g: MolGraph, actions: Sequence[Action], chosen: Action,
               target: MolGraph) -> tuple[int, ...]:
        if chosen.kind is ActionType.STOP:
            return (actions.index(chosen),)
        want = self._delta(g, chosen)
        key = None
        out = []
        for idx, a in enumerate(actions):
            if a.kind is not chosen.kind or a.value != chosen.value:
                continue
            if a == chosen:
                out.append(idx)
                continue
            if self._delta(g, a) != want:
                continue
            if key is None:
                key = self.state_key(target)
            if self.state_key(self.apply(g, a)) == key:
                out.append(idx)
        return tuple(out)

    def forward_group(self, g: MolGraph, a: Action, g_next: MolGraph | None = None
                      ) -> tuple[int, ...]:
        """Indices into ``forward_actions(g)`` of every action whose successor
        is isomorphic to ``apply(g, a)``."""
        if g_next is None:
            g_next = self.apply(g, a)
        return self._group(g, self.forward_actions(g), a, g_next)

    def backward_group(self, g_next: MolGraph, b: Action, g: MolGraph | None = None
                       ) -> tuple[int, ...]:
        """Indices into ``backward_actions(g_next)`` of every action whose
        result is isomorphic to ``apply(g_next, b)``."""
        if g is None:
            g = self.apply(g_next, b)
        return self._group(g_next, self.backward_actions(g_next), b, g)

    def backward_for(self, g: MolGraph, a: Action, g_next: MolGraph) -> Action | None:
        """A backward action from ``g_next`` undoing forward ``a`` (None for Stop)."""
        if a.kind is ActionType.STOP:
            return None
        return self.inverse(g, a)

    # -- trajectories -----------------------------------------------------

    def replay(self, actions: Sequence[Action], check: bool = True) -> Trajectory:
        """Apply forward ``actions`` from ``s_0``."""
        states = [self.seed]
        for a in actions:
            states.append(self.apply(states[-1], a, check=check))
        return Trajectory(states, list(actions))

    def random_trajectory(self, rng: np.random.Generator) -> Trajectory:
        """Roll out the uniform policy over legal actions until Stop."""
        states = [self.seed]
        actions: list[Action] = []
        while True:
            legal = self.forward_actions(states[-1])
            a = legal[rng.integers(len(legal))]
            actions.append(a)
            states.append(self.apply(states[-1], a))
            if a.kind is ActionType.STOP:
                return Trajectory(states, actions)

    def deconstruct(self, x: MolGraph, rng: np.random.Generator,
                    backward_logprobs: Callable[[MolGraph], np.ndarray] | None = None,
                    max_back_steps: int | None = None) -> Trajectory:
        """Sample a backward path from ``x`` to ``s_0`` and return it as a
        forward trajectory (ending with Stop) that replays to a relabelling of
        ``x``.

        ``backward_logprobs(g)`` gives log-probabilities aligned with
        ``backward_actions(g)``; None means uniform. Every backward path has
        the same length, so ``max_back_steps`` simply rejects molecules that
        need more steps than allowed.
        """
        x.validate(self.config.max_nodes, self.config.max_edges)
        bad = {a.element for a in x.atoms} - set(self.config.elements)
        if bad:
            raise ValueError(f"molecule uses elements outside the vocabulary: {sorted(bad)}")
        if any(b.order not in self.config.bond_orders for b in x.bonds):
            raise ValueError("molecule has a bond order outside the configured set")
        if any(a.chirality is not None for a in x.atoms) and not self.config.chirality:
            raise ValueError("molecule carries chirality tags but chirality is disabled")
        if self.seed.atoms and x.atoms[:len(self.seed.atoms)] != self.seed.atoms:
            raise ValueError("molecule does not start with the seed atoms")
        n_steps = self.steps_taken(x)
        if self.cost(x) > self.config.max_traj_len:
            raise ValueError(f"molecule needs {n_steps + 1} steps, "
                             f"max_traj_len is {self.config.max_traj_len}")
        if max_back_steps is not None and n_steps > max_back_steps:
            raise ValueError(f"molecule needs {n_steps} backward steps > {max_back_steps}")

        # Walk backwards, remembering which original atom/bond each step removes.
        g = x
        atom_id = list(range(len(x.atoms)))       # current index -> original atom
        bond_id = list(range(len(x.bonds)))       # current index -> original bond
        events: list[tuple] = []
        while self.steps_taken(g) > 0:
            legal = self.backward_actions(g)
            if not legal:
                raise ValueError("deconstruction got stuck before reaching s_0")
            if backward_logprobs is None:
                b = legal[rng.integers(len(legal))]
            else:
                lp = np.asarray(backward_logprobs(g), dtype=float)
                p = np.exp(lp - lp.max())
                b = legal[rng.choice(len(legal), p=p / p.sum())]
            k = b.kind
            if k is ActionType.DELETE_NODE:
                nb = g.adjacency[b.a]
                attach = atom_id[nb[0][0]] if nb else None
                events.append(("node", atom_id[b.a], attach))
                if nb:
                    del bond_id[nb[0][1]]
                del atom_id[b.a]
            elif k is ActionType.DELETE_EDGE:
                events.append(("edge", bond_id[b.a]))
                del bond_id[b.a]
            elif k is ActionType.UNSET_EDGE_ATTR:
                events.append(("order", bond_id[b.a]))
            elif k is ActionType.UNSET_NODE_ATTR:
                events.append(("tag", atom_id[b.a]))
            g = self.apply(g, b)
            if len(events) > n_steps:
                raise RuntimeError("backward walk exceeded the step count")

        # Replay forwards with fresh indices.
        fwd_atom = {i: i for i in range(len(self.seed.atoms))}
        fwd_bond = {}
        for k, b in enumerate(self.seed.bonds):
            for kx, bx in enumerate(x.bonds):
                if (bx.u, bx.v) == (b.u, b.v):
                    fwd_bond[kx] = k
        n_atoms, n_bonds = len(self.seed.atoms), len(self.seed.bonds)
        actions: list[Action] = []
        for ev in reversed(events):
            if ev[0] == "node":
                _, orig, attach = ev
                actions.append(add_node(None if attach is None else fwd_atom[attach],
                                        x.atoms[orig].element))
                fwd_atom[orig] = n_atoms
                n_atoms += 1
                if attach is not None:
                    kx = x.bond_between(orig, attach)
                    fwd_bond[kx] = n_bonds
                    n_bonds += 1
            elif ev[0] == "edge":
                bx = x.bonds[ev[1]]
                actions.append(add_edge(fwd_atom[bx.u], fwd_atom[bx.v]))
                fwd_bond[ev[1]] = n_bonds
                n_bonds += 1
            elif ev[0] == "order":
                actions.append(set_edge_attr(fwd_bond[ev[1]], x.bonds[ev[1]].order))
            else:
                actions.append(set_node_attr(fwd_atom[ev[1]], x.atoms[ev[1]].chirality))
        actions.append(STOP)
        traj = self.replay(actions, check=False)
        traj.offline = True
        return traj


def enumerate_terminals(mdp: MolMDP, limit: int = 1_000_000) -> dict[str, MolGraph]:
    """Brute force: every terminal state reachable from ``s_0``, by state key."""
    seen = {mdp.state_key(mdp.seed)}
    frontier = [mdp.seed]
    out: dict[str, MolGraph] = {}
    while frontier:
        nxt = []
        for g in frontier:
            for a in mdp.forward_actions(g):
                if a.kind is ActionType.STOP:
                    out.setdefault(mdp.state_key(g), g)
                    continue
                h = mdp.apply(g, a)
                key = mdp.state_key(h)
                if key not in seen:
                    seen.add(key)
                    nxt.append(h)
                    if len(seen) > limit:
                        raise RuntimeError("state space larger than limit")
        frontier = nxt
    return out
