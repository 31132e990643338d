"""Attributed molecular graphs over a nine-element heavy-atom vocabulary.

Hydrogens are never stored; they are derived from the valence model.
Graphs are immutable values: every edit returns a new graph.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence


class Element(NamedTuple):
    symbol: str
    valences: tuple[int, ...]
    mass: float

    @property
    def max_valence(self) -> int:
        return max(self.valences)


# Standard atomic weights, 3 decimals.
ELEMENTS: dict[str, Element] = {
    e.symbol: e
    for e in (
        Element("C", (4,), 12.011),
        Element("S", (2, 4, 6), 32.065),
        Element("P", (3, 5), 30.974),
        Element("N", (3,), 14.007),
        Element("O", (2,), 15.999),
        Element("F", (1,), 18.998),
        Element("Cl", (1,), 35.453),
        Element("Br", (1,), 79.904),
        Element("I", (1,), 126.904),
    )
}
VOCABULARY: tuple[str, ...] = tuple(ELEMENTS)
HYDROGEN_MASS = 1.008

CHIRALITY_TAGS: tuple[str, ...] = ("R", "S")
BOND_ORDERS: tuple[int, ...] = (1, 2, 3)
UNSET = 0

MAX_NODES = 45
MAX_EDGES = 50


class ValenceError(ValueError):
    """Raised when an atom's bonds exceed every allowed valence."""


class Atom(NamedTuple):
    element: str
    chirality: str | None = None


class Bond(NamedTuple):
    u: int
    v: int
    order: int = UNSET  # 0 = unset, else 1/2/3

    def other(self, i: int) -> int:
        return self.v if i == self.u else self.u


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[Atom, ...] = ()
    bonds: tuple[Bond, ...] = ()

    def __post_init__(self):
        atoms = tuple(a if isinstance(a, Atom) else Atom(*a) for a in self.atoms)
        bonds = []
        for b in self.bonds:
            u, v, order = b if len(b) == 3 else (*b, UNSET)
            if u > v:
                u, v = v, u
            bonds.append(Bond(int(u), int(v), int(order)))
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", tuple(bonds))

    @classmethod
    def _make(cls, atoms: tuple[Atom, ...], bonds: tuple[Bond, ...]) -> MolGraph:
        # trusted fast path for edits: inputs are already normalized
        g = object.__new__(cls)
        object.__setattr__(g, "atoms", atoms)
        object.__setattr__(g, "bonds", bonds)
        return g

    # -- basic queries -------------------------------------------------

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    @property
    def num_bonds(self) -> int:
        return len(self.bonds)

    def __len__(self) -> int:
        return len(self.atoms)

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, the (neighbor, bond index) pairs."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for k, b in enumerate(self.bonds):
            adj[b.u].append((b.v, k))
            adj[b.v].append((b.u, k))
        return tuple(tuple(a) for a in adj)

    @cached_property
    def bond_index(self) -> dict[tuple[int, int], int]:
        return {(b.u, b.v): k for k, b in enumerate(self.bonds)}

    def bond_between(self, i: int, j: int) -> int | None:
        return self.bond_index.get((i, j) if i < j else (j, i))

    def neighbors(self, i: int) -> list[int]:
        return [j for j, _ in self.adjacency[i]]

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def element(self, i: int) -> Element:
        return ELEMENTS[self.atoms[i].element]

    def _check(self, i: int) -> None:
        if not 0 <= i < len(self.atoms):
            raise IndexError(f"atom index {i} out of range for {len(self.atoms)} atoms")

    def explicit_valence(self, i: int) -> int:
        """Sum of set bond orders around atom ``i``; unset bonds count 0."""
        self._check(i)
        return sum(self.bonds[k].order for _, k in self.adjacency[i])

    def committed_valence(self, i: int) -> int:
        """Like explicit_valence but an unset bond already commits one unit."""
        self._check(i)
        return sum(max(self.bonds[k].order, 1) for _, k in self.adjacency[i])

    def spare_valence(self, i: int) -> int:
        return self.element(i).max_valence - self.committed_valence(i)

    def implicit_hydrogens(self, i: int) -> int:
        ev = self.explicit_valence(i)
        for val in sorted(self.element(i).valences):
            if val >= ev:
                return val - ev
        raise ValenceError(
            f"atom {i} ({self.atoms[i].element}) has valence {ev}, "
            f"allowed {self.element(i).valences}"
        )

    def total_hydrogens(self) -> int:
        return sum(self.implicit_hydrogens(i) for i in range(len(self.atoms)))

    def is_connected(self) -> bool:
        n = len(self.atoms)
        if n <= 1:
            return True
        return len(self._component(0)) == n

    def _component(self, start: int, skip_atom: int | None = None,
                   skip_bond: int | None = None) -> set[int]:
        seen = {start}
        queue = deque([start])
        while queue:
            i = queue.popleft()
            for j, k in self.adjacency[i]:
                if j == skip_atom or k == skip_bond or j in seen:
                    continue
                seen.add(j)
                queue.append(j)
        return seen

    def stays_connected_without_atom(self, i: int) -> bool:
        n = len(self.atoms)
        if n <= 2:
            return True
        start = 0 if i != 0 else 1
        return len(self._component(start, skip_atom=i)) == n - 1

    def stays_connected_without_bond(self, k: int) -> bool:
        b = self.bonds[k]
        return b.v in self._component(b.u, skip_bond=k)

    def validate(self, max_nodes: int = MAX_NODES, max_edges: int = MAX_EDGES) -> None:
        """Raise ValueError if any structural invariant is violated."""
        n = len(self.atoms)
        if n > max_nodes:
            raise ValueError(f"{n} atoms exceeds max_nodes={max_nodes}")
        if len(self.bonds) > max_edges:
            raise ValueError(f"{len(self.bonds)} bonds exceeds max_edges={max_edges}")
        for a in self.atoms:
            if a.element not in ELEMENTS:
                raise ValueError(f"unsupported element {a.element!r}")
            if a.chirality not in (None, *CHIRALITY_TAGS):
                raise ValueError(f"bad chirality tag {a.chirality!r}")
        seen = set()
        for b in self.bonds:
            if b.u == b.v:
                raise ValueError(f"self-loop on atom {b.u}")
            if not (0 <= b.u < n and 0 <= b.v < n):
                raise ValueError(f"bond {b} references a missing atom")
            if (b.u, b.v) in seen:
                raise ValueError(f"duplicate bond {b.u}-{b.v}")
            if b.order not in (UNSET, *BOND_ORDERS):
                raise ValueError(f"bad bond order {b.order}")
            seen.add((b.u, b.v))
        for i in range(n):
            if self.committed_valence(i) > self.element(i).max_valence:
                raise ValenceError(f"atom {i} exceeds its maximum valence")
        if not self.is_connected():
            raise ValueError("graph is disconnected")

    # -- edits (return new graphs) ------------------------------------

    def with_atom(self, element: str, attach_to: int | None = None) -> MolGraph:
        atoms = self.atoms + (Atom(element),)
        bonds = self.bonds
        if attach_to is not None:
            bonds = bonds + (Bond(attach_to, len(self.atoms)),)
        return MolGraph._make(atoms, bonds)

    def with_bond(self, u: int, v: int, order: int = UNSET) -> MolGraph:
        u, v = (u, v) if u < v else (v, u)
        return MolGraph._make(self.atoms, self.bonds + (Bond(u, v, order),))

    def with_bond_order(self, k: int, order: int) -> MolGraph:
        b = self.bonds[k]
        bonds = self.bonds[:k] + (Bond(b.u, b.v, order),) + self.bonds[k + 1:]
        return MolGraph._make(self.atoms, bonds)

    def with_chirality(self, i: int, tag: str | None) -> MolGraph:
        atoms = self.atoms[:i] + (Atom(self.atoms[i].element, tag),) + self.atoms[i + 1:]
        return MolGraph._make(atoms, self.bonds)

    def without_bond(self, k: int) -> MolGraph:
        return MolGraph._make(self.atoms, self.bonds[:k] + self.bonds[k + 1:])

    def without_atom(self, i: int) -> MolGraph:
        """Drop atom ``i`` and its bonds; later atoms shift down by one."""
        atoms = self.atoms[:i] + self.atoms[i + 1:]
        shift = lambda j: j - 1 if j > i else j  # noqa: E731
        bonds = tuple(Bond(shift(b.u), shift(b.v), b.order)
                      for b in self.bonds if i not in (b.u, b.v))
        return MolGraph._make(atoms, bonds)

    def subgraph(self, keep: Iterable[int]) -> MolGraph:
        keep = sorted(set(keep))
        remap = {old: new for new, old in enumerate(keep)}
        atoms = tuple(self.atoms[i] for i in keep)
        bonds = tuple(Bond(remap[b.u], remap[b.v], b.order) for b in self.bonds
                      if b.u in remap and b.v in remap)
        return MolGraph(atoms, bonds)

    def permute(self, perm: Sequence[int]) -> MolGraph:
        """Relabel atoms so that old atom ``i`` becomes ``perm[i]``."""
        atoms: list[Atom | None] = [None] * len(self.atoms)
        for old, new in enumerate(perm):
            atoms[new] = self.atoms[old]
        bonds = sorted(Bond(*sorted((perm[b.u], perm[b.v])), b.order) for b in self.bonds)
        return MolGraph(tuple(atoms), tuple(bonds))

    def without_stereo(self) -> MolGraph:
        return MolGraph(tuple(Atom(a.element) for a in self.atoms), self.bonds)

    # -- rings ---------------------------------------------------------

    @cached_property
    def ring_bonds(self) -> frozenset[int]:
        return frozenset(k for k in range(len(self.bonds))
                         if self.stays_connected_without_bond(k))

    @cached_property
    def ring_atoms(self) -> frozenset[int]:
        out = set()
        for k in self.ring_bonds:
            out.update(self.bonds[k][:2])
        return frozenset(out)

    @cached_property
    def sssr(self) -> tuple[tuple[int, ...], ...]:
        """Smallest set of smallest rings, as atom cycles in traversal order."""
        return _minimum_cycle_basis(self)


def _bfs_paths(g: MolGraph, root: int) -> tuple[dict[int, int], dict[int, int | None]]:
    dist = {root: 0}
    parent: dict[int, int | None] = {root: None}
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j in sorted(g.neighbors(i)):
            if j not in dist:
                dist[j] = dist[i] + 1
                parent[j] = i
                queue.append(j)
    return dist, parent


def _minimum_cycle_basis(g: MolGraph) -> tuple[tuple[int, ...], ...]:
    # Horton candidates: shortest-path-tree cycles through every (root, edge),
    # then greedy GF(2) independence by (length, atom tuple).
    n, m = len(g.atoms), len(g.bonds)
    if m == 0:
        return ()
    n_components, seen = 0, set()
    for i in range(n):
        if i not in seen:
            seen |= g._component(i)
            n_components += 1
    rank_needed = m - n + n_components
    if rank_needed == 0:
        return ()

    def path_to_root(parent, x):
        out = [x]
        while parent[out[-1]] is not None:
            out.append(parent[out[-1]])
        return out

    candidates: dict[int, tuple[int, ...]] = {}
    ring_bonds = g.ring_bonds
    for r in sorted(g.ring_atoms):
        dist, parent = _bfs_paths(g, r)
        for k in ring_bonds:
            x, y = g.bonds[k].u, g.bonds[k].v
            if x not in dist or y not in dist:
                continue
            if parent[x] == y or parent[y] == x:
                continue
            px, py = path_to_root(parent, x), path_to_root(parent, y)
            if set(px) & set(py) != {r}:
                continue
            cycle = px[::-1] + py[:-1]  # r ... x, y ... (back to r)
            mask = 0
            for a, b in zip(cycle, cycle[1:] + cycle[:1]):
                mask |= 1 << g.bond_between(a, b)
            if mask not in candidates:
                candidates[mask] = _normalize_cycle(cycle)
    ordered = sorted(candidates.items(), key=lambda kv: (len(kv[1]), kv[1]))
    pivots: dict[int, int] = {}
    chosen: list[tuple[int, ...]] = []
    for mask, cycle in ordered:
        reduced = mask
        while reduced:
            top = reduced.bit_length() - 1
            if top not in pivots:
                break
            reduced ^= pivots[top]
        if reduced:
            pivots[reduced.bit_length() - 1] = reduced
            chosen.append(cycle)
            if len(chosen) == rank_needed:
                break
    return tuple(chosen)


def _normalize_cycle(cycle: Sequence[int]) -> tuple[int, ...]:
    k = min(range(len(cycle)), key=lambda i: cycle[i])
    rot = list(cycle[k:]) + list(cycle[:k])
    if len(rot) > 2 and rot[-1] < rot[1]:
        rot = [rot[0]] + rot[1:][::-1]
    return tuple(rot)


def molecular_weight(g: MolGraph) -> float:
    return sum(g.element(i).mass + HYDROGEN_MASS * g.implicit_hydrogens(i)
               for i in range(len(g.atoms)))


def explicit_valence(g: MolGraph, node: int) -> int:
    return g.explicit_valence(node)


def implicit_hydrogens(g: MolGraph, node: int) -> int:
    return g.implicit_hydrogens(node)


def bemis_murcko_scaffold(g: MolGraph) -> MolGraph:
    """Ring systems plus linkers; exocyclic double-bonded termini are kept.

    Acyclic molecules give the empty graph.
    """
    if not g.ring_atoms:
        return MolGraph()
    alive = set(range(len(g.atoms)))
    degree = [g.degree(i) for i in range(len(g.atoms))]
    queue = deque(i for i in alive if degree[i] <= 1 and i not in g.ring_atoms)
    while queue:
        i = queue.popleft()
        if i not in alive:
            continue
        alive.discard(i)
        for j in g.neighbors(i):
            if j in alive:
                degree[j] -= 1
                if degree[j] <= 1 and j not in g.ring_atoms:
                    queue.append(j)
    for i in range(len(g.atoms)):
        if i in alive or g.degree(i) != 1:
            continue
        (j, k), = g.adjacency[i]
        if j in alive and g.bonds[k].order >= 2:
            alive.add(i)
    return g.subgraph(alive)
