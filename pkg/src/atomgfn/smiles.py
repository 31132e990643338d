"""SMILES subset reader/writer and canonical keys.

Supported: organic-subset atoms and bracket atoms of the nine-element
vocabulary, aromatic ``c n o s``, bonds ``- = # :``, branches, ring
closures (digits and ``%nn``). Charges, isotopes, stereo bonds, wildcards
and dotted multi-fragment inputs are rejected.
"""
from __future__ import annotations

import logging
import re
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

from .molgraph import ELEMENTS, Atom, Bond, MolGraph, ValenceError

log = logging.getLogger(__name__)

_AROMATIC = {"c": "C", "n": "N", "o": "O", "s": "S"}
_BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3, ":": "ar"}
_BRACKET = re.compile(
    r"\[(?P<iso>\d+)?(?P<sym>Cl|Br|[A-Z][a-z]?|[a-z][a-z]?)(?P<chiral>@@|@)?"
    r"(?P<h>H\d*)?(?P<charge>[+-]+\d*)?(?P<cls>:\d+)?\]"
)
_WRITE_ORDER = {0: "~", 1: "", 2: "=", 3: "#"}
_CHIRAL_OUT = {"S": "@", "R": "@@"}
_CHIRAL_IN = {"@": "S", "@@": "R"}


class SmilesError(ValueError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class KekulizeError(SmilesError):
    pass


@dataclass
class _PAtom:
    element: str
    aromatic: bool
    hcount: int | None  # bracket atoms only
    chirality: str | None
    pos: int


@dataclass
class _PBond:
    u: int
    v: int
    symbol: int | str | None  # None = implicit
    pos: int


@dataclass
class _Parsed:
    atoms: list[_PAtom] = field(default_factory=list)
    bonds: list[_PBond] = field(default_factory=list)


def _tokenize_and_build(s: str) -> _Parsed:
    out = _Parsed()
    stack: list[int] = []
    prev: int | None = None
    pending_bond: int | str | None = None
    pending_pos = 0
    rings: dict[int, tuple[int, int | str | None, int]] = {}
    pairs: set[tuple[int, int]] = set()
    i, n = 0, len(s)

    def add_bond(u, v, symbol, pos):
        key = (min(u, v), max(u, v))
        if u == v:
            raise SmilesError("ring closure onto the same atom", pos)
        if key in pairs:
            raise SmilesError("duplicate bond", pos)
        pairs.add(key)
        out.bonds.append(_PBond(u, v, symbol, pos))

    def add_atom(atom: _PAtom):
        nonlocal prev, pending_bond
        out.atoms.append(atom)
        idx = len(out.atoms) - 1
        if prev is not None:
            add_bond(prev, idx, pending_bond, atom.pos)
        elif pending_bond is not None:
            raise SmilesError("bond symbol without a preceding atom", pending_pos)
        pending_bond = None
        prev = idx

    while i < n:
        ch = s[i]
        if ch == "[":
            m = _BRACKET.match(s, i)
            if not m:
                raise SmilesError(f"malformed bracket atom {s[i:s.find(']', i) + 1]!r}", i)
            if m["iso"]:
                raise SmilesError(f"isotopes are not supported: {m.group(0)!r}", i)
            if m["charge"]:
                raise SmilesError(f"charges are not supported: {m.group(0)!r}", i)
            if m["cls"]:
                raise SmilesError(f"atom classes are not supported: {m.group(0)!r}", i)
            sym = m["sym"]
            aromatic = sym in _AROMATIC
            element = _AROMATIC.get(sym, sym)
            if element not in ELEMENTS:
                raise SmilesError(f"unsupported element {sym!r}", i)
            h = m["h"]
            hcount = 0 if not h else (int(h[1:]) if len(h) > 1 else 1)
            chir = _CHIRAL_IN.get(m["chiral"]) if m["chiral"] else None
            add_atom(_PAtom(element, aromatic, hcount, chir, i))
            i = m.end()
            continue
        if ch.isalpha():
            two = s[i:i + 2]
            if two in ("Cl", "Br"):
                add_atom(_PAtom(two, False, None, None, i))
                i += 2
                continue
            if ch in "CNOSPFI":
                add_atom(_PAtom(ch, False, None, None, i))
            elif ch in _AROMATIC:
                add_atom(_PAtom(_AROMATIC[ch], True, None, None, i))
            else:
                raise SmilesError(f"unsupported atom {ch!r}", i)
            i += 1
            continue
        if ch == "*":
            raise SmilesError("wildcard atoms are not supported", i)
        if ch in _BOND_SYMBOLS:
            if pending_bond is not None:
                raise SmilesError("two consecutive bond symbols", i)
            pending_bond, pending_pos = _BOND_SYMBOLS[ch], i
            i += 1
            continue
        if ch in "/\\":
            raise SmilesError(f"stereo bonds are not supported: {ch!r}", i)
        if ch == ".":
            raise SmilesError("multi-fragment SMILES are not supported", i)
        if ch == "(":
            if prev is None:
                raise SmilesError("branch without a preceding atom", i)
            stack.append(prev)
            i += 1
            continue
        if ch == ")":
            if not stack:
                raise SmilesError("unbalanced ')'", i)
            if pending_bond is not None:
                raise SmilesError("dangling bond before ')'", i)
            prev = stack.pop()
            i += 1
            continue
        if ch.isdigit() or ch == "%":
            if ch == "%":
                if not s[i + 1:i + 3].isdigit() or len(s[i + 1:i + 3]) != 2:
                    raise SmilesError("'%' must be followed by two digits", i)
                num, width = int(s[i + 1:i + 3]), 3
            else:
                num, width = int(ch), 1
            if prev is None:
                raise SmilesError("ring closure without a preceding atom", i)
            if num in rings:
                other, sym, pos = rings.pop(num)
                if sym is not None and pending_bond is not None and sym != pending_bond:
                    raise SmilesError("conflicting ring-closure bond symbols", i)
                add_bond(other, prev, pending_bond if pending_bond is not None else sym, i)
            else:
                rings[num] = (prev, pending_bond, i)
            pending_bond = None
            i += width
            continue
        if ch.isspace():
            raise SmilesError("unexpected whitespace", i)
        raise SmilesError(f"unexpected character {ch!r}", i)

    if pending_bond is not None:
        raise SmilesError("dangling bond at end of input", pending_pos)
    if stack:
        raise SmilesError("unbalanced '('", len(s))
    if rings:
        num, (_, _, pos) = next(iter(rings.items()))
        raise SmilesError(f"unclosed ring bond {num}", pos)
    if not out.atoms:
        raise SmilesError("empty SMILES", 0)
    return out


def parse(s: str) -> MolGraph:
    """Parse a SMILES string into a kekulized, connected MolGraph."""
    s = s.strip()
    p = _tokenize_and_build(s)
    atoms = p.atoms
    # Implicit bonds between aromatic atoms are aromatic, unless they turn out
    # not to be ring bonds (e.g. the biaryl link in c1ccccc1c1ccccc1).
    orders: list[int] = []
    aromatic_bond: list[bool] = []
    for b in p.bonds:
        both_ar = atoms[b.u].aromatic and atoms[b.v].aromatic
        if b.symbol == "ar" or (b.symbol is None and both_ar):
            if not both_ar:
                raise SmilesError("aromatic bond between non-aromatic atoms", b.pos)
            orders.append(1)
            aromatic_bond.append(True)
        else:
            orders.append(1 if b.symbol is None else b.symbol)
            aromatic_bond.append(False)
    skeleton = MolGraph(tuple(Atom(a.element) for a in atoms),
                        tuple(Bond(b.u, b.v, 1) for b in p.bonds))
    if not skeleton.is_connected():
        raise SmilesError("disconnected structure")
    ring = skeleton.ring_bonds
    for k, b in enumerate(p.bonds):
        if aromatic_bond[k] and k not in ring:
            if b.symbol == "ar":
                raise KekulizeError("aromatic bond outside a ring", b.pos)
            aromatic_bond[k] = False
    for idx, a in enumerate(atoms):
        if a.aromatic and not any(aromatic_bond[k] for _, k in skeleton.adjacency[idx]):
            raise KekulizeError("aromatic atom outside an aromatic ring", a.pos)

    orders = _kekulize(atoms, p.bonds, orders, aromatic_bond, skeleton)
    g = MolGraph(tuple(Atom(a.element, a.chirality) for a in atoms),
                 tuple(Bond(b.u, b.v, o) for b, o in zip(p.bonds, orders)))
    for idx, a in enumerate(atoms):
        try:
            h = g.implicit_hydrogens(idx)
        except ValenceError as e:
            raise SmilesError(f"valence violation on {a.element}: {e}", a.pos) from None
        if a.hcount is not None and a.hcount != h:
            raise SmilesError(
                f"bracket atom declares {a.hcount} H but valence model gives {h}", a.pos)
    try:
        g.validate(max_nodes=10 ** 6, max_edges=10 ** 6)
    except ValueError as e:
        raise SmilesError(str(e)) from None
    return g


def _kekulize(atoms, bonds, orders, aromatic_bond, skeleton) -> list[int]:
    if not any(aromatic_bond):
        return orders
    need = []
    for idx, a in enumerate(atoms):
        if not a.aromatic:
            need.append(False)
            continue
        nonar = sum(orders[k] for _, k in skeleton.adjacency[idx] if not aromatic_bond[k])
        n_ar = sum(1 for _, k in skeleton.adjacency[idx] if aromatic_bond[k])
        has_double = any(orders[k] >= 2 for _, k in skeleton.adjacency[idx] if not aromatic_bond[k])
        if a.hcount is not None:
            used = nonar + n_ar + a.hcount
            target = next((v for v in sorted(ELEMENTS[a.element].valences) if v >= used), None)
            need.append(target is not None and target - used == 1 and not has_double)
        elif a.element == "C":
            need.append(not has_double and nonar + n_ar <= 3)
        elif a.element == "N":
            need.append(not has_double and nonar + n_ar == 2)
        else:
            need.append(False)
    # Backtracking perfect matching over atoms that need one double bond.
    ar_adj: dict[int, list[tuple[int, int]]] = {i: [] for i, f in enumerate(need) if f}
    for k, b in enumerate(bonds):
        if aromatic_bond[k] and need[b.u] and need[b.v]:
            ar_adj[b.u].append((b.v, k))
            ar_adj[b.v].append((b.u, k))
    for lst in ar_adj.values():
        lst.sort()
    mate: dict[int, int] = {}

    def solve() -> bool:
        free = [i for i in ar_adj if i not in mate]
        if not free:
            return True
        # most constrained first keeps the search shallow
        i = min(free, key=lambda x: (sum(1 for j, _ in ar_adj[x] if j not in mate), x))
        for j, k in ar_adj[i]:
            if j in mate:
                continue
            mate[i], mate[j] = k, k
            if solve():
                return True
            del mate[i], mate[j]
        return False

    if not solve():
        bad = next(i for i in ar_adj if i not in mate) if ar_adj else 0
        raise KekulizeError("cannot kekulize aromatic system", atoms[bad].pos)
    out = list(orders)
    for k in set(mate.values()):
        out[k] = 2
    return out


# -- writing ------------------------------------------------------------------

def _atom_token(g: MolGraph, i: int, chirality: bool, marks=None) -> str:
    a = g.atoms[i]
    if marks is not None:
        return f"[{a.element}{marks[i]}]" if marks[i] else a.element
    if chirality and a.chirality is not None:
        h = g.implicit_hydrogens(i)
        hs = "" if h == 0 else ("H" if h == 1 else f"H{h}")
        return f"[{a.element}{_CHIRAL_OUT[a.chirality]}{hs}]"
    return a.element


def _emit(g: MolGraph, rank: list[int], chirality: bool = True, marks=None) -> str:
    n = len(g.atoms)
    order = lambda i: sorted(g.adjacency[i], key=lambda jk: rank[jk[0]])  # noqa: E731
    start = min(range(n), key=lambda i: rank[i])
    # pass 1: spanning tree in rank order, collect ring-closure bonds
    visited = [False] * n
    tree_children: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    closures: list[list[tuple[int, int]]] = [[] for _ in range(n)]  # (bond, other)
    seen_bonds: set[int] = set()
    visit_order: list[int] = []

    def dfs(i: int):
        visited[i] = True
        visit_order.append(i)
        for j, k in order(i):
            if k in seen_bonds:
                continue
            seen_bonds.add(k)
            if visited[j]:
                closures[j].append((k, i))
                closures[i].append((k, j))
            else:
                tree_children[i].append((j, k))
                dfs(j)

    if n > 200:
        sys.setrecursionlimit(max(sys.getrecursionlimit(), 4 * n))
    dfs(start)
    position = {a: p for p, a in enumerate(visit_order)}
    # pass 2: emit, allocating the lowest free ring digit
    digits: dict[int, int] = {}
    free: list[int] = []
    next_digit = [1]
    parts: list[str] = []

    def ring_label(d: int) -> str:
        return str(d) if d < 10 else f"%{d:02d}"

    def write(i: int):
        parts.append(_atom_token(g, i, chirality, marks))
        for k, j in sorted(closures[i], key=lambda kj: (position[kj[1]], kj[0])):
            if k in digits:
                d = digits.pop(k)
                parts.append(ring_label(d))
                free.append(d)
                free.sort()
            else:
                if free:
                    d = free.pop(0)
                else:
                    d = next_digit[0]
                    next_digit[0] += 1
                digits[k] = d
                parts.append(_WRITE_ORDER[g.bonds[k].order] + ring_label(d))
        kids = tree_children[i]
        for c, (j, k) in enumerate(kids):
            last = c == len(kids) - 1
            if not last:
                parts.append("(")
            parts.append(_WRITE_ORDER[g.bonds[k].order])
            write(j)
            if not last:
                parts.append(")")

    write(start)
    return "".join(parts)


def write(g: MolGraph) -> str:
    """Kekulized SMILES for a nonempty graph with every bond order set."""
    if len(g.atoms) == 0:
        raise ValueError("cannot write an empty graph")
    if any(b.order == 0 for b in g.bonds):
        raise ValueError("cannot write a graph with unset bond orders")
    if not g.is_connected():
        raise ValueError("cannot write a disconnected graph")
    return _emit(g, list(range(len(g.atoms))))


# -- canonicalization ---------------------------------------------------------

def _initial_colors(g: MolGraph, marks=None) -> list[int]:
    ring = g.ring_atoms
    inv = [
        (a.element, g.degree(i), g.explicit_valence(i), i in ring, g.implicit_hydrogens(i),
         marks[i] if marks else "")
        for i, a in enumerate(g.atoms)
    ]
    return _rank(inv)


def _rank(keys: list) -> list[int]:
    uniq = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [uniq[k] for k in keys]


def _refine(g: MolGraph, colors: list[int]) -> list[int]:
    adj = [[(j, g.bonds[k].order) for j, k in g.adjacency[i]] for i in range(len(g.atoms))]
    n_classes = len(set(colors))
    while True:
        sig = [(colors[i], tuple(sorted((colors[j], o) for j, o in adj[i])))
               for i in range(len(colors))]
        new = _rank(sig)
        m = len(set(new))
        if m == n_classes:
            return new
        colors, n_classes = new, m


def canonical_ranks(g: MolGraph) -> list[int]:
    """Stable refined atom classes (automorphic atoms share a class)."""
    if not g.atoms:
        return []
    return _refine(g, _initial_colors(g))


def _search(g: MolGraph, colors: list[int], tree: bool, marks=None) -> str:
    n = len(colors)
    if len(set(colors)) == n:
        return _emit(g, colors, chirality=False, marks=marks)
    counts: dict[int, int] = {}
    for c in colors:
        counts[c] = counts.get(c, 0) + 1
    target = min(c for c, k in counts.items() if k > 1)
    cell = [i for i in range(n) if colors[i] == target]
    if tree:
        # color refinement classes are orbits on trees: one branch suffices
        cell = cell[:1]
    best = None
    for v in cell:
        split = _rank([(colors[i], 0 if i == v else 1) for i in range(n)])
        cand = _search(g, _refine(g, split), tree, marks)
        if best is None or cand < best:
            best = cand
    return best


def canonical_key(g: MolGraph) -> str:
    """Canonical SMILES without stereo tags; equal for isomorphic graphs.

    Partially built graphs are accepted: unset bond orders are written ``~``.
    """
    if not g.atoms:
        return ""
    return _search(g, canonical_ranks(g), not g.ring_bonds)


@lru_cache(maxsize=1 << 16)
def state_key(g: MolGraph, frozen: frozenset[int] = frozenset()) -> str:
    """Isomorphism key that, unlike canonical_key, keeps chirality tags and
    marks frozen atoms. Used to merge actions that lead to the same state."""
    if not g.atoms:
        return ""
    marks = [(a.chirality or "") + ("*" if i in frozen else "") for i, a in enumerate(g.atoms)]
    if not any(marks):
        return canonical_key(g)
    colors = _refine(g, _initial_colors(g, marks))
    return _search(g, colors, not g.ring_bonds, marks)


# -- dataset ingestion --------------------------------------------------------

@dataclass
class IngestReport:
    molecules: list[MolGraph]
    smiles: list[str]
    n_lines: int = 0
    n_skipped: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)


def iter_smiles_lines(path: str | Path) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()[0]


def read_dataset(path: str | Path, strict: bool = False, max_nodes: int | None = None,
                 max_edges: int | None = None) -> IngestReport:
    """Read one SMILES per line; malformed lines are counted, or raise if strict."""
    rep = IngestReport([], [])
    for lineno, smi in iter_smiles_lines(path):
        rep.n_lines += 1
        try:
            g = parse(smi)
            if max_nodes is not None and len(g.atoms) > max_nodes:
                raise SmilesError(f"{len(g.atoms)} atoms exceeds cap {max_nodes}")
            if max_edges is not None and len(g.bonds) > max_edges:
                raise SmilesError(f"{len(g.bonds)} bonds exceeds cap {max_edges}")
        except SmilesError as e:
            if strict:
                raise SmilesError(f"{path}:{lineno}: {e}") from None
            rep.n_skipped += 1
            rep.errors.append((lineno, str(e)))
            continue
        rep.molecules.append(g)
        rep.smiles.append(smi)
    if rep.n_skipped:
        log.info("skipped %d of %d lines in %s", rep.n_skipped, rep.n_lines, path)
    return rep
