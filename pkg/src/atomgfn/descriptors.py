"""Cheap molecular descriptors, circular fingerprints and Tanimoto similarity.

TPSA uses Ertl's fragment contributions (N, O, S, P). logP is a Wildman-Crippen
atom-typed sum restricted to neutral molecules over the nine-element vocabulary.
``qed_like`` and ``sas_like`` are simplified stand-ins, not QED/SAscore; use an
:class:`ExternalScoreTable` when the real values matter.
"""
from __future__ import annotations

import math
from itertools import combinations
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path

from .molgraph import MolGraph, molecular_weight
from .smiles import canonical_key, iter_smiles_lines, parse


class PropertyId(str, Enum):
    TPSA = "TPSA"
    QED = "QED"
    SAS = "SAS"
    NUM_RINGS = "NumRings"
    MOLWT = "MolWt"
    LOGP = "LogP"


# -- aromaticity ---------------------------------------------------------------

def _pi_electrons(g: MolGraph, i: int, ring: set[int]) -> int | None:
    """Electrons atom ``i`` donates to a ring, or None if it cannot be aromatic."""
    el = g.atoms[i].element
    in_ring_double = exo_double = 0
    for j, k in g.adjacency[i]:
        order = g.bonds[k].order
        if order == 3:
            return None
        if order == 2:
            if j in ring:
                in_ring_double += 1
            else:
                exo_double += 1
    if in_ring_double == 1:
        return 1
    if in_ring_double > 1:
        return None
    if exo_double:
        # exocyclic C=X on a ring carbon (pyridone-like) donates nothing
        if el == "C" and exo_double == 1:
            jk = next((j, k) for j, k in g.adjacency[i] if g.bonds[k].order == 2)
            return 0 if g.atoms[jk[0]].element in ("O", "N", "S") else None
        if el == "S":
            return None
        return None
    if el in ("N", "P", "O", "S") and g.explicit_valence(i) == g.degree(i):
        return 2  # lone pair, all bonds single
    return None


def _ring_is_aromatic(g: MolGraph, ring: tuple[int, ...]) -> bool:
    rs = set(ring)
    total = 0
    for i in ring:
        e = _pi_electrons(g, i, rs)
        if e is None:
            return False
        total += e
    return total % 4 == 2


def _fused_chain(sets, combo) -> bool:
    seen = [combo[0]]
    rest = list(combo[1:])
    while rest:
        nxt = next((c for c in rest if any(len(sets[c] & sets[s]) >= 2 for s in seen)), None)
        if nxt is None:
            return False
        seen.append(nxt)
        rest.remove(nxt)
    return True


@lru_cache(maxsize=4096)
def aromaticity(g: MolGraph) -> tuple[frozenset[int], frozenset[int]]:
    """(aromatic atoms, aromatic bond indices) by a Hückel 4n+2 rule.

    Single SSSR rings are tested first, then pairwise fused envelopes of rings
    sharing bonds (azulene- and anthracene-like systems).
    """
    rings = [r for r in g.sssr if len(r) <= 8]
    arom_rings = [r for r in rings if _ring_is_aromatic(g, r)]
    done = {frozenset(r) for r in arom_rings}
    # fused envelopes of two or three rings, each sharing a bond with the rest
    sets = [frozenset(r) for r in rings]
    for size in (2, 3):
        for combo in combinations(range(len(rings)), size):
            if all(sets[c] in done for c in combo):
                continue
            if not _fused_chain(sets, combo):
                continue
            envelope = tuple(sorted(frozenset().union(*(sets[c] for c in combo))))
            if _ring_is_aromatic(g, envelope):
                for c in combo:
                    if sets[c] not in done:
                        done.add(sets[c])
                        arom_rings.append(rings[c])
    atoms: set[int] = set()
    bonds: set[int] = set()
    for r in arom_rings:
        atoms.update(r)
        for x, y in zip(r, r[1:] + r[:1]):
            k = g.bond_between(x, y)
            if k is not None:
                bonds.add(k)
    return frozenset(atoms), frozenset(bonds)


# -- ring count ----------------------------------------------------------------

def ring_count(g: MolGraph, sizes: tuple[int, ...] | None = (5, 6)) -> int:
    """Number of SSSR rings whose size is in ``sizes`` (all rings if None)."""
    return sum(1 for r in g.sssr if sizes is None or len(r) in sizes)


# -- TPSA ------------------------------------------------------------------------

def _bond_pattern(g: MolGraph, i: int, arom_bonds: frozenset[int]) -> tuple[int, int, int, int]:
    """Counts of (single, double, triple, aromatic) bonds to heavy atoms."""
    s = d = t = a = 0
    for _, k in g.adjacency[i]:
        if k in arom_bonds:
            a += 1
        else:
            o = g.bonds[k].order
            s, d, t = s + (o == 1), d + (o == 2), t + (o == 3)
    return s, d, t, a


def _in_3_ring(g: MolGraph, i: int) -> bool:
    return any(len(r) == 3 and i in r for r in g.sssr)


def _tpsa_atom(g: MolGraph, i: int, arom_atoms, arom_bonds) -> float:
    el = g.atoms[i].element
    if el not in ("N", "O", "S", "P"):
        return 0.0
    h = g.implicit_hydrogens(i)
    pat = _bond_pattern(g, i, arom_bonds)
    deg = g.degree(i)
    if el == "N":
        if i in arom_atoms:
            table = {(0, 0, 0, 2, 0): 12.89, (0, 0, 0, 3, 0): 4.41, (1, 0, 0, 2, 0): 4.93,
                     (0, 1, 0, 2, 0): 8.39, (0, 0, 0, 2, 1): 15.79}
        else:
            table = {(3, 0, 0, 0, 0): 3.01 if _in_3_ring(g, i) else 3.24,
                     (1, 1, 0, 0, 0): 12.36, (0, 0, 1, 0, 0): 23.79,
                     (1, 2, 0, 0, 0): 11.68, (0, 1, 1, 0, 0): 13.60,
                     (2, 0, 0, 0, 1): 21.94 if _in_3_ring(g, i) else 12.03,
                     (0, 1, 0, 0, 1): 23.85, (1, 0, 0, 0, 2): 26.02}
        return table.get((*pat, h), 30.5 - 8.2 * deg + 1.5 * h)
    if el == "O":
        if i in arom_atoms:
            return 13.14 if pat == (0, 0, 0, 2) else 28.5 - 8.6 * deg + 1.5 * h
        table = {(2, 0, 0, 0, 0): 12.53 if _in_3_ring(g, i) else 9.23,
                 (0, 1, 0, 0, 0): 17.07, (1, 0, 0, 0, 1): 20.23}
        return table.get((*pat, h), 28.5 - 8.6 * deg + 1.5 * h)
    if el == "S":
        table = {(2, 0, 0, 0, 0): 25.30, (0, 1, 0, 0, 0): 32.09, (2, 1, 0, 0, 0): 19.21,
                 (2, 2, 0, 0, 0): 8.38, (1, 0, 0, 0, 1): 38.80,
                 (0, 0, 0, 2, 0): 28.24, (0, 1, 0, 2, 0): 21.70}
        return table.get((*pat, h), 0.0)
    table = {(3, 0, 0, 0, 0): 13.59, (1, 1, 0, 0, 0): 34.14, (3, 1, 0, 0, 0): 9.81,
             (2, 1, 0, 0, 1): 23.47}
    return table.get((*pat, h), 0.0)


def tpsa(g: MolGraph) -> float:
    """Topological polar surface area in square angstroms."""
    if not g.atoms:
        return 0.0
    arom_atoms, arom_bonds = aromaticity(g)
    return sum(_tpsa_atom(g, i, arom_atoms, arom_bonds) for i in range(len(g.atoms)))


# -- Crippen logP ---------------------------------------------------------------

_CRIPPEN = {
    "C1": 0.1441, "C2": 0.0, "C3": -0.2035, "C4": -0.2051, "C5": -0.2783, "C6": 0.1551,
    "C7": 0.00170, "C8": 0.08452, "C9": -0.1444, "C10": -0.0516, "C11": 0.1193,
    "C12": -0.0967, "C13": -0.5443, "C14": 0.0, "C15": 0.2450, "C16": 0.1980, "C17": 0.0,
    "C18": 0.1581, "C19": 0.2955, "C20": 0.2713, "C21": 0.1360, "C22": 0.4619,
    "C23": 0.5437, "C24": 0.1893, "C25": -0.8186, "C26": 0.2640, "CS": 0.08129,
    "H1": 0.1230, "H2": -0.2677, "H3": 0.2142, "H4": 0.2980, "HS": 0.1125,
    "N1": -1.0190, "N2": -0.7096, "N3": -1.0270, "N4": -0.5188, "N5": 0.08387,
    "N6": 0.1836, "N7": -0.3187, "N8": -0.4458, "N9": 0.01508, "N11": -0.3239,
    "NS": -0.4806,
    "O1": 0.1552, "O2": -0.2893, "O3": -0.0684, "O4": -0.4195, "O5": 0.0335,
    "O6": -0.3339, "O8": 0.1788, "O9": -0.1526, "O10": 0.1129, "O11": 0.4833,
    "OS": -0.1188,
    "F": 0.4202, "Cl": 0.6895, "Br": 0.8456, "I": 0.8857,
    "P": 0.8612, "S1": 0.6482, "S2": -0.0024, "S3": 0.6237,
}
_HETERO = frozenset("N O P S F Cl Br I".split())


class _Typer:
    def __init__(self, g: MolGraph):
        self.g = g
        self.arom, self.arom_bonds = aromaticity(g)

    def nbrs(self, i):
        """(neighbor, element, aromatic neighbor?, bond kind) with kind in 1/2/3/'a'."""
        out = []
        for j, k in self.g.adjacency[i]:
            kind = "a" if k in self.arom_bonds else self.g.bonds[k].order
            out.append((j, self.g.atoms[j].element, j in self.arom, kind))
        return out

    def carbon(self, i: int) -> str:
        g = self.g
        h = g.implicit_hydrogens(i)
        nb = self.nbrs(i)
        deg = len(nb)
        x = deg + h
        if i in self.arom:
            single = [(e, ar) for _, e, ar, kd in nb if kd == 1]
            double = [(e, ar) for _, e, ar, kd in nb if kd == 2]
            n_ar = sum(1 for *_, kd in nb if kd == "a")
            if h == 0 and any(e not in ("C", "N", "O", "S", "F", "Cl", "Br", "I") and not ar
                              for e, ar in single):
                return "C13"
            for el, t in (("F", "C14"), ("Cl", "C15"), ("Br", "C16"), ("I", "C17")):
                if any(e == el for _, e, _, _ in nb):
                    return t
            if h == 1:
                return "C18"
            if n_ar >= 3:
                return "C19"
            if n_ar >= 2:
                if any(ar for _, ar in single):
                    return "C20"
                if any(e == "C" for e, _ in single):
                    return "C21"
                if any(e == "N" for e, _ in single):
                    return "C22"
                if any(e == "O" for e, _ in single):
                    return "C23"
                if any(e == "S" for e, _ in single):
                    return "C24"
                if any(e in ("C", "N", "O") and not ar for e, ar in double):
                    return "C25"
            return "CS"
        al = [(e, ar, kd) for _, e, ar, kd in nb]
        single_al = [e for e, ar, kd in al if kd == 1 and not ar]
        has_arom_nb = any(ar for _, ar, _ in al)
        dbl = [(e, ar) for e, ar, kd in al if kd == 2]
        trip = [e for e, ar, kd in al if kd == 3]
        if x == 4 and deg == len(single_al) + sum(1 for _, ar, kd in al if ar and kd == 1):
            # sp3
            if h == 4:
                return "C1"
            all_c = all(e == "C" for e in single_al) and not has_arom_nb
            if h in (3, 2) and all_c and len(single_al) >= (1 if h == 3 else 2):
                return "C1"
            if h <= 1 and all_c:
                return "C2"
            het = any(e in _HETERO for e in single_al)
            if het:
                if h == 3:
                    return "C3"
                if h == 2 and len(single_al) >= 2:
                    return "C3"
                if h == 1 and len(single_al) >= 3:
                    return "C4"
                if h == 0 and len(single_al) >= 4:
                    return "C4"
            if has_arom_nb:
                if h == 3:
                    return "C8" if any(e == "C" and ar for e, ar, _ in al) else "C9"
                return {2: "C10", 1: "C11", 0: "C12"}[h]
            return "CS"
        if any(e != "C" and not ar for e, ar in dbl):
            return "C5"
        if dbl and all(e == "C" and not ar for e, ar in dbl):
            others = [(e, ar) for e, ar, kd in al if kd != 2]
            if len(dbl) == 2:
                return "C6"
            if not any(ar for _, ar in others):
                return "C6"
            return "C26"
        if dbl and any(ar for _, ar in dbl):
            return "C26"
        if trip and deg == 2:
            return "C7"
        if trip and deg == 1 and h == 1:
            return "C7"
        return "CS"

    def nitrogen(self, i: int) -> str:
        g = self.g
        if i in self.arom:
            return "N11"
        h = g.implicit_hydrogens(i)
        nb = self.nbrs(i)
        kinds = [kd for *_, kd in nb]
        n_ar_nb = sum(1 for _, _, ar, _ in nb if ar)
        if 3 in kinds:
            return "N9"
        if 2 in kinds:
            return "N5" if h == 1 else "N6"
        if h == 2:
            return "N3" if n_ar_nb else "N1"
        if h == 1:
            return "N4" if n_ar_nb else "N2"
        if h == 0 and len(nb) == 3:
            return "N8" if n_ar_nb else "N7"
        return "NS"

    def oxygen(self, i: int) -> str:
        g = self.g
        if i in self.arom:
            return "O1"
        h = g.implicit_hydrogens(i)
        if h >= 1:
            return "O2"
        nb = self.nbrs(i)
        if len(nb) == 2:
            return "O4" if any(ar for _, _, ar, _ in nb) else "O3"
        (j, e, ar, kd), = nb
        if kd != 2:
            return "OS"
        if e in ("N", "O"):
            return "O5"
        if e == "S":
            return "O6"
        if e != "C":
            return "OS"
        if ar:
            return "O8"
        cn = [(je, jar) for jj, je, jar, jkd in self.nbrs(j) if jj != i]
        ch = g.implicit_hydrogens(j)
        c_dbl = [kd for *_, kd in self.nbrs(j) if kd == 2]
        if len(c_dbl) == 2:
            return "O9" if any(je == "O" for je, _ in cn) else "OS"
        if ch == 2:
            return "O9"
        if ch == 1:
            (je, jar), = cn
            if je == "C" and jar:
                return "O10"
            if je in ("C", "N", "O") and not jar:
                return "O9"
            return "OS"
        if len(cn) == 2:
            (e1, a1), (e2, a2) = cn
            if any(e == "C" and not a for e, a in cn) and not (a1 and a2):
                if not (a1 or a2):
                    return "O9"
            if (a1 or a2) and any(e == "C" for e, _ in cn):
                return "O10"
            if e1 != "C" and e2 != "C":
                return "O11"
        return "OS"

    def hydrogen_type(self, i: int) -> str:
        el = self.g.atoms[i].element
        if el == "C":
            return "H1"
        if el == "O":
            (j, e, ar, kd), = self.nbrs(i) or [(None, None, False, None)]
            if e is None:
                return "HS"
            if e == "C" and (ar or (self.g.degree(j) + self.g.implicit_hydrogens(j) == 4
                                    and all(kd2 == 1 for *_, kd2 in self.nbrs(j)))):
                return "H2"
            if e not in ("C", "N", "O", "S"):
                return "H2"
            if e == "N":
                return "H3"
            if e in ("O", "S"):
                return "H4"
            if e == "C" and any(kd2 == 2 and e2 in ("C", "N", "O", "S")
                                for _, e2, _, kd2 in self.nbrs(j)):
                return "H4"
            return "HS"
        if el == "N":
            return "H3"
        return "H2"


def logp(g: MolGraph) -> float:
    """Wildman-Crippen octanol/water logP estimate."""
    if not g.atoms:
        return 0.0
    t = _Typer(g)
    total = 0.0
    for i, a in enumerate(g.atoms):
        el = a.element
        if el == "C":
            key = t.carbon(i)
        elif el == "N":
            key = t.nitrogen(i)
        elif el == "O":
            key = t.oxygen(i)
        elif el == "S":
            if i in t.arom:
                key = "S3"
            elif any(kd == 2 and e in ("N", "O", "P", "S") and not ar for _, e, ar, kd in t.nbrs(i)):
                key = "S2"
            else:
                key = "S1"
        else:
            key = el
        total += _CRIPPEN[key]
        h = g.implicit_hydrogens(i)
        if h:
            total += h * _CRIPPEN[t.hydrogen_type(i)]
    return total


# -- stand-ins for QED and SAscore ---------------------------------------------

def _ramp(x: float, lo0: float, lo1: float, hi1: float, hi0: float) -> float:
    """Trapezoid desirability: 1 on [lo1, hi1], linear to 0 at lo0 and hi0."""
    if lo1 <= x <= hi1:
        return 1.0
    if x < lo1:
        return max(0.0, (x - lo0) / (lo1 - lo0))
    return max(0.0, (hi0 - x) / (hi0 - hi1))


def qed_like(g: MolGraph) -> float:
    """Geometric mean of clipped desirability ramps; strictly inside (0, 1]."""
    if not g.atoms:
        return 0.01
    ds = (
        _ramp(molecular_weight(g), 0.0, 250.0, 450.0, 800.0),
        _ramp(logp(g), -3.0, 1.0, 3.5, 7.0),
        _ramp(tpsa(g), 0.0, 40.0, 90.0, 180.0),
        _ramp(float(ring_count(g, None)), -1.0, 1.0, 3.0, 7.0),
    )
    return math.exp(sum(math.log(min(1.0, max(d, 0.01))) for d in ds) / len(ds))


def sas_like(g: MolGraph) -> float:
    """Size and ring-complexity penalty squashed into [1, 10]."""
    n = len(g.atoms)
    rings = g.sssr
    counts: dict[int, int] = {}
    for r in rings:
        for i in r:
            counts[i] = counts.get(i, 0) + 1
    shared = sum(1 for c in counts.values() if c > 1)
    big = sum(1 for r in rings if len(r) > 8)
    chiral = sum(1 for a in g.atoms if a.chirality)
    x = (0.01 * n + 0.03 * max(0, n - 30) + 0.08 * shared + 0.3 * big
         + 0.05 * chiral + 0.1 * max(0, len(rings) - 4))
    return 1.0 + 9.0 * (1.0 - math.exp(-x))


# -- fingerprints ----------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _hash_ints(values) -> int:
    return fnv1a64(b"".join(int(v).to_bytes(8, "little", signed=False) for v in values))


@dataclass(frozen=True)
class Fingerprint:
    bits: int  # bit i set <=> feature folded to index i
    width: int = 2048
    radius: int = 2

    def __post_init__(self):
        if self.width <= 0 or self.width & (self.width - 1):
            raise ValueError(f"fingerprint width must be a power of two, got {self.width}")

    @property
    def count(self) -> int:
        return self.bits.bit_count()

    def on_bits(self) -> list[int]:
        return [i for i in range(self.width) if self.bits >> i & 1]


_ELEMENT_CODE = {e: n for n, e in enumerate(("C", "S", "P", "N", "O", "F", "Cl", "Br", "I"), 1)}


def fingerprint(g: MolGraph, radius: int = 2, width: int = 2048) -> Fingerprint:
    """Folded circular (Morgan-style) fingerprint, permutation invariant."""
    n = len(g.atoms)
    if n == 0:
        raise ValueError("cannot fingerprint an empty graph")
    ring = g.ring_atoms
    ids = [
        _hash_ints((_ELEMENT_CODE[a.element], g.degree(i), g.implicit_hydrogens(i),
                    i in ring, g.explicit_valence(i)))
        for i, a in enumerate(g.atoms)
    ]
    features = set(ids)
    for r in range(1, radius + 1):
        new = []
        for i in range(n):
            env = sorted((g.bonds[k].order, ids[j]) for j, k in g.adjacency[i])
            flat = [r, ids[i]] + [x for pair in env for x in pair]
            new.append(_hash_ints(flat))
        ids = new
        features.update(ids)
    bits = 0
    for f in features:
        bits |= 1 << (f % width)
    return Fingerprint(bits, width, radius)


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.width != b.width:
        raise ValueError(f"fingerprint widths differ: {a.width} vs {b.width}")
    union = (a.bits | b.bits).bit_count()
    if union == 0:
        raise ValueError("Tanimoto similarity of two empty fingerprints is undefined")
    return (a.bits & b.bits).bit_count() / union


# -- external score tables ------------------------------------------------------------

class ExternalScoreTable:
    """canonical key -> value, loaded from ``smiles<TAB>value`` lines."""

    def __init__(self, values: dict[str, float] | None = None, name: str = "external"):
        self.name = name
        self.values = dict(values or {})

    @classmethod
    def load(cls, path: str | Path, name: str | None = None) -> ExternalScoreTable:
        values: dict[str, float] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t") if "\t" in line else line.split()
                if len(parts) < 2:
                    raise ValueError(f"{path}:{lineno}: expected 'smiles<TAB>value'")
                values[canonical_key(parse(parts[0]))] = float(parts[1])
        return cls(values, name or Path(path).stem)

    def __len__(self) -> int:
        return len(self.values)

    def __contains__(self, g: MolGraph) -> bool:
        return canonical_key(g) in self.values

    def get(self, g: MolGraph) -> float:
        key = canonical_key(g)
        try:
            return self.values[key]
        except KeyError:
            raise KeyError(f"{self.name}: no score for {key}") from None


def compute(prop: PropertyId | str, g: MolGraph,
            tables: dict[str, ExternalScoreTable] | None = None,
            ring_sizes: tuple[int, ...] | None = (5, 6)) -> float:
    """Evaluate a property by id; external tables override built-in stand-ins."""
    name = prop.value if isinstance(prop, PropertyId) else str(prop)
    if tables and name in tables:
        return tables[name].get(g)
    if name == PropertyId.TPSA.value:
        return tpsa(g)
    if name == PropertyId.QED.value:
        return qed_like(g)
    if name == PropertyId.SAS.value:
        return sas_like(g)
    if name == PropertyId.NUM_RINGS.value:
        return float(ring_count(g, ring_sizes))
    if name == PropertyId.MOLWT.value:
        return molecular_weight(g)
    if name == PropertyId.LOGP.value:
        return logp(g)
    raise KeyError(f"unknown property {name!r} and no external table provides it")


def load_iter(path: str | Path):
    """Yield parsed molecules from a SMILES file (used for novelty references)."""
    for _, smi in iter_smiles_lines(path):
        yield parse(smi)
