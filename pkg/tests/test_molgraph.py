import itertools

import networkx as nx
import numpy as np
import pytest

from atomgfn.molgraph import (Atom, Bond, MolGraph, ValenceError, bemis_murcko_scaffold,
                              explicit_valence, implicit_hydrogens, molecular_weight)
from atomgfn.smiles import canonical_key, parse


def chain(n, element="C"):
    return MolGraph(tuple(Atom(element) for _ in range(n)),
                    tuple(Bond(i, i + 1, 1) for i in range(n - 1)))


def test_explicit_valence_examples():
    assert explicit_valence(chain(2), 0) == 1
    assert explicit_valence(MolGraph((Atom("C"),)), 0) == 0
    acetone = parse("CC(=O)C")
    centre = next(i for i in range(4) if acetone.degree(i) == 3)
    assert explicit_valence(acetone, centre) == 4


def test_unset_bonds_count_zero():
    g = MolGraph((Atom("C"), Atom("C")), (Bond(0, 1),))
    assert g.explicit_valence(0) == 0
    assert g.implicit_hydrogens(0) == 4
    assert g.spare_valence(0) == 3  # the unset bond still reserves one unit


def test_implicit_hydrogens_examples():
    assert implicit_hydrogens(MolGraph((Atom("C"),)), 0) == 4
    assert implicit_hydrogens(MolGraph((Atom("O"),)), 0) == 2
    amine = MolGraph((Atom("C"), Atom("N"), Atom("C")), ((0, 1, 1), (1, 2, 1)))
    assert implicit_hydrogens(amine, 1) == 1


def test_hypervalent_sulfur_uses_next_valence():
    # S with three single bonds: smallest allowed valence >= 3 is 4
    g = MolGraph((Atom("S"), Atom("C"), Atom("C"), Atom("C")),
                 ((0, 1, 1), (0, 2, 1), (0, 3, 1)))
    assert g.implicit_hydrogens(0) == 1


def test_valence_overflow_is_an_error():
    g = MolGraph((Atom("F"), Atom("C"), Atom("C")), ((0, 1, 1), (0, 2, 1)))
    with pytest.raises(ValenceError):
        g.implicit_hydrogens(0)
    with pytest.raises(ValenceError):
        g.validate()


def test_molecular_weight_examples():
    assert molecular_weight(MolGraph()) == 0.0
    assert molecular_weight(MolGraph((Atom("C"),))) == pytest.approx(12.011 + 4 * 1.008, abs=1e-9)
    assert molecular_weight(parse("CCO")) == pytest.approx(46.069, abs=1e-9)


def test_molecular_weight_additive_over_fragments():
    a, b = parse("CCO"), parse("c1ccccc1")
    n = len(a.atoms)
    joined = MolGraph(a.atoms + b.atoms,
                      a.bonds + tuple(Bond(x.u + n, x.v + n, x.order) for x in b.bonds))
    assert molecular_weight(joined) == pytest.approx(molecular_weight(a) + molecular_weight(b))


def test_validate_rejects_structural_violations():
    with pytest.raises(ValueError, match="disconnected"):
        MolGraph((Atom("C"), Atom("C"))).validate()
    with pytest.raises(ValueError, match="self-loop"):
        MolGraph((Atom("C"),), ((0, 0, 1),)).validate()
    with pytest.raises(ValueError, match="duplicate"):
        MolGraph((Atom("C"), Atom("C")), ((0, 1, 1), (1, 0, 1))).validate()
    with pytest.raises(ValueError, match="max_nodes"):
        chain(46).validate()
    with pytest.raises(ValueError, match="element"):
        MolGraph((Atom("Xe"),)).validate()


def test_scaffold_examples():
    benzene = parse("c1ccccc1")
    assert canonical_key(bemis_murcko_scaffold(benzene)) == canonical_key(benzene)
    assert canonical_key(bemis_murcko_scaffold(parse("Cc1ccccc1"))) == canonical_key(benzene)
    assert bemis_murcko_scaffold(parse("CCCCCC")).atoms == ()


def test_scaffold_keeps_linkers_and_exocyclic_double_bonds():
    sc = bemis_murcko_scaffold(parse("CCc1ccc(CCc2ccccc2)cc1"))
    assert canonical_key(sc) == canonical_key(parse("c1ccc(CCc2ccccc2)cc1"))
    sc = bemis_murcko_scaffold(parse("CC1CCC(=O)CC1"))
    assert canonical_key(sc) == canonical_key(parse("O=C1CCCCC1"))


def test_scaffold_idempotent():
    for smi in ["Cc1ccccc1", "CCc1ccc(CCc2ccccc2)cc1", "O=C1CCCCC1CC", "CC1CC1C"]:
        s1 = bemis_murcko_scaffold(parse(smi))
        assert canonical_key(bemis_murcko_scaffold(s1)) == canonical_key(s1)


def _to_nx(g):
    G = nx.Graph()
    G.add_nodes_from(range(len(g.atoms)))
    G.add_edges_from((b.u, b.v) for b in g.bonds)
    return G


@pytest.mark.parametrize("smi", ["c1ccccc1", "c1ccc2ccccc2c1", "C1CC2CCC1C2", "C1CC1CC1CCC1",
                                 "c1ccc2c(c1)ccc1ccccc12", "CCO"])
def test_sssr_matches_cycle_basis_size(smi):
    g = parse(smi)
    G = _to_nx(g)
    basis = nx.minimum_cycle_basis(G)
    assert len(g.sssr) == len(basis)
    assert sorted(len(r) for r in g.sssr) == sorted(len(c) for c in basis)
    ring_atoms = {i for c in nx.cycle_basis(G) for i in c}
    assert g.ring_atoms == ring_atoms


def test_connectivity_matches_networkx():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 8))
        pairs = [p for p in itertools.combinations(range(n), 2) if rng.random() < 0.3]
        g = MolGraph(tuple(Atom("C") for _ in range(n)), tuple((u, v, 1) for u, v in pairs))
        G = nx.Graph()
        G.add_nodes_from(range(n))
        G.add_edges_from(pairs)
        assert g.is_connected() == nx.is_connected(G)
        bridges = {tuple(sorted(e)) for e in nx.bridges(G)}
        for k, b in enumerate(g.bonds):
            assert g.stays_connected_without_bond(k) == ((b.u, b.v) not in bridges)


def test_permute_preserves_structure():
    g = parse("CC(=O)Nc1ccccc1")
    perm = list(np.random.default_rng(3).permutation(len(g.atoms)))
    h = g.permute(perm)
    assert nx.is_isomorphic(_to_nx(g), _to_nx(h))
    assert molecular_weight(h) == pytest.approx(molecular_weight(g))
    assert canonical_key(h) == canonical_key(g)
