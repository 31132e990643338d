import itertools
from importlib.resources import files

import networkx as nx
import numpy as np
import pytest

from atomgfn.mdp import MDPConfig, MolMDP
from atomgfn.molgraph import Atom, MolGraph, molecular_weight
from atomgfn.smiles import (KekulizeError, SmilesError, canonical_key, parse, read_dataset,
                            state_key, write)

CORPUS = files("atomgfn") / "data" / "corpus_1000.smi"


def to_nx(g):
    G = nx.Graph()
    for i, a in enumerate(g.atoms):
        G.add_node(i, el=a.element)
    for b in g.bonds:
        G.add_edge(b.u, b.v, order=b.order)
    return G


def isomorphic(g, h):
    return nx.is_isomorphic(to_nx(g), to_nx(h), node_match=lambda a, b: a["el"] == b["el"],
                            edge_match=lambda a, b: a["order"] == b["order"])


def test_parse_examples():
    g = parse("CC")
    assert [a.element for a in g.atoms] == ["C", "C"] and [b.order for b in g.bonds] == [1]
    g = parse("C1CC1")
    assert len(g.atoms) == 3 and sorted(b.order for b in g.bonds) == [1, 1, 1]


def kekule_structures(n):
    """All perfect matchings of an n-cycle, by exhaustive search."""
    edges = [(i, (i + 1) % n) for i in range(n)]
    out = []
    for chosen in itertools.combinations(range(n), n // 2):
        atoms = [x for k in chosen for x in edges[k]]
        if len(set(atoms)) == n:
            out.append(frozenset(tuple(sorted(edges[k])) for k in chosen))
    return out


def test_benzene_kekulized_to_a_perfect_matching():
    g = parse("c1ccccc1")
    doubles = frozenset((b.u, b.v) for b in g.bonds if b.order == 2)
    assert doubles in kekule_structures(6)
    assert all(b.order in (1, 2) for b in g.bonds)


@pytest.mark.parametrize("smi", ["c1ccc2ccccc2c1", "c1ccncc1", "c1cc[nH]c1", "c1ccoc1",
                                 "c1ccsc1", "Cn1cnc2c1c(=O)n(C)c(=O)n2C"])
def test_aromatic_atoms_get_valid_orders(smi):
    g = parse(smi)
    g.validate()
    for i in range(len(g.atoms)):
        assert g.implicit_hydrogens(i) >= 0
    assert sum(b.order == 2 for b in g.bonds) >= 1


@pytest.mark.parametrize("bad", ["c1cccc1", "c1ccccc"])
def test_kekulization_failure_is_loud(bad):
    with pytest.raises(SmilesError):
        parse(bad)


def test_five_ring_without_donor_fails_kekulize():
    with pytest.raises(KekulizeError):
        parse("c1cccc1")


@pytest.mark.parametrize("bad", ["C.C", "[NH4+]", "C/C=C/C", "[13CH4]", "*C", "CX", "C(", "C1CC",
                                 "B", "[Si]", "C)C", ""])
def test_rejects_unsupported_input(bad):
    with pytest.raises(SmilesError):
        parse(bad)


def test_syntax_errors_report_position():
    with pytest.raises(SmilesError, match="position 4"):
        parse("CC(C")
    with pytest.raises(SmilesError, match="'X' at position 1"):
        parse("CX")


def test_ring_closure_percent_labels_and_brackets():
    g = parse("C%10CC%10")
    assert len(g.atoms) == 3 and len(g.bonds) == 3
    g = parse("[C@@H](N)(O)C")
    assert g.atoms[0].chirality is not None
    assert parse("[Cl]C").atoms[0].element == "Cl"
    assert {a.element for a in parse("BrCCl").atoms} == {"Br", "C", "Cl"}


def test_write_examples():
    assert write(MolGraph((Atom("C"),))) == "C"
    benzene = parse("c1ccccc1")
    s = write(benzene)
    assert s.islower() is False and isomorphic(parse(s), benzene)
    assert molecular_weight(parse(write(parse("CCO")))) == pytest.approx(46.069)


def test_write_rejects_empty_graph():
    with pytest.raises(ValueError):
        write(MolGraph())


def test_canonical_key_examples():
    assert canonical_key(parse("CCO")) == canonical_key(parse("OCC"))
    assert canonical_key(parse("CC")) != canonical_key(parse("C=C"))
    assert canonical_key(parse("C[C@H](N)O")) == canonical_key(parse("C[C@@H](N)O"))


def test_canonical_key_invariant_under_permutation():
    g = parse("CC(=O)Nc1ccc(O)cc1C")  # 12 heavy atoms
    assert len(g.atoms) == 12
    rng = np.random.default_rng(0)
    keys = {canonical_key(g.permute(list(rng.permutation(12)))) for _ in range(120)}
    assert keys == {canonical_key(g)}


def test_canonical_key_agrees_with_isomorphism_oracle():
    # equal keys <=> isomorphic, checked pairwise on random small molecules
    mdp = MolMDP(MDPConfig(elements=("C", "N", "O"), bond_orders=(1, 2), chirality=False,
                           max_nodes=5))
    rng = np.random.default_rng(7)
    mols = [mdp.random_trajectory(rng).final for _ in range(150)]
    keys = [canonical_key(m) for m in mols]
    for i, j in itertools.combinations(range(len(mols)), 2):
        assert (keys[i] == keys[j]) == isomorphic(mols[i], mols[j])


def test_symmetric_ring_systems_canonicalize():
    for smi in ["C1CC2CCC1CC2", "c1ccc2ccccc2c1", "C12C3C4C1C5C2C3C45"]:
        g = parse(smi)
        rng = np.random.default_rng(1)
        n = len(g.atoms)
        assert {canonical_key(g.permute(list(rng.permutation(n)))) for _ in range(30)} \
            == {canonical_key(g)}


def test_state_key_keeps_stereo_and_frozen_marks():
    a, b = parse("C[C@H](N)O"), parse("CC(N)O")
    assert state_key(a) != state_key(b)
    assert state_key(b, frozenset({0})) != state_key(b, frozenset({1}))


def test_corpus_round_trip():
    rep = read_dataset(CORPUS, strict=True)
    assert rep.n_lines == 1000 and len(rep.molecules) == 1000
    for g in rep.molecules:
        s = write(g)
        assert canonical_key(parse(s)) == canonical_key(g)


def test_dataset_ingestion_counts_bad_lines(tmp_path):
    p = tmp_path / "d.smi"
    p.write_text("# header\nCCO extra columns\n\nC.C\n[Na+]\nc1ccccc1\tbenzene\n")
    rep = read_dataset(p)
    assert rep.n_lines == 4 and rep.n_skipped == 2 and len(rep.molecules) == 2
    assert [ln for ln, _ in rep.errors] == [4, 5]
    with pytest.raises(SmilesError, match=":4:"):
        read_dataset(p, strict=True)
