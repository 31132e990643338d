import numpy as np
import pytest

from atomgfn.mdp import MDPConfig, MolMDP
from atomgfn.reward import ConditioningContext, PropertyBounds, PropertyConditional

# Up to three heavy atoms from {C, O}, single/double bonds, no stereo.
TOY_MDP = MDPConfig(elements=("C", "O"), bond_orders=(1, 2), chirality=False, max_nodes=3)


def toy_context(dims=4, lo=28.0, hi=32.0, lam=8.0):
    cond = PropertyConditional("MolWt", lo, hi, 0, lam)
    return ConditioningContext((cond,), {"MolWt": PropertyBounds(10.0, 60.0, 0.0, 100.0)}, dims)


@pytest.fixture
def toy_mdp():
    return MolMDP(TOY_MDP)


@pytest.fixture
def toy_ctx():
    return toy_context()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
