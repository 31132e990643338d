"""Grow molecules around a fixed scaffold.

The scaffold becomes the initial state and its atoms and bonds are frozen:
no backward action may remove them and no forward action may change them.
Even an untrained policy therefore returns molecules containing the core.

    python3 demos/scaffold_sampling.py [smiles] [n]
"""
import sys

import numpy as np

from atomgfn.descriptors import compute
from atomgfn.mdp import MolMDP
from atomgfn.policy import GraphPolicy, PolicyConfig
from atomgfn.reward import pretraining_context
from atomgfn.smiles import parse, write
from atomgfn.trainer import sample_molecules

scaffold = parse(sys.argv[1] if len(sys.argv) > 1 else "c1ccncc1")
n = int(sys.argv[2]) if len(sys.argv) > 2 else 20

mdp = MolMDP(seed=scaffold)
ctx = pretraining_context()
policy = GraphPolicy(mdp.config, ctx.encoding_size, PolicyConfig(), seed=0)
mols = sample_molecules(policy, policy.params, mdp, ctx, n, np.random.default_rng(0))

core = len(mdp.frozen_atoms)
for x in mols:
    intact = all(a == b for a, b in zip(x.atoms[:core], scaffold.atoms))
    print(f"{'ok ' if intact else 'BAD'} TPSA {compute('TPSA', x):6.1f}  {write(x)}")
