"""Metric report for a handful of known molecules.

Rewards are made up; the point is to show what each field means on a set
small enough to check by eye.

    python3 demos/metrics_report.py
"""
from atomgfn.metrics import SampleSet, evaluate
from atomgfn.reward import pretraining_context
from atomgfn.smiles import parse

rows = [
    ("CC(=O)Nc1ccc(O)cc1", 0.91),   # paracetamol
    ("CC(=O)Oc1ccccc1C(=O)O", 0.84),  # aspirin
    ("CC(=O)Oc1ccccc1C(=O)O", 0.84),  # a duplicate lowers uniqueness
    ("c1ccc2ccccc2c1", 0.40),
    ("OCCO", 0.20),
    ("CN1CCC[C@H]1c1cccnc1", 0.66),  # nicotine
]
s = SampleSet([parse(smi) for smi, _ in rows], [r for _, r in rows])
reference = {s.keys[0]}  # pretend paracetamol was in the training data
print(evaluate(s, pretraining_context(), reference_keys=reference).as_text())
