"""Atom-level, property-conditioned GFlowNets for molecule generation."""
from .mdp import Action, ActionType, MDPConfig, MolMDP, Trajectory
from .molgraph import Atom, Bond, MolGraph
from .policy import GraphPolicy, PolicyConfig
from .reward import ConditioningContext, PropertyBounds, PropertyConditional
from .smiles import canonical_key, parse, write
from .trainer import TrainConfig, Trainer

__all__ = [
    "Action", "ActionType", "Atom", "Bond", "ConditioningContext", "GraphPolicy", "MDPConfig",
    "MolGraph", "MolMDP", "PolicyConfig", "PropertyBounds", "PropertyConditional",
    "TrainConfig", "Trainer", "Trajectory", "canonical_key", "parse", "write",
]
__version__ = "0.1.0"
