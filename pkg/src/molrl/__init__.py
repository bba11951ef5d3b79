"""Online RL construction of 3D molecules under bag constraints."""

__version__ = "0.1.0"

from .chem import Bag, Canvas, Element, State, parse_formula
from .energy import CalculatorResult, SurrogateCalculator, atomization_delta, relax
from .env import MolEnv, RewardConfig, agent_preset
from .molgraph import MolecularGraph, canonical_key, is_valid, perceive_bonds
from .policy import Action, NetConfig, Policy
from .ppo import TrainConfig, Trainer, compute_gae

__all__ = [
    "Bag",
    "Canvas",
    "Element",
    "State",
    "parse_formula",
    "CalculatorResult",
    "SurrogateCalculator",
    "atomization_delta",
    "relax",
    "MolEnv",
    "RewardConfig",
    "agent_preset",
    "MolecularGraph",
    "canonical_key",
    "is_valid",
    "perceive_bonds",
    "Action",
    "NetConfig",
    "Policy",
    "TrainConfig",
    "Trainer",
    "compute_gae",
]
