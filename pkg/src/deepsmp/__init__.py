"""Deep stochastic-maximum-principle solvers for constrained portfolio optimization."""
from .config import ExperimentConfig, load_config
from .constraints import FloorBox, FullSpace, NonNegOrthant, ZeroPadded
from .market import DeterministicMarkovian, HestonAugmented, PathDependentMomentum, VasicekAugmented
from .solver_dual import DeepDualSMP
from .solver_primal import DeepPrimalSMP
from .utility import LogUtility, PowerUtility

__version__ = "0.1.0"

__all__ = [
    "DeepDualSMP",
    "DeepPrimalSMP",
    "DeterministicMarkovian",
    "ExperimentConfig",
    "FloorBox",
    "FullSpace",
    "HestonAugmented",
    "LogUtility",
    "NonNegOrthant",
    "PathDependentMomentum",
    "PowerUtility",
    "VasicekAugmented",
    "ZeroPadded",
    "load_config",
]
