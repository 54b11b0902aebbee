"""Federated optimization with decoupled global momentum and adaptive server rules."""

from .config import FederationConfig, config_from_dict, load_config
from .engine import build_task, run_centralized, run_experiment
from .errors import FeddaError

__all__ = [
    "FederationConfig",
    "FeddaError",
    "build_task",
    "config_from_dict",
    "load_config",
    "run_centralized",
    "run_experiment",
]
__version__ = "0.1.0"
