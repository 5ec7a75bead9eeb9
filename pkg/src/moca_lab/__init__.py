"""Continual-learning lab: replay training with norm-preserving feature
perturbations and representation-collapse diagnostics."""
from .errors import ConfigError, DegenerateVector, MocaLabError
from .perturb import PerturberConfig
from .runner import RunConfig, run_experiment

__version__ = "0.1.0"

__all__ = ["ConfigError", "DegenerateVector", "MocaLabError", "PerturberConfig", "RunConfig",
           "run_experiment", "__version__"]
