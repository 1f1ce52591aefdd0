"""Observability of finite-state hidden Markov models through duality with a backward SDE."""

from .errors import DualscopeError
from .model import (
    Model,
    ProbabilityMeasure,
    SignedMeasure,
    Subspace,
    load_model,
    matrix_exponential,
    numerical_rank,
    validate_model,
)
from .observability import ObservabilityReport, analyze, nonlinear_closure, unobservable_directions
from .simulate import PathBundle, TimeGrid

__all__ = [
    "DualscopeError",
    "Model",
    "ObservabilityReport",
    "PathBundle",
    "ProbabilityMeasure",
    "SignedMeasure",
    "Subspace",
    "TimeGrid",
    "analyze",
    "load_model",
    "matrix_exponential",
    "nonlinear_closure",
    "numerical_rank",
    "unobservable_directions",
    "validate_model",
]
__version__ = "0.1.0"
