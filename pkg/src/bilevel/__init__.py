"""Evolutionary bilevel optimization with reaction-set and value-function approximations."""

__version__ = "0.1.0"

from .core import BilevelProblem, EvalCounter, Individual, UsageError  # noqa: E402
from .problems import catalog, registry_lookup  # noqa: E402
from .algorithms import ALGORITHMS, BleaqConfig, bleaq2_solve, nested_solve  # noqa: E402

__all__ = [
    "ALGORITHMS",
    "BilevelProblem",
    "BleaqConfig",
    "EvalCounter",
    "Individual",
    "UsageError",
    "bleaq2_solve",
    "catalog",
    "nested_solve",
    "registry_lookup",
]
