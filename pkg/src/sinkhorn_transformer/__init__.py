"""Sinkhorn Transformers acting on discrete probability measures."""

from .errors import (ConvergenceError, DimensionMismatchError, DomainError, InvalidInputError,
                     NumericError, SizeError, UnattainableError)
from .measures import Coupling, Density, DiscreteMeasure
from .transport import SinkhornConfig, SinkhornSolution, sinkhorn_solve
from .wasserstein import coupling_w1, exact_w1

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "Coupling", "Density", "DimensionMismatchError", "DiscreteMeasure",
    "DomainError", "InvalidInputError", "NumericError", "SinkhornConfig", "SinkhornSolution",
    "SizeError", "UnattainableError", "coupling_w1", "exact_w1", "sinkhorn_solve",
]
