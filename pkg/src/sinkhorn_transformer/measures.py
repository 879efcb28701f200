"""Finitely supported probability measures and the couplings between them."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError, NumericError

WEIGHT_SUM_TOL = 1e-12
COUPLING_MASS_TOL = 1e-10
MARGINAL_TOL = 1e-8
EXACT_MARGINAL_TOL = 1e-12


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def _as_support(points) -> np.ndarray:
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise InvalidInputError("support must be a 2-d array of points")
        return arr
    pts = [np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in points]
    if not pts:
        raise InvalidInputError("support must contain at least one point")
    dims = {p.shape for p in pts}
    if len(dims) != 1 or pts[0].ndim != 1:
        raise DimensionMismatchError(f"mixed point dimensions: {sorted(d for d in dims)}")
    return np.stack(pts)


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability measure ``sum_i weights[i] * delta_{support[i]}``.

    Atoms are kept as given; duplicates are allowed and never merged.
    """

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        support = _as_support(self.support)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if support.shape[0] == 0:
            raise InvalidInputError("a measure needs at least one atom")
        if weights.shape[0] != support.shape[0]:
            raise DimensionMismatchError(
                f"{support.shape[0]} atoms but {weights.shape[0]} weights")
        if not np.all(np.isfinite(support)):
            raise InvalidInputError("support coordinates must be finite")
        if not np.all(np.isfinite(weights)) or weights.min() < 0:
            raise InvalidInputError("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_SUM_TOL:
            raise InvalidInputError(f"weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "support", _frozen(support))
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def n(self) -> int:
        return self.support.shape[0]

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def permuted(self, perm) -> "DiscreteMeasure":
        perm = np.asarray(perm)
        return DiscreteMeasure(self.support[perm], self.weights[perm])

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "DiscreteMeasure":
        return cls(np.asarray(doc["support"], dtype=np.float64), doc["weights"])


def normalized_weights(raw) -> np.ndarray:
    """Rescale nonnegative ``raw`` so it sums to one exactly enough for a measure."""
    w = np.asarray(raw, dtype=np.float64)
    w = w / w.sum()
    # one correction pass absorbs the rounding of the division
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


def from_tokens(embeddings: Sequence) -> DiscreteMeasure:
    """Empirical measure with weight 1/n on each token embedding."""
    if len(embeddings) == 0:
        raise InvalidInputError("cannot build a measure from an empty token list")
    support = _as_support(embeddings)
    n = support.shape[0]
    return DiscreteMeasure(support, np.full(n, 1.0 / n))


@dataclass(frozen=True, eq=False)
class Coupling:
    """Nonnegative ``n x m`` mass matrix over a pair of supports."""

    row_support: np.ndarray
    col_support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        rows = _as_support(self.row_support)
        cols = _as_support(self.col_support)
        mass = np.asarray(self.mass, dtype=np.float64)
        if mass.shape != (rows.shape[0], cols.shape[0]):
            raise DimensionMismatchError(
                f"mass shape {mass.shape} does not match supports "
                f"({rows.shape[0]}, {cols.shape[0]})")
        if not np.all(np.isfinite(mass)):
            raise NumericError("coupling mass must be finite")
        if mass.min() < 0:
            raise InvalidInputError("coupling mass must be nonnegative")
        if abs(mass.sum() - 1.0) > COUPLING_MASS_TOL:
            raise InvalidInputError(f"coupling total mass {mass.sum()!r} is not 1")
        object.__setattr__(self, "row_support", _frozen(rows))
        object.__setattr__(self, "col_support", _frozen(cols))
        object.__setattr__(self, "mass", _frozen(mass))

    @property
    def shape(self):
        return self.mass.shape

    @property
    def row_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    @property
    def col_marginal(self) -> np.ndarray:
        return self.mass.sum(axis=0)

    def with_mass(self, mass) -> "Coupling":
        return Coupling(self.row_support, self.col_support, mass)

    def to_dict(self) -> dict:
        return {
            "rows": self.row_support.tolist(),
            "cols": self.col_support.tolist(),
            "mass": self.mass.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Coupling":
        return cls(np.asarray(doc["rows"], dtype=np.float64),
                   np.asarray(doc["cols"], dtype=np.float64),
                   np.asarray(doc["mass"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Density:
    """Values of d(pi)/d(mu x nu) on the product of the two supports."""

    values: np.ndarray
    row_weights: np.ndarray
    col_weights: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        a = np.asarray(self.row_weights, dtype=np.float64)
        b = np.asarray(self.col_weights, dtype=np.float64)
        if values.shape != (a.size, b.size):
            raise DimensionMismatchError("density shape does not match the weights")
        if not np.all(np.isfinite(values)):
            raise NumericError("density values must be finite")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "row_weights", _frozen(a))
        object.__setattr__(self, "col_weights", _frozen(b))

    @property
    def min(self) -> float:
        return float(self.values.min())

    @property
    def strictly_positive(self) -> bool:
        return self.min > 0

    def total(self) -> float:
        return float(self.row_weights @ self.values @ self.col_weights)


def product_coupling(mu: DiscreteMeasure, nu: DiscreteMeasure) -> Coupling:
    return Coupling(mu.support, nu.support, np.outer(mu.weights, nu.weights))


def marginals(pi: Coupling) -> tuple[np.ndarray, np.ndarray]:
    return pi.row_marginal, pi.col_marginal


def row_measure(pi: Coupling) -> DiscreteMeasure:
    return DiscreteMeasure(pi.row_support, normalized_weights(pi.row_marginal))


def col_measure(pi: Coupling) -> DiscreteMeasure:
    return DiscreteMeasure(pi.col_support, normalized_weights(pi.col_marginal))


def marginal_violation(pi: Coupling, a, b) -> tuple[float, float]:
    """L1 deviation of the row and column sums from ``a`` and ``b``."""
    row, col = marginals(pi)
    return (float(np.abs(row - np.asarray(a)).sum()),
            float(np.abs(col - np.asarray(b)).sum()))


def check_marginals(pi: Coupling, mu: DiscreteMeasure, nu: DiscreteMeasure,
                    tol: float = MARGINAL_TOL) -> None:
    """Raise if ``pi`` is not in Pi(mu, nu) up to ``tol`` (max-abs per marginal)."""
    row, col = marginals(pi)
    if row.shape != mu.weights.shape or col.shape != nu.weights.shape:
        raise DimensionMismatchError("coupling shape does not match the measures")
    err = max(np.abs(row - mu.weights).max(), np.abs(col - nu.weights).max())
    if err > tol:
        raise InvalidInputError(f"marginal deviation {err:.3e} exceeds {tol:.1e}")


def density_of(pi: Coupling, mu: DiscreteMeasure | None = None,
               nu: DiscreteMeasure | None = None) -> Density:
    """Density of ``pi`` against the product of its marginals (or of mu, nu).

    Entries where the reference product vanishes are set to zero.
    """
    a = pi.row_marginal if mu is None else mu.weights
    b = pi.col_marginal if nu is None else nu.weights
    ref = np.outer(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(ref > 0, pi.mass / np.where(ref > 0, ref, 1.0), 0.0)
    return Density(vals, a, b)


def coupling_from_density(density: Density, row_support, col_support) -> Coupling:
    mass = density.values * np.outer(density.row_weights, density.col_weights)
    return Coupling(row_support, col_support, mass)


def integrate(obj, f: Callable) -> float:
    """Integrate ``f`` against a measure (``f(x)``) or a coupling (``f(x, y)``)."""
    if isinstance(obj, DiscreteMeasure):
        vals = np.array([f(x) for x in obj.support], dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise NumericError("test function is not finite on the support")
        return math.fsum(obj.weights * vals)
    if isinstance(obj, Coupling):
        vals = np.array([[f(x, y) for y in obj.col_support] for x in obj.row_support],
                        dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise NumericError("test function is not finite on the support")
        return math.fsum((obj.mass * vals).ravel())
    raise InvalidInputError(f"cannot integrate against {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj.to_dict())


def load_measure(path) -> DiscreteMeasure:
    with open(path) as fh:
        return DiscreteMeasure.from_dict(json.load(fh))


def load_coupling(path) -> Coupling:
    with open(path) as fh:
        return Coupling.from_dict(json.load(fh))
