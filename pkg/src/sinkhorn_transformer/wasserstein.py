"""Exact Wasserstein-1 between finitely supported measures.

The transportation LP is solved by POT's network simplex (a C++ min-cost-flow
solver on the complete bipartite graph), which returns an optimal vertex of
the transportation polytope.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidInputError, NumericError, SizeError
from .measures import Coupling, DiscreteMeasure

log = logging.getLogger(__name__)

MAX_COMBINED_SUPPORT = 512
METRIC_CHECK_TOL = 1e-10

_emd = None


def _network_simplex():
    global _emd
    if _emd is None:
        # POT probes torch/jax/tf on import; none of them are needed here
        for key in ("PYTORCH", "JAX", "TENSORFLOW", "CUPY"):
            os.environ.setdefault(f"POT_BACKEND_DISABLE_{key}", "1")
        from ot.lp import emd
        _emd = emd
    return _emd


@dataclass(frozen=True)
class W1Result:
    value: float
    plan: np.ndarray
    is_metric: bool


def euclidean(x, y) -> float:
    return float(np.linalg.norm(np.asarray(x) - np.asarray(y)))


def pairwise_euclidean(X, Y) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    diff = X[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def looks_metric(D: np.ndarray, tol: float = METRIC_CHECK_TOL) -> bool:
    """Whether ``D`` passes the metric axioms up to ``tol``."""
    if D.min() < -tol or np.abs(np.diag(D)).max() > tol:
        return False
    if np.abs(D - D.T).max() > tol:
        return False
    for k in range(D.shape[0]):
        if (D[:, [k]] + D[[k], :] - D).min() < -tol:
            return False
    return True


def transport_lp(a, b, M) -> tuple[float, np.ndarray]:
    """Optimal value and plan of min <P, M> over couplings of ``a`` and ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    M = np.ascontiguousarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise NumericError("ground cost must be finite")
    if a.size + b.size > MAX_COMBINED_SUPPORT:
        raise SizeError(
            f"combined support {a.size + b.size} exceeds {MAX_COMBINED_SUPPORT}")
    plan, info = _network_simplex()(a, b, M, numItermax=10_000_000, log=True)
    if info.get("result_code", 1) != 1:
        raise NumericError(f"network simplex failed: {info.get('warning')}")
    return float(np.sum(plan * M)), plan


def _compact(support: np.ndarray, weights: np.ndarray):
    keep = weights > 0
    return support[keep], weights[keep]


def w1_details(p: DiscreteMeasure, q: DiscreteMeasure,
               metric: Callable | None = None) -> W1Result:
    xs, a = _compact(p.support, p.weights)
    ys, b = _compact(q.support, q.weights)
    if xs.shape[1] != ys.shape[1]:
        raise InvalidInputError("measures live in spaces of different dimension")
    if a.size + b.size > MAX_COMBINED_SUPPORT:
        raise SizeError(
            f"combined support {a.size + b.size} exceeds {MAX_COMBINED_SUPPORT}")
    pts = np.vstack([xs, ys])
    if metric is None:
        D = pairwise_euclidean(pts, pts)
    else:
        D = np.array([[metric(x, y) for y in pts] for x in pts], dtype=np.float64)
    is_metric = looks_metric(D)
    if not is_metric:
        log.warning("ground cost is not a metric; W1 duality checks do not apply")
    value, plan = transport_lp(a, b, D[: a.size, a.size:])
    return W1Result(value, plan, is_metric)


def exact_w1(p: DiscreteMeasure, q: DiscreteMeasure,
             metric: Callable | None = None) -> float:
    """Exact W1 between two measures under ``metric`` (Euclidean by default)."""
    return w1_details(p, q, metric).value


def product_metric_cost(pi1: Coupling, pi2: Coupling):
    """Flattened atoms and sum-metric ground costs for two couplings."""
    r1, c1 = pi1.row_support, pi1.col_support
    r2, c2 = pi2.row_support, pi2.col_support
    if r1.shape[1] != r2.shape[1] or c1.shape[1] != c2.shape[1]:
        raise InvalidInputError("couplings live over different embedding spaces")
    dx = pairwise_euclidean(r1, r2)
    dy = pairwise_euclidean(c1, c2)
    # M[(i,j),(k,l)] = |x_i - x'_k| + |y_j - y'_l|
    M = dx[:, None, :, None] + dy[None, :, None, :]
    return M.reshape(r1.shape[0] * c1.shape[0], r2.shape[0] * c2.shape[0])


def coupling_w1(pi1: Coupling, pi2: Coupling) -> float:
    """W1 between two couplings seen as measures on X x Y with d_X + d_Y."""
    M = product_metric_cost(pi1, pi2)
    a = pi1.mass.ravel()
    b = pi2.mass.ravel()
    ia = np.flatnonzero(a > 0)
    ib = np.flatnonzero(b > 0)
    value, _ = transport_lp(a[ia], b[ib], M[np.ix_(ia, ib)])
    return value


def support_diameter(pi: Coupling) -> float:
    """Diameter of supp(rows) x supp(cols) under the sum metric."""
    return float(pairwise_euclidean(pi.row_support, pi.row_support).max()
                 + pairwise_euclidean(pi.col_support, pi.col_support).max())
