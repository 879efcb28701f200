"""Constructive approximation of couplings and stability probes.

Any plan can be approximated by one with piecewise-constant density on a
ball-cover partition, and a plan with positive density is the Sinkhorn plan
of the cost ``-eps * log(density)``.  The regularization pipeline chains these
facts; the probes at the end measure how Sinkhorn plans respond when costs
or marginals move.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError, UnattainableError
from .measures import (Coupling, Density, DiscreteMeasure, col_measure, density_of,
                       normalized_weights, product_coupling, row_measure)
from .transport import (CostMatrix, SinkhornConfig, entropic_objective,
                        lipschitz_probe, sinkhorn_solve)
from .wasserstein import coupling_w1, pairwise_euclidean

log = logging.getLogger(__name__)

COST_BOUND = 50.0
# below this the mixture is not numerically distinct from pi, so W1 reads as 0
MIN_MIX = 1e-12


@dataclass(frozen=True)
class Partition:
    cells: tuple  # tuple of index arrays
    k: int

    @property
    def labels(self) -> np.ndarray:
        n = sum(len(c) for c in self.cells)
        out = np.empty(n, dtype=int)
        for idx, cell in enumerate(self.cells):
            out[cell] = idx
        return out


def build_partition(support, k: int) -> Partition:
    """Disjointified greedy cover by closed balls of radius 1/(4k).

    Centers are taken in index order among the points not yet covered, so
    every cell has diameter at most 1/(2k).
    """
    pts = np.atleast_2d(np.asarray(support, dtype=np.float64))
    if pts.shape[0] == 0:
        raise InvalidInputError("cannot partition an empty support")
    if k < 1:
        raise InvalidInputError("k must be a positive integer")
    radius = 1.0 / (4 * k)
    D = pairwise_euclidean(pts, pts)
    free = np.ones(pts.shape[0], dtype=bool)
    cells = []
    for i in range(pts.shape[0]):
        if not free[i]:
            continue
        members = np.flatnonzero(free & (D[i] <= radius))
        free[members] = False
        cells.append(members)
    return Partition(tuple(cells), k)


def cell_diameters(support, part: Partition) -> list:
    pts = np.atleast_2d(np.asarray(support, dtype=np.float64))
    return [float(pairwise_euclidean(pts[c], pts[c]).max()) for c in part.cells]


def block_coupling(pi: Coupling, px: Partition, py: Partition) -> tuple[Coupling, Density]:
    """Piecewise-constant-density approximation of ``pi`` on ``px x py``.

    The density on a block is pi(A x B) / (mu(A) nu(B)), zero on blocks with
    a null marginal, so the marginals of the result are exactly those of pi.
    """
    a, b = pi.row_marginal, pi.col_marginal
    rl, cl = px.labels, py.labels
    if rl.size != a.size or cl.size != b.size:
        raise DimensionMismatchError("partitions do not cover the coupling supports")
    R = np.zeros((len(px.cells), a.size))
    R[rl, np.arange(a.size)] = 1.0
    S = np.zeros((len(py.cells), b.size))
    S[cl, np.arange(b.size)] = 1.0
    block_mass = R @ pi.mass @ S.T
    mu_cells, nu_cells = R @ a, S @ b
    ref = np.outer(mu_cells, nu_cells)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(ref > 0, block_mass / np.where(ref > 0, ref, 1.0), 0.0)
    values = f[np.ix_(rl, cl)]
    mass = values * np.outer(a, b)
    return pi.with_mass(mass), Density(values, a, b)


def block_approximation(pi: Coupling, k: int) -> Coupling:
    px = build_partition(pi.row_support, k)
    py = build_partition(pi.col_support, k)
    return block_coupling(pi, px, py)[0]


def entropic_representation_roundtrip(pi: Coupling, epsilon: float = 1.0,
                                      cfg: SinkhornConfig | None = None):
    """Solve entropic OT with cost ``-eps * log(density of pi)`` and compare to pi.

    Returns ``(cost, recovered, w1_gap)``.
    """
    cfg = cfg or SinkhornConfig(epsilon=epsilon)
    dens = density_of(pi)
    if not dens.strictly_positive:
        raise InvalidInputError(
            "density has zero entries; regularize with regularize_mix first")
    cost = CostMatrix(-epsilon * np.log(dens.values))
    sol = sinkhorn_solve(cost, row_measure(pi), col_measure(pi),
                         SinkhornConfig(epsilon, cfg.max_iters, cfg.tol, cfg.log_domain))
    return cost, sol.coupling, coupling_w1(sol.coupling, pi)


def regularize_mix(pi: Coupling, delta: float) -> Coupling:
    """``(1 - delta) * pi + delta * (mu x nu)`` with mu, nu the marginals of pi."""
    if not 0.0 <= delta <= 1.0:
        raise InvalidInputError(f"delta={delta} outside [0, 1]")
    ref = np.outer(pi.row_marginal, pi.col_marginal)
    return pi.with_mass((1.0 - delta) * pi.mass + delta * ref)


def _largest_mix(pi: Coupling, budget: float, iters: int = 60) -> tuple[float, Coupling, float]:
    """Largest delta in [MIN_MIX, 1/2] (by bisection) with W1(mix, pi) <= budget."""
    lo, hi = 0.0, 0.5
    best = None
    top = regularize_mix(pi, hi)
    w = coupling_w1(top, pi)
    if w <= budget:
        return hi, top, w
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid < MIN_MIX:
            break
        cand = regularize_mix(pi, mid)
        w = coupling_w1(cand, pi)
        if w <= budget:
            lo, best = mid, (mid, cand, w)
        else:
            hi = mid
    if best is None:
        raise UnattainableError(
            f"no positive mixing weight keeps W1 under {budget:.3e}")
    return best


@dataclass(frozen=True)
class PipelineResult:
    coupling: Coupling
    density: Density
    achieved_w1: float
    deltas: tuple
    stage_w1: tuple


def regularization_pipeline(pi: Coupling, target_w1: float,
                            cfg: SinkhornConfig | None = None) -> PipelineResult:
    """Turn ``pi`` into a nearby plan with strictly positive factorized density.

    Stage 1 mixes in the product measure, stage 2 re-solves entropic OT with
    cost ``-log(density)`` (putting the plan in ``u K v`` form), stage 3
    mixes once more.  Each stage gets a third of ``target_w1``.
    """
    cfg = cfg or SinkhornConfig()
    if target_w1 < 0:
        raise InvalidInputError("target_w1 must be nonnegative")
    third = target_w1 / 3.0
    d1, pi1, w1 = _largest_mix(pi, third)

    dens1 = density_of(pi1)
    cost = CostMatrix(-cfg.epsilon * np.log(dens1.values))
    pi2 = sinkhorn_solve(cost, row_measure(pi1), col_measure(pi1), cfg).coupling
    w2 = coupling_w1(pi2, pi1)
    if w2 > third:
        raise UnattainableError(
            f"entropic re-solve moved the plan by {w2:.3e} > {third:.3e}")

    d3, pi3, w3 = _largest_mix(pi2, third)
    achieved = coupling_w1(pi3, pi)
    if achieved > target_w1:
        raise UnattainableError(f"achieved W1 {achieved:.3e} exceeds {target_w1:.3e}")
    return PipelineResult(pi3, density_of(pi3), achieved, (d1, d3), (w1, w2, w3))


# -- stability probes -------------------------------------------------------

def perturb_weights(weights, t: float, direction) -> np.ndarray:
    """Move ``weights`` a fraction ``t`` of the way towards ``direction``."""
    w = (1.0 - t) * np.asarray(weights) + t * np.asarray(direction)
    return normalized_weights(w)


@dataclass(frozen=True)
class SchrodingerRow:
    uv_deviation: float
    w1_to_limit: float
    u: np.ndarray
    v: np.ndarray


def schrodinger_perturbation_probe(s0: Density, mu0: DiscreteMeasure, nu0: DiscreteMeasure,
                                   perturbed_marginals, cfg: SinkhornConfig | None = None):
    """Potentials of the entropic problem with cost ``-eps log s0`` under moved marginals.

    ``s0`` must be the density of a plan in Pi(mu0, nu0), so the unperturbed
    problem is solved by u = v = 1.  The gauge is fixed by u[0] = 1.
    """
    cfg = cfg or SinkhornConfig()
    if not s0.strictly_positive:
        raise InvalidInputError("s0 must be strictly positive")
    if (s0.values.shape != (mu0.n, nu0.n)
            or not np.allclose(s0.row_weights, mu0.weights)
            or not np.allclose(s0.col_weights, nu0.weights)):
        raise DimensionMismatchError("s0 is not a density over (mu0, nu0)")
    cost = CostMatrix(-cfg.epsilon * np.log(s0.values))
    limit = Coupling(mu0.support, nu0.support, s0.values * np.outer(mu0.weights, nu0.weights))
    rows = []
    for mu_n, nu_n in perturbed_marginals:
        if (mu_n.support.shape != mu0.support.shape or nu_n.support.shape != nu0.support.shape
                or not np.array_equal(mu_n.support, mu0.support)
                or not np.array_equal(nu_n.support, nu0.support)):
            raise DimensionMismatchError("perturbed marginals must keep the supports fixed")
        sol = sinkhorn_solve(cost, mu_n, nu_n, cfg)
        shift = sol.log_u[0]
        lu, lv = sol.log_u - shift, sol.log_v + shift
        uv = np.exp(lu[:, None] + lv[None, :])
        rows.append(SchrodingerRow(float(np.abs(uv - 1.0).max()),
                                   coupling_w1(sol.coupling, limit), np.exp(lu), np.exp(lv)))
    return rows


def random_bounded_cost(rng: np.random.Generator, n: int, m: int, scale: float = 1.0) -> np.ndarray:
    return rng.uniform(-scale, scale, size=(n, m))


@dataclass(frozen=True)
class CostSequenceRow:
    n: int
    cost_gap: float
    w1: float
    objective_gap: float


def cost_sequence_probe(c, mu: DiscreteMeasure, nu: DiscreteMeasure, ns,
                        rng: np.random.Generator, cfg: SinkhornConfig | None = None):
    """Solve with ``c_n = c + D / n`` (``max|D| = 1``) and compare to the plan for ``c``.

    Each row carries W1 between the two plans and the excess objective of
    the n-th plan under the limit cost.
    """
    cfg = cfg or SinkhornConfig()
    c = np.asarray(c.values if isinstance(c, CostMatrix) else c, dtype=np.float64)
    D = rng.uniform(-1.0, 1.0, size=c.shape)
    D /= np.abs(D).max()
    if np.abs(c).max() + 1.0 > COST_BOUND:
        raise InvalidInputError(f"costs must stay within the bound {COST_BOUND}")
    ref = np.outer(mu.weights, nu.weights)
    limit = sinkhorn_solve(c, mu, nu, cfg)
    best = entropic_objective(limit.coupling, c, cfg.epsilon, ref)
    rows = []
    for n in ns:
        cn = c + D / n
        sol = sinkhorn_solve(cn, mu, nu, cfg)
        rows.append(CostSequenceRow(
            n, float(np.abs(cn - c).max()),
            coupling_w1(sol.coupling, limit.coupling),
            entropic_objective(sol.coupling, c, cfg.epsilon, ref) - best))
    return rows


def shift_invariance_gap(c, k: float, mu, nu, cfg: SinkhornConfig | None = None) -> float:
    """W1 between the Sinkhorn plans for ``c`` and ``c + k``."""
    c = np.asarray(c.values if isinstance(c, CostMatrix) else c, dtype=np.float64)
    s1 = sinkhorn_solve(c, mu, nu, cfg)
    s2 = sinkhorn_solve(c + k, mu, nu, cfg)
    return coupling_w1(s1.coupling, s2.coupling)


def lipschitz_batch(trials: int, seed: int, size: int = 5,
                    cfg: SinkhornConfig | None = None) -> list:
    """Empirical W1 / ||c1 - c2||_inf ratios on fixed random marginals."""
    rng = np.random.default_rng(seed)
    mu = DiscreteMeasure(rng.uniform(size=(size, 2)), normalized_weights(rng.uniform(0.5, 1.5, size)))
    nu = DiscreteMeasure(rng.uniform(size=(size, 2)), normalized_weights(rng.uniform(0.5, 1.5, size)))
    out = []
    for _ in range(trials):
        c1 = random_bounded_cost(rng, size, size, 2.0)
        c2 = random_bounded_cost(rng, size, size, 2.0)
        out.append(lipschitz_probe(c1, c2, mu, nu, cfg))
    return out


def product_w1(pi: Coupling) -> float:
    return coupling_w1(pi, product_coupling(row_measure(pi), col_measure(pi)))


def isclose_monotone(values, noise: float = 0.0) -> bool:
    """True when ``values`` never increases by more than ``noise``."""
    return all(b <= a + noise for a, b in zip(values, values[1:]))

