"""Entropic optimal transport via the Sinkhorn algorithm.

The Sinkhorn plan for cost ``c`` and marginals ``a, b`` is written as

    P[i, j] = a[i] * b[j] * exp(f[i] + g[j] - c[i, j] / eps)

so that ``u = exp(f)`` and ``v = exp(g)`` are the positive potentials of the
factorization ``dP / d(a x b) = u K v`` with ``K = exp(-c / eps)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConvergenceError, DimensionMismatchError, InvalidInputError,
                     NumericError)
from .measures import Coupling, DiscreteMeasure
from .wasserstein import coupling_w1

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CostMatrix:
    values: np.ndarray
    bound: float | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2:
            raise InvalidInputError("cost must be a 2-d matrix")
        if not np.all(np.isfinite(vals)):
            raise NumericError("cost entries must be finite")
        vals.setflags(write=False)
        bound = float(np.abs(vals).max()) if self.bound is None else float(self.bound)
        if np.abs(vals).max() > bound:
            raise InvalidInputError(f"cost exceeds its declared bound {bound}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "bound", bound)

    @property
    def shape(self):
        return self.values.shape


def as_cost(c) -> CostMatrix:
    return c if isinstance(c, CostMatrix) else CostMatrix(c)


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 1.0
    max_iters: int = 10_000
    tol: float = 1e-9
    log_domain: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if not self.tol > 0:
            raise InvalidInputError("tol must be positive")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be at least 1")


@dataclass(frozen=True, eq=False)
class SinkhornSolution:
    coupling: Coupling
    u: np.ndarray
    v: np.ndarray
    iters: int
    final_violation: float
    status: str = "converged"
    log_u: np.ndarray = field(default=None, repr=False)
    log_v: np.ndarray = field(default=None, repr=False)

    @property
    def mass(self) -> np.ndarray:
        return self.coupling.mass


def logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    """Max-shifted log-sum-exp along one axis of a finite matrix."""
    m = z.max(axis=axis, keepdims=True)
    return np.log(np.exp(z - m).sum(axis=axis)) + np.squeeze(m, axis=axis)


def _check_inputs(c: CostMatrix, mu: DiscreteMeasure, nu: DiscreteMeasure):
    if c.shape != (mu.n, nu.n):
        raise DimensionMismatchError(
            f"cost shape {c.shape} does not match supports ({mu.n}, {nu.n})")
    if mu.weights.min() <= 0 or nu.weights.min() <= 0:
        raise InvalidInputError("zero-weight atoms must be dropped before solving")


def _plan(log_a, log_b, f, g, log_k):
    return np.exp(log_a[:, None] + log_b[None, :] + f[:, None] + g[None, :] + log_k)


def _solve_log(log_k, a, b, cfg):
    log_a, log_b = np.log(a), np.log(b)
    g = np.zeros(b.size)
    violation = np.inf
    it = 0
    while it < cfg.max_iters:
        it += 1
        f = -logsumexp(log_k + (g + log_b)[None, :], axis=1)
        P = _plan(log_a, log_b, f, g, log_k)
        violation = float(np.abs(P.sum(axis=0) - b).sum())
        if violation <= cfg.tol:
            break
        g = -logsumexp(log_k + (f + log_a)[:, None], axis=0)
    return f, g, it, violation


def _solve_plain(log_k, a, b, cfg):
    v = np.ones(b.size)
    violation = np.inf
    it = 0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        K = np.exp(log_k)
        while it < cfg.max_iters:
            it += 1
            u = 1.0 / (K @ (v * b))
            if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                raise NumericError(
                    "scaling iterations overflowed; rerun with log_domain=True")
            P = (a * u)[:, None] * K * (v * b)[None, :]
            violation = float(np.abs(P.sum(axis=0) - b).sum())
            if violation <= cfg.tol:
                break
            v = 1.0 / (K.T @ (u * a))
        f, g = np.log(u), np.log(v)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise NumericError("scaling iterations underflowed; rerun with log_domain=True")
    return f, g, it, violation


def sinkhorn_solve(c, mu: DiscreteMeasure, nu: DiscreteMeasure,
                   cfg: SinkhornConfig | None = None) -> SinkhornSolution:
    """Sinkhorn plan minimizing <c, P> + eps * KL(P || mu x nu) over Pi(mu, nu).

    Iterates row/column dual updates until the L1 column violation measured
    right after a row update falls under ``cfg.tol``, then rescales the rows so
    the row marginal holds to rounding.
    """
    cfg = cfg or SinkhornConfig()
    c = as_cost(c)
    _check_inputs(c, mu, nu)
    a, b = mu.weights, nu.weights
    log_k = -c.values / cfg.epsilon
    solver = _solve_log if cfg.log_domain else _solve_plain
    f, g, it, violation = solver(log_k, a, b, cfg)

    P = _plan(np.log(a), np.log(b), f, g, log_k)
    if not np.all(np.isfinite(P)):
        raise NumericError("non-finite plan; rerun with log_domain=True")
    scale = a / P.sum(axis=1)
    P = P * scale[:, None]
    f = f + np.log(scale)
    violation = float(np.abs(P.sum(axis=0) - b).sum())
    if violation > cfg.tol:
        raise ConvergenceError(
            f"Sinkhorn did not reach tol={cfg.tol:.1e} in {it} iterations "
            f"(column violation {violation:.3e})",
            final_violation=violation, iters=it)
    log.debug("sinkhorn converged in %d iterations, violation %.2e", it, violation)
    coupling = Coupling(mu.support, nu.support, P)
    with np.errstate(over="ignore"):
        # u, v may overflow on extreme costs; log_u, log_v stay exact
        u, v = np.exp(f), np.exp(g)
    return SinkhornSolution(coupling, u, v, it, violation, "converged", f, g)


def factorization_residual(sol: SinkhornSolution, c, mu, nu, epsilon: float) -> float:
    """Max relative gap between the plan and u * K * v * (a x b)."""
    c = as_cost(c)
    model = np.exp(np.log(mu.weights)[:, None] + np.log(nu.weights)[None, :]
                   + sol.log_u[:, None] + sol.log_v[None, :] - c.values / epsilon)
    return float(np.max(np.abs(sol.mass - model) / model))


def kl_divergence(p, q) -> float:
    """KL(p || q) with 0 ln 0 = 0; +inf when p charges a null cell of q."""
    p = p.mass if isinstance(p, Coupling) else np.asarray(p, dtype=np.float64)
    q = q.mass if isinstance(q, Coupling) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionMismatchError("KL arguments must share supports")
    support = p > 0
    if np.any(q[support] <= 0):
        return float("inf")
    pp, qq = p[support], q[support]
    return float(np.sum(pp * (np.log(pp) - np.log(qq))))


def entropic_objective(pi, c, epsilon: float, ref) -> float:
    """<c, pi> + epsilon * KL(pi || ref)."""
    c = as_cost(c)
    mass = pi.mass if isinstance(pi, Coupling) else np.asarray(pi, dtype=np.float64)
    kl = kl_divergence(mass, ref)
    if np.isinf(kl):
        return float("inf")
    return float(np.sum(c.values * mass) + epsilon * kl)


def lipschitz_probe(c1, c2, mu, nu, cfg: SinkhornConfig | None = None):
    """Return (W1 / ||c1 - c2||_inf, W1, ||c1 - c2||_inf) for the two plans."""
    c1, c2 = as_cost(c1), as_cost(c2)
    gap = float(np.abs(c1.values - c2.values).max())
    if gap == 0:
        raise InvalidInputError("cost gap is zero; the ratio is undefined")
    s1 = sinkhorn_solve(c1, mu, nu, cfg)
    s2 = sinkhorn_solve(c2, mu, nu, cfg)
    w1 = coupling_w1(s1.coupling, s2.coupling)
    return w1 / gap, w1, gap


# -- fixed-length unrolled solver used for training -------------------------

@dataclass
class UnrolledTape:
    log_k: np.ndarray
    log_a: np.ndarray
    log_b: np.ndarray
    fs: list
    gs: list
    log_plan: np.ndarray


def sinkhorn_unrolled(C: np.ndarray, a: np.ndarray, b: np.ndarray, epsilon: float,
                      n_iters: int) -> UnrolledTape:
    """Exactly ``n_iters`` (g, f) sweeps starting from g = 0, ending on a row update.

    Keeps every intermediate potential so ``sinkhorn_unrolled_vjp`` can
    backpropagate through the same computation.
    """
    log_a, log_b = np.log(a), np.log(b)
    log_k = -np.asarray(C, dtype=np.float64) / epsilon
    g = np.zeros(b.size)
    fs, gs = [], [g]
    f = -logsumexp(log_k + (g + log_b)[None, :], axis=1)
    fs.append(f)
    for _ in range(n_iters):
        g = -logsumexp(log_k + (f + log_a)[:, None], axis=0)
        gs.append(g)
        f = -logsumexp(log_k + (g + log_b)[None, :], axis=1)
        fs.append(f)
    log_plan = log_a[:, None] + log_b[None, :] + f[:, None] + g[None, :] + log_k
    return UnrolledTape(log_k, log_a, log_b, fs, gs, log_plan)


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sinkhorn_unrolled_vjp(tape: UnrolledTape, d_log_plan: np.ndarray,
                          epsilon: float) -> np.ndarray:
    """Gradient of a scalar w.r.t. the cost, given its gradient w.r.t. log P."""
    d_log_k = d_log_plan.copy()
    df = d_log_plan.sum(axis=1)
    dg = d_log_plan.sum(axis=0)
    fs, gs = tape.fs, tape.gs
    for t in range(len(fs) - 1, -1, -1):
        # f_t = -lse_j(log_k + g_t + log_b)
        S = _softmax(tape.log_k + (gs[t] + tape.log_b)[None, :], axis=1)
        dM = -df[:, None] * S
        d_log_k += dM
        dg = dg + dM.sum(axis=0)
        df = np.zeros_like(df)
        if t == 0:
            break
        # g_t = -lse_i(log_k + f_{t-1} + log_a)
        S = _softmax(tape.log_k + (fs[t - 1] + tape.log_a)[:, None], axis=0)
        dM = -dg[None, :] * S
        d_log_k += dM
        df = df + dM.sum(axis=1)
        dg = np.zeros_like(dg)
    return -d_log_k / epsilon
