"""Sinkhorn Transformer: two encoders, an inner-product cost, a Sinkhorn layer.

Training differentiates through a fixed number of log-domain Sinkhorn
sweeps; evaluation always uses the converged solver and exact W1.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .approx import block_approximation
from .attention import (EncoderParams, encode_atoms, encode_atoms_cached,
                        encode_atoms_vjp, init_encoder, rebuild)
from .errors import DimensionMismatchError, InvalidInputError, NumericError
from .measures import (Coupling, DiscreteMeasure, check_marginals, from_tokens,
                       product_coupling)
from .transport import (CostMatrix, SinkhornConfig, SinkhornSolution, kl_divergence,
                        sinkhorn_solve, sinkhorn_unrolled, sinkhorn_unrolled_vjp)
from .wasserstein import coupling_w1, support_diameter

log = logging.getLogger(__name__)

FAMILIES = ("product", "planted-entropic", "block")
LOSS_KINDS = ("kl", "frobenius")
MAX_SUPPORT = 16
DIVERGENCE_LOSS = 1e6


@dataclass(eq=False)
class SinkhornTransformerParams:
    q_encoder: EncoderParams
    k_encoder: EncoderParams
    shared: bool = False

    def __post_init__(self):
        if self.shared:
            self.k_encoder = self.q_encoder
        if self.q_encoder.d_out != self.k_encoder.d_out:
            raise DimensionMismatchError(
                f"encoder outputs differ: {self.q_encoder.d_out} vs {self.k_encoder.d_out}")

    @property
    def d_out(self) -> int:
        return self.q_encoder.d_out

    def arrays(self) -> list:
        if self.shared:
            return self.q_encoder.arrays()
        return self.q_encoder.arrays() + self.k_encoder.arrays()

    def rebuild(self, arrays) -> "SinkhornTransformerParams":
        arrays = list(arrays)
        nq = len(self.q_encoder.arrays())
        q = rebuild(self.q_encoder, arrays[:nq])
        k = q if self.shared else rebuild(self.k_encoder, arrays[nq:])
        return SinkhornTransformerParams(q, k, self.shared)

    def to_dict(self) -> dict:
        doc = {"shared": self.shared, "q_encoder": self.q_encoder.to_dict()}
        if not self.shared:
            doc["k_encoder"] = self.k_encoder.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SinkhornTransformerParams":
        q = EncoderParams.from_dict(doc["q_encoder"])
        shared = bool(doc.get("shared", False))
        k = q if shared else EncoderParams.from_dict(doc["k_encoder"])
        return cls(q, k, shared)


def init_params(seed: int, d_in: int, d_out: int, shared: bool = False,
                **encoder_kwargs) -> SinkhornTransformerParams:
    rng = np.random.default_rng(seed)
    q = init_encoder(rng, d_in, d_out, **encoder_kwargs)
    k = q if shared else init_encoder(rng, d_in, d_out, **encoder_kwargs)
    return SinkhornTransformerParams(q, k, shared)


def cost_from_encoders(params: SinkhornTransformerParams, mu: DiscreteMeasure,
                       nu: DiscreteMeasure) -> CostMatrix:
    """``c[i, j] = -<Q(mu, x_i), K(nu, y_j)>``."""
    if mu.dim != params.q_encoder.d_in or nu.dim != params.k_encoder.d_in:
        raise DimensionMismatchError("measure dimension does not match the encoders")
    Qx = encode_atoms(params.q_encoder, mu)
    Ky = encode_atoms(params.k_encoder, nu)
    return CostMatrix(-(Qx @ Ky.T))


def forward(params: SinkhornTransformerParams, mu: DiscreteMeasure, nu: DiscreteMeasure,
            cfg: SinkhornConfig | None = None) -> SinkhornSolution:
    return sinkhorn_solve(cost_from_encoders(params, mu, nu), mu, nu, cfg)


# -- synthetic coupling systems --------------------------------------------

@dataclass(frozen=True, eq=False)
class CouplingSystemSample:
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    target: Coupling

    def __post_init__(self):
        check_marginals(self.target, self.mu, self.nu, tol=1e-10)

    def to_dict(self) -> dict:
        return {"mu": self.mu.to_dict(), "nu": self.nu.to_dict(),
                "target": self.target.to_dict()}

    @classmethod
    def from_dict(cls, doc: dict) -> "CouplingSystemSample":
        return cls(DiscreteMeasure.from_dict(doc["mu"]), DiscreteMeasure.from_dict(doc["nu"]),
                   Coupling.from_dict(doc["target"]))


@dataclass(frozen=True, eq=False)
class Teacher:
    """Smooth feature maps ``g(x) = scale * tanh(A x + c)`` (same form for ``h``)."""

    A: np.ndarray
    c: np.ndarray
    B: np.ndarray
    e: np.ndarray
    scale: float = 1.0

    def g(self, X):
        return self.scale * np.tanh(X @ self.A.T + self.c)

    def h(self, Y):
        return self.scale * np.tanh(Y @ self.B.T + self.e)

    def cost(self, X, Y) -> np.ndarray:
        return -(self.g(X) @ self.h(Y).T)

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, width: int, scale: float = 5.0):
        def mat(r, c):
            return rng.uniform(-2.0, 2.0, size=(r, c))

        return cls(mat(width, d), rng.uniform(-1, 1, width), mat(width, d),
                   rng.uniform(-1, 1, width), scale)


class IdentityTeacher:
    def cost(self, X, Y) -> np.ndarray:
        return -(X @ Y.T)


def synth_coupling_system(family: str, seed: int, n_samples: int = 16, n_range=(3, 8),
                          m_range=(3, 8), dim: int = 2, epsilon: float = 1.0,
                          teacher=None, teacher_width: int = 2, teacher_scale: float = 5.0,
                          block_k: int = 2, cfg: SinkhornConfig | None = None) -> list:
    """Deterministic list of (mu, nu, target) triples for one coupling system.

    Points are uniform in the unit cube and every text is a uniform
    empirical measure.  ``planted-entropic`` targets are Sinkhorn plans for
    the teacher cost; ``block`` applies the block approximation to them.
    """
    if family not in FAMILIES:
        raise InvalidInputError(f"unknown family {family!r}; choose from {FAMILIES}")
    if max(n_range[1], m_range[1]) > MAX_SUPPORT or min(n_range[0], m_range[0]) < 1:
        raise InvalidInputError(f"support sizes must lie in [1, {MAX_SUPPORT}]")
    rng = np.random.default_rng(seed)
    # targets must meet the 1e-10 marginal contract of CouplingSystemSample
    cfg = cfg or SinkhornConfig(epsilon=epsilon, tol=1e-12)
    if family != "product" and teacher is None:
        teacher = Teacher.random(rng, dim, teacher_width, teacher_scale)
    out = []
    for _ in range(n_samples):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        mu = from_tokens(rng.uniform(size=(n, dim)))
        nu = from_tokens(rng.uniform(size=(m, dim)))
        if family == "product":
            target = product_coupling(mu, nu)
        else:
            target = sinkhorn_solve(teacher.cost(mu.support, nu.support), mu, nu, cfg).coupling
            if family == "block":
                target = block_approximation(target, block_k)
        out.append(CouplingSystemSample(mu, nu, target))
    return out


# -- loss and gradients -----------------------------------------------------

def _loss_from_log_plan(log_plan: np.ndarray, target: np.ndarray, kind: str):
    """Loss value and its gradient with respect to log P."""
    if kind == "kl":
        t = target > 0
        val = float(np.sum(target[t] * (np.log(target[t]) - log_plan[t])))
        return val, -target
    if kind == "frobenius":
        P = np.exp(log_plan)
        diff = P - target
        return float(np.sum(diff * diff)), 2.0 * diff * P
    raise InvalidInputError(f"unknown loss kind {kind!r}")


def loss(pred, target: Coupling, kind: str = "kl") -> float:
    """KL(target || pred) or the squared Frobenius distance."""
    P = pred.coupling.mass if isinstance(pred, SinkhornSolution) else (
        pred.mass if isinstance(pred, Coupling) else np.asarray(pred))
    if P.shape != target.mass.shape:
        raise DimensionMismatchError("prediction and target supports differ")
    if kind == "kl":
        return kl_divergence(target.mass, P)
    if kind == "frobenius":
        return float(np.sum((P - target.mass) ** 2))
    raise InvalidInputError(f"unknown loss kind {kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    lr: float = 0.1
    iterations: int = 200
    batch_size: int = 16
    momentum: float = 0.9
    unroll: int = 50
    epsilon: float = 1.0
    loss_kind: str = "kl"
    eval_every: int = 50
    eval_tol: float = 1e-9

    def __post_init__(self):
        if self.unroll < 5:
            raise InvalidInputError("unroll length must be at least 5")
        if not self.lr > 0:
            raise InvalidInputError("learning rate must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidInputError(f"loss kind must be one of {LOSS_KINDS}")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise InvalidInputError("iterations, batch_size and eval_every must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError("momentum must lie in [0, 1)")

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(epsilon=self.epsilon, tol=self.eval_tol)


def _sample_value_and_grad(params: SinkhornTransformerParams, sample: CouplingSystemSample,
                           unroll: int, epsilon: float, kind: str):
    mu, nu = sample.mu, sample.nu
    la, lb = np.log(mu.weights), np.log(nu.weights)
    Qx, qcache = encode_atoms_cached(params.q_encoder, mu.support, la)
    Ky, kcache = encode_atoms_cached(params.k_encoder, nu.support, lb)
    C = -(Qx @ Ky.T)
    tape = sinkhorn_unrolled(C, mu.weights, nu.weights, epsilon, unroll)
    val, d_log_plan = _loss_from_log_plan(tape.log_plan, sample.target.mass, kind)
    dC = sinkhorn_unrolled_vjp(tape, d_log_plan, epsilon)
    gq, _ = encode_atoms_vjp(params.q_encoder, qcache, -dC @ Ky)
    gk, _ = encode_atoms_vjp(params.k_encoder, kcache, -dC.T @ Qx)
    if params.shared:
        grads = [x + y for x, y in zip(gq, gk)]
    else:
        grads = gq + gk
    return val, grads


def _array_names(params: SinkhornTransformerParams) -> list:
    names = []
    encs = [("q", params.q_encoder)] if params.shared else [
        ("q", params.q_encoder), ("k", params.k_encoder)]
    for tag, enc in encs:
        for li, layer in enumerate(enc.layers):
            for hi, _ in enumerate(layer.heads):
                names += [f"{tag}.layer{li}.head{hi}.{p}" for p in "QKVW"]
            mlp = ["W1", "b1", "W2", "b2"] + (["skip"] if layer.mlp.skip is not None else [])
            names += [f"{tag}.layer{li}.mlp.{p}" for p in mlp]
    return names


def batch_loss(params: SinkhornTransformerParams, batch, unroll: int = 50,
               epsilon: float = 1.0, kind: str = "kl") -> float:
    """Mean training loss through the same unrolled solver ``value_and_grad`` uses."""
    total = 0.0
    for s in batch:
        mu, nu = s.mu, s.nu
        C = cost_from_encoders(params, mu, nu).values
        tape = sinkhorn_unrolled(C, mu.weights, nu.weights, epsilon, unroll)
        total += _loss_from_log_plan(tape.log_plan, s.target.mass, kind)[0]
    return total / len(batch)


def value_and_grad(params: SinkhornTransformerParams, batch, unroll: int = 50,
                   epsilon: float = 1.0, kind: str = "kl"):
    """Mean loss over ``batch`` and its gradient as a flat list of arrays.

    Per-sample gradients are reduced in batch order, so the result does not
    depend on how the samples might be scheduled.
    """
    if not batch:
        raise InvalidInputError("empty batch")
    total = 0.0
    acc = None
    for s in batch:
        val, g = _sample_value_and_grad(params, s, unroll, epsilon, kind)
        total += val
        acc = g if acc is None else [x + y for x, y in zip(acc, g)]
    scale = 1.0 / len(batch)
    grads = [g * scale for g in acc]
    for name, g in zip(_array_names(params), grads):
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    return total * scale, grads


def grad(params: SinkhornTransformerParams, batch, cfg: TrainConfig | None = None):
    """Gradient of the mean batch loss, shaped like ``params``."""
    cfg = cfg or TrainConfig()
    _, grads = value_and_grad(params, batch, cfg.unroll, cfg.epsilon, cfg.loss_kind)
    return params.rebuild(grads)


# -- training ---------------------------------------------------------------

def sup_w1(params: SinkhornTransformerParams, samples, cfg: SinkhornConfig | None = None):
    """Largest W1 between model plans and targets over ``samples``."""
    return max(per_sample_w1(params, samples, cfg))


def per_sample_w1(params, samples, cfg: SinkhornConfig | None = None) -> list:
    return [coupling_w1(forward(params, s.mu, s.nu, cfg).coupling, s.target) for s in samples]


def dataset_diameter(samples) -> float:
    return max(support_diameter(s.target) for s in samples)


@dataclass
class TrainResult:
    params: SinkhornTransformerParams
    history: list = field(default_factory=list)  # (iteration, train loss, sup W1)


def train(dataset, params0: SinkhornTransformerParams, tcfg: TrainConfig,
          heldout=None) -> TrainResult:
    """Gradient descent with heavy-ball momentum on the mean unrolled loss.

    The held-out sup-W1 is recorded before the first step and every
    ``eval_every`` steps after it (always including the last step).
    """
    heldout = dataset if heldout is None else heldout
    rng = np.random.default_rng(tcfg.seed)
    params = params0
    arrays = [a.copy() for a in params.arrays()]
    velocity = [np.zeros_like(a) for a in arrays]
    scfg = tcfg.sinkhorn
    init_loss = batch_loss(params, dataset, tcfg.unroll, tcfg.epsilon, tcfg.loss_kind)
    history = [(0, init_loss, sup_w1(params, heldout, scfg))]
    for it in range(1, tcfg.iterations + 1):
        if tcfg.batch_size >= len(dataset):
            batch = dataset
        else:
            idx = rng.choice(len(dataset), size=tcfg.batch_size, replace=False)
            batch = [dataset[i] for i in sorted(idx)]
        last_loss, grads = value_and_grad(params, batch, tcfg.unroll, tcfg.epsilon,
                                          tcfg.loss_kind)
        if not np.isfinite(last_loss) or last_loss > DIVERGENCE_LOSS:
            raise NumericError(f"training diverged at iteration {it} (loss {last_loss:.3e})")
        for a, v, g in zip(arrays, velocity, grads):
            v *= tcfg.momentum
            v -= tcfg.lr * g
            a += v
        params = params.rebuild(arrays)
        if it % tcfg.eval_every == 0 or it == tcfg.iterations:
            history.append((it, last_loss, sup_w1(params, heldout, scfg)))
            log.info("iter %d loss %.3e sup-W1 %.3e", *history[-1])
    return TrainResult(params, history)
