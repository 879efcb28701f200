"""Measure-valued multi-head attention and transformer encoders.

Everything is batched over query points: a layer maps an ``(p, d)`` array of
queries against the atoms of a measure.  Encoders push the whole measure
through each layer at once, so every atom at layer ``l`` attends to the
measure produced by layer ``l - 1``.

The reverse pass (``encode_atoms_vjp``) is written by hand against the same
cached intermediates the forward pass produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, InvalidInputError
from .measures import DiscreteMeasure


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


@dataclass(eq=False)
class AttentionHeadParams:
    Q: np.ndarray  # (k_h, d)
    K: np.ndarray  # (k_h, d)
    V: np.ndarray  # (d_v, d)
    W: np.ndarray  # (d, d_v)

    def __post_init__(self):
        self.Q, self.K, self.V, self.W = map(_arr, (self.Q, self.K, self.V, self.W))
        if self.Q.shape != self.K.shape:
            raise DimensionMismatchError("Q and K must have the same shape")
        d = self.Q.shape[1]
        if self.V.shape[1] != d or self.W.shape != (d, self.V.shape[0]):
            raise DimensionMismatchError(
                f"head shapes Q{self.Q.shape} V{self.V.shape} W{self.W.shape} disagree")
        for m in (self.Q, self.K, self.V, self.W):
            if not np.all(np.isfinite(m)):
                raise InvalidInputError("head parameters must be finite")

    @property
    def k_h(self) -> int:
        return self.Q.shape[0]

    @property
    def dim(self) -> int:
        return self.Q.shape[1]

    def arrays(self):
        return [self.Q, self.K, self.V, self.W]


@dataclass(eq=False)
class MlpParams:
    """``x -> W2 silu(W1 x + b1) + b2 (+ skip x)``; the skip matrix is optional."""

    W1: np.ndarray  # (h, d_in)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (d_out, h)
    b2: np.ndarray  # (d_out,)
    skip: np.ndarray | None = None  # (d_out, d_in)

    def __post_init__(self):
        self.W1, self.b1, self.W2, self.b2 = map(_arr, (self.W1, self.b1, self.W2, self.b2))
        if self.skip is not None:
            self.skip = _arr(self.skip)
        h, d_in = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[1] != h:
            raise DimensionMismatchError("hidden width disagrees across MLP weights")
        if self.b2.shape != (self.W2.shape[0],):
            raise DimensionMismatchError("output bias has the wrong length")
        if self.skip is not None and self.skip.shape != (self.d_out, d_in):
            raise DimensionMismatchError("skip matrix has the wrong shape")
        for m in self.arrays():
            if not np.all(np.isfinite(m)):
                raise InvalidInputError("MLP parameters must be finite")

    @property
    def d_in(self) -> int:
        return self.W1.shape[1]

    @property
    def d_out(self) -> int:
        return self.W2.shape[0]

    @classmethod
    def identity(cls, d: int) -> "MlpParams":
        return cls(np.zeros((0, d)), np.zeros(0), np.zeros((d, 0)), np.zeros(d), np.eye(d))

    def arrays(self):
        out = [self.W1, self.b1, self.W2, self.b2]
        return out if self.skip is None else out + [self.skip]


@dataclass(eq=False)
class Layer:
    heads: list
    mlp: MlpParams

    def __post_init__(self):
        for h in self.heads:
            if h.dim != self.mlp.d_in:
                raise DimensionMismatchError(
                    f"head dimension {h.dim} != MLP input {self.mlp.d_in}")

    @property
    def d_in(self) -> int:
        return self.mlp.d_in

    @property
    def d_out(self) -> int:
        return self.mlp.d_out

    def arrays(self):
        out = []
        for h in self.heads:
            out.extend(h.arrays())
        return out + self.mlp.arrays()


@dataclass(eq=False)
class EncoderParams:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise InvalidInputError("an encoder needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise DimensionMismatchError(
                    f"layer output {prev.d_out} does not feed layer input {nxt.d_in}")

    @property
    def d_in(self) -> int:
        return self.layers[0].d_in

    @property
    def d_out(self) -> int:
        return self.layers[-1].d_out

    def arrays(self):
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        return out

    def to_dict(self) -> dict:
        def mat(a):
            return {"shape": list(a.shape), "data": a.ravel().tolist()}

        layers = []
        for layer in self.layers:
            mlp = layer.mlp
            layers.append({
                "heads": [{k: mat(getattr(h, k)) for k in "QKVW"} for h in layer.heads],
                "mlp": {k: mat(getattr(mlp, k)) for k in ("W1", "b1", "W2", "b2")}
                | ({"skip": mat(mlp.skip)} if mlp.skip is not None else {}),
            })
        return {"layers": layers}

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderParams":
        def mat(m):
            return np.asarray(m["data"], dtype=np.float64).reshape(m["shape"])

        layers = []
        for ld in doc["layers"]:
            heads = [AttentionHeadParams(*(mat(h[k]) for k in "QKVW")) for h in ld["heads"]]
            m = ld["mlp"]
            mlp = MlpParams(mat(m["W1"]), mat(m["b1"]), mat(m["W2"]), mat(m["b2"]),
                            mat(m["skip"]) if "skip" in m else None)
            layers.append(Layer(heads, mlp))
        return cls(layers)


def rebuild(template: EncoderParams, arrays) -> EncoderParams:
    """Encoder with ``template``'s structure and the given flat list of arrays."""
    it = iter(arrays)
    layers = []
    for layer in template.layers:
        heads = [AttentionHeadParams(next(it), next(it), next(it), next(it))
                 for _ in layer.heads]
        W1, b1, W2, b2 = next(it), next(it), next(it), next(it)
        skip = next(it) if layer.mlp.skip is not None else None
        layers.append(Layer(heads, MlpParams(W1, b1, W2, b2, skip)))
    return EncoderParams(layers)


def init_encoder(rng: np.random.Generator, d_in: int, d_out: int, n_layers: int = 1,
                 n_heads: int = 1, k_h: int = 4, d_v: int | None = None,
                 hidden: int = 16, skip: bool = False) -> EncoderParams:
    """Random encoder; entries uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    Internal widths stay at ``d_in`` so the residual connections line up;
    only the last MLP maps to ``d_out``.
    """
    d_v = d_in if d_v is None else d_v

    def u(rows, cols):
        s = 1.0 / math.sqrt(cols) if cols else 0.0
        return rng.uniform(-s, s, size=(rows, cols))

    layers = []
    for ell in range(n_layers):
        out = d_out if ell == n_layers - 1 else d_in
        heads = [AttentionHeadParams(u(k_h, d_in), u(k_h, d_in), u(d_v, d_in), u(d_in, d_v))
                 for _ in range(n_heads)]
        mlp = MlpParams(u(hidden, d_in), u(hidden, d_in)[:, 0], u(out, hidden),
                        u(out, hidden)[:, 0], u(out, d_in) if skip else None)
        layers.append(Layer(heads, mlp))
    return EncoderParams(layers)


# -- forward ----------------------------------------------------------------

def _scores(head: AttentionHeadParams, Xq: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return (Xq @ head.Q.T) @ (Y @ head.K.T).T / math.sqrt(head.k_h)


def _measure_softmax(scores: np.ndarray, log_w: np.ndarray) -> np.ndarray:
    z = scores + log_w[None, :]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_weights(mu: DiscreteMeasure) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(mu.weights)


def softmax_measure_weights(head: AttentionHeadParams, mu: DiscreteMeasure, x) -> np.ndarray:
    """Attention weights of the query ``x`` over the atoms of ``mu``.

    These are ``a_j exp(s_j) / sum_i a_i exp(s_i)``, i.e. the softmax density
    multiplied by the base weights, so they sum to one.
    """
    x = _arr(x)
    if x.shape != (head.dim,) or mu.dim != head.dim:
        raise DimensionMismatchError("query, head and measure dimensions disagree")
    return _measure_softmax(_scores(head, x[None, :], mu.support), _log_weights(mu))[0]


def _attend(heads, Xq: np.ndarray, Y: np.ndarray, log_w: np.ndarray, cache=None):
    Z = Xq.copy()
    for head in heads:
        S = _scores(head, Xq, Y)
        P = _measure_softmax(S, log_w)
        VY = Y @ head.V.T
        O = P @ VY
        Z += O @ head.W.T
        if cache is not None:
            cache.append((P, VY, O))
    return Z


def attention_forward(heads, mu: DiscreteMeasure, x) -> np.ndarray:
    """``x + sum_h W_h sum_j w^h_j V_h y_j`` for a single query point."""
    x = _arr(x)
    for h in heads:
        if h.dim != x.shape[0] or h.dim != mu.dim:
            raise DimensionMismatchError("head output must match the query dimension")
    return _attend(heads, x[None, :], mu.support, _log_weights(mu))[0]


def classical_attention_rows(heads, tokens) -> np.ndarray:
    """Standard token attention with a plain row softmax (no measure weights)."""
    if len(tokens) == 0:
        raise InvalidInputError("need at least one token")
    X = np.stack([_arr(t) for t in tokens])
    out = X.copy()
    for h in heads:
        A = (X @ h.Q.T) @ (X @ h.K.T).T / math.sqrt(h.k_h)
        A = np.exp(A - A.max(axis=1, keepdims=True))
        A /= A.sum(axis=1, keepdims=True)
        out += (A @ (X @ h.V.T)) @ h.W.T
    return out


def mlp_forward(mlp: MlpParams, Z: np.ndarray) -> np.ndarray:
    out = silu(Z @ mlp.W1.T + mlp.b1) @ mlp.W2.T + mlp.b2
    if mlp.skip is not None:
        out = out + Z @ mlp.skip.T
    return out


def layer_map(layer: Layer, mu: DiscreteMeasure, X) -> np.ndarray:
    """Apply ``MLP(attention(mu, x))`` to each row of ``X``."""
    X = np.atleast_2d(_arr(X))
    if X.shape[1] != layer.d_in or mu.dim != layer.d_in:
        raise DimensionMismatchError("layer input dimension mismatch")
    return mlp_forward(layer.mlp, _attend(layer.heads, X, mu.support, _log_weights(mu)))


def context_pushforward(layer: Layer, mu: DiscreteMeasure) -> DiscreteMeasure:
    """Image of ``mu`` under ``x -> layer(mu, x)``; weights are carried over."""
    return DiscreteMeasure(layer_map(layer, mu, mu.support), mu.weights)


def encoder_forward(enc: EncoderParams, mu: DiscreteMeasure, x) -> np.ndarray:
    """Run one point through the encoder, advancing the measure in lockstep."""
    x = _arr(x)
    if x.shape != (enc.d_in,):
        raise DimensionMismatchError(f"point has dimension {x.shape}, encoder expects {enc.d_in}")
    for layer in enc.layers:
        x = layer_map(layer, mu, x)[0]
        mu = context_pushforward(layer, mu)
    return x


def encode_atoms(enc: EncoderParams, mu: DiscreteMeasure) -> np.ndarray:
    """Encoder output at every atom of ``mu`` (rows follow atom order)."""
    return encode_atoms_cached(enc, mu.support, _log_weights(mu))[0]


# -- reverse pass -----------------------------------------------------------

def encode_atoms_cached(enc: EncoderParams, X: np.ndarray, log_w: np.ndarray):
    if X.shape[1] != enc.d_in:
        raise DimensionMismatchError("support dimension does not match the encoder")
    caches = []
    for layer in enc.layers:
        att = []
        Z = _attend(layer.heads, X, X, log_w, att)
        H = Z @ layer.mlp.W1.T + layer.mlp.b1
        A = silu(H)
        out = A @ layer.mlp.W2.T + layer.mlp.b2
        if layer.mlp.skip is not None:
            out = out + Z @ layer.mlp.skip.T
        caches.append((X, att, Z, H, A))
        X = out
    return X, caches


def encode_atoms_vjp(enc: EncoderParams, caches, d_out: np.ndarray):
    """Gradients of a scalar w.r.t. every array in ``enc.arrays()`` and the atoms."""
    grads_per_layer = []
    dX = d_out
    for layer, (X, att, Z, H, A) in zip(reversed(enc.layers), reversed(caches)):
        mlp = layer.mlp
        dW2 = dX.T @ A
        db2 = dX.sum(axis=0)
        dH = (dX @ mlp.W2) * silu_grad(H)
        dW1 = dH.T @ Z
        db1 = dH.sum(axis=0)
        dZ = dH @ mlp.W1
        mlp_grads = [dW1, db1, dW2, db2]
        if mlp.skip is not None:
            mlp_grads.append(dX.T @ Z)
            dZ = dZ + dX @ mlp.skip

        d_in = dZ.copy()  # residual path; X plays both the query and key role
        head_grads = []
        for head, (P, VY, O) in zip(layer.heads, att):
            dO = dZ @ head.W
            dW = dZ.T @ O
            dVY = P.T @ dO
            dV = dVY.T @ X
            d_in += dVY @ head.V
            dP = dO @ VY.T
            dS = P * (dP - np.sum(dP * P, axis=1, keepdims=True)) / math.sqrt(head.k_h)
            QX = X @ head.Q.T
            KY = X @ head.K.T
            dQX = dS @ KY
            dKY = dS.T @ QX
            dQ = dQX.T @ X
            dK = dKY.T @ X
            d_in += dQX @ head.Q + dKY @ head.K
            head_grads.append([dQ, dK, dV, dW])
        flat = [g for hg in head_grads for g in hg] + mlp_grads
        grads_per_layer.append(flat)
        dX = d_in
    grads = [g for layer_grads in reversed(grads_per_layer) for g in layer_grads]
    return grads, dX
