import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sinkhorn_transformer.attention import (AttentionHeadParams, EncoderParams, Layer, MlpParams,
                                            attention_forward, classical_attention_rows,
                                            context_pushforward, encode_atoms,
                                            encode_atoms_cached, encode_atoms_vjp,
                                            encoder_forward, init_encoder, layer_map, mlp_forward,
                                            rebuild, silu, silu_grad, softmax_measure_weights)
from sinkhorn_transformer.errors import DimensionMismatchError, InvalidInputError
from sinkhorn_transformer.measures import DiscreteMeasure, from_tokens, integrate

from conftest import random_measure


def random_head(rng, d, k_h=3, d_v=2):
    return AttentionHeadParams(rng.normal(size=(k_h, d)), rng.normal(size=(k_h, d)),
                               rng.normal(size=(d_v, d)), rng.normal(size=(d, d_v)))


def identity_layer(d):
    zero = AttentionHeadParams(np.zeros((1, d)), np.zeros((1, d)), np.zeros((1, d)),
                               np.zeros((d, 1)))
    return Layer([zero], MlpParams.identity(d))


def brute_attention(heads, mu, x):
    out = np.array(x, dtype=float)
    for h in heads:
        s = [float((h.Q @ x) @ (h.K @ y)) / math.sqrt(h.k_h) for y in mu.support]
        z = sum(a * math.exp(si) for a, si in zip(mu.weights, s))
        acc = np.zeros(h.V.shape[0])
        for a, si, y in zip(mu.weights, s, mu.support):
            acc += a * math.exp(si) / z * (h.V @ y)
        out += h.W @ acc
    return out


class TestSoftmaxWeights:
    def test_zero_query_gives_base_weights(self, rng):
        mu = random_measure(rng, 5, dim=3)
        head = random_head(rng, 3)
        head.Q[:] = 0.0
        # equal up to the rounding of the log/exp round trip
        np.testing.assert_allclose(softmax_measure_weights(head, mu, rng.normal(size=3)),
                                   mu.weights, rtol=1e-15, atol=0)

    def test_single_atom(self, rng):
        head = random_head(rng, 2)
        w = softmax_measure_weights(head, from_tokens([[0.3, 0.4]]), rng.normal(size=2))
        assert w.tolist() == [1.0]

    def test_log3_scores(self):
        # one-dimensional head: s_j = x * y_j with x = 1
        head = AttentionHeadParams([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        mu = from_tokens([[0.0], [math.log(3)]])
        np.testing.assert_allclose(softmax_measure_weights(head, mu, [1.0]), [0.25, 0.75],
                                   atol=1e-15)

    def test_large_scores_stable(self):
        head = AttentionHeadParams([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        mu = from_tokens([[1000.0], [999.0]])
        w = softmax_measure_weights(head, mu, [1.0])
        assert np.all(np.isfinite(w))
        np.testing.assert_allclose(w, [1 / (1 + math.exp(-1)), 1 / (1 + math.e)], atol=1e-15)

    def test_duplicate_atom_equals_merged(self, rng):
        head = random_head(rng, 2)
        pts = rng.uniform(size=(3, 2))
        merged = DiscreteMeasure(pts, [0.2, 0.5, 0.3])
        split = DiscreteMeasure(np.vstack([pts, pts[1]]), [0.2, 0.25, 0.3, 0.25])
        x = rng.normal(size=2)
        w_split = softmax_measure_weights(head, split, x)
        w_merged = softmax_measure_weights(head, merged, x)
        np.testing.assert_allclose([w_split[0], w_split[1] + w_split[3], w_split[2]], w_merged,
                                   atol=1e-12)

    def test_permutation(self, rng):
        head = random_head(rng, 2)
        mu = random_measure(rng, 5)
        perm = rng.permutation(5)
        x = rng.normal(size=2)
        np.testing.assert_allclose(softmax_measure_weights(head, mu.permuted(perm), x),
                                   softmax_measure_weights(head, mu, x)[perm], atol=1e-15)

    def test_dimension_checked(self, rng):
        with pytest.raises(DimensionMismatchError):
            softmax_measure_weights(random_head(rng, 2), random_measure(rng, 3, dim=3),
                                    np.zeros(2))


class TestAttentionForward:
    def test_zero_values_is_residual(self, rng):
        heads = [random_head(rng, 3) for _ in range(2)]
        for h in heads:
            h.V[:] = 0.0
        x = rng.normal(size=3)
        np.testing.assert_array_equal(attention_forward(heads, random_measure(rng, 4, 3), x), x)

    def test_dirac(self, rng):
        head = random_head(rng, 3)
        y, x = rng.normal(size=3), rng.normal(size=3)
        out = attention_forward([head], from_tokens([y]), x)
        np.testing.assert_allclose(out, x + head.W @ head.V @ y, atol=1e-14)

    def test_matches_double_loop(self, rng):
        heads = [random_head(rng, 3), random_head(rng, 3, k_h=2, d_v=4)]
        mu = random_measure(rng, 3, dim=3)
        x = rng.normal(size=3)
        np.testing.assert_allclose(attention_forward(heads, mu, x),
                                   brute_attention(heads, mu, x), atol=1e-12)

    def test_dimension_checked(self, rng):
        with pytest.raises(DimensionMismatchError):
            attention_forward([random_head(rng, 3)], random_measure(rng, 2, 3), np.zeros(2))


class TestClassicalEquivalence:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_equivalence(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        heads = [random_head(rng, d, int(rng.integers(1, 5)), int(rng.integers(1, 5)))
                 for _ in range(int(rng.integers(1, 4)))]
        tokens = rng.normal(size=(n, d))
        mu = from_tokens(tokens)
        classical = classical_attention_rows(heads, tokens)
        for x, row in zip(tokens, classical):
            np.testing.assert_allclose(attention_forward(heads, mu, x), row, rtol=0, atol=1e-12)

    def test_one_token(self, rng):
        heads = [random_head(rng, 2), random_head(rng, 2)]
        x = rng.normal(size=2)
        expected = x + sum(h.W @ h.V @ x for h in heads)
        np.testing.assert_allclose(classical_attention_rows(heads, [x])[0], expected, atol=1e-14)

    def test_duplicated_tokens(self, rng):
        heads = [random_head(rng, 2)]
        x = rng.normal(size=2)
        np.testing.assert_allclose(classical_attention_rows(heads, [x, x])[0],
                                   classical_attention_rows(heads, [x])[0], atol=1e-15)

    def test_empty(self, rng):
        with pytest.raises(InvalidInputError):
            classical_attention_rows([random_head(rng, 2)], np.zeros((0, 2)))


class TestMlp:
    def test_identity(self, rng):
        Z = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(mlp_forward(MlpParams.identity(3), Z), Z)

    def test_formula(self, rng):
        mlp = MlpParams(rng.normal(size=(5, 3)), rng.normal(size=5), rng.normal(size=(2, 5)),
                        rng.normal(size=2))
        z = rng.normal(size=3)
        h = mlp.W1 @ z + mlp.b1
        expected = mlp.W2 @ (h / (1 + np.exp(-h))) + mlp.b2
        np.testing.assert_allclose(mlp_forward(mlp, z[None, :])[0], expected, atol=1e-14)

    def test_silu_derivative(self):
        x = np.linspace(-6, 6, 25)
        h = 1e-6
        np.testing.assert_allclose(silu_grad(x), (silu(x + h) - silu(x - h)) / (2 * h),
                                   atol=1e-9)

    def test_shape_validation(self):
        with pytest.raises(DimensionMismatchError):
            MlpParams(np.zeros((4, 3)), np.zeros(5), np.zeros((2, 4)), np.zeros(2))


class TestPushforward:
    def test_identity_layer(self, rng):
        mu = random_measure(rng, 4, 3)
        out = context_pushforward(identity_layer(3), mu)
        np.testing.assert_array_equal(out.support, mu.support)
        np.testing.assert_array_equal(out.weights, mu.weights)

    def test_weights_preserved(self, rng):
        enc = init_encoder(rng, 2, 2)
        mu = random_measure(rng, 5)
        assert np.array_equal(context_pushforward(enc.layers[0], mu).weights, mu.weights)

    def test_collision_matches_merged_atom(self, rng):
        # a layer whose MLP forgets its input sends every atom to b2
        layer = Layer([random_head(rng, 2)],
                      MlpParams(np.zeros((1, 2)), np.zeros(1), np.zeros((2, 1)),
                                np.array([0.3, -0.7])))
        mu = random_measure(rng, 3)
        pushed = context_pushforward(layer, mu)
        merged = DiscreteMeasure([[0.3, -0.7]], [1.0])
        f = lambda p: np.cos(p).sum()
        assert integrate(pushed, f) == pytest.approx(integrate(merged, f), abs=1e-15)


class TestEncoder:
    def test_identity_single_layer(self, rng):
        enc = EncoderParams([identity_layer(2)])
        x = rng.normal(size=2)
        np.testing.assert_array_equal(encoder_forward(enc, random_measure(rng, 3), x), x)

    def test_identity_stack(self, rng):
        enc = EncoderParams([identity_layer(3) for _ in range(4)])
        x = rng.normal(size=3)
        np.testing.assert_array_equal(encoder_forward(enc, random_measure(rng, 3, 3), x), x)

    def test_two_layer_unrolled(self, rng):
        enc = init_encoder(rng, 2, 3, n_layers=2, n_heads=2, skip=True)
        mu = random_measure(rng, 3)
        l1, l2 = enc.layers
        # explicit simultaneous update: build mu_1 from the untouched atoms first
        atoms1 = np.stack([mlp_forward(l1.mlp, attention_forward(l1.heads, mu, y)[None, :])[0]
                           for y in mu.support])
        mu1 = DiscreteMeasure(atoms1, mu.weights)
        x = rng.normal(size=2)
        x1 = mlp_forward(l1.mlp, attention_forward(l1.heads, mu, x)[None, :])[0]
        x2 = mlp_forward(l2.mlp, attention_forward(l2.heads, mu1, x1)[None, :])[0]
        np.testing.assert_allclose(encoder_forward(enc, mu, x), x2, atol=1e-12)

    def test_encode_atoms_matches_pointwise(self, rng):
        enc = init_encoder(rng, 2, 4, n_layers=3, n_heads=2)
        mu = random_measure(rng, 5)
        rows = np.stack([encoder_forward(enc, mu, x) for x in mu.support])
        np.testing.assert_allclose(encode_atoms(enc, mu), rows, atol=1e-12)

    def test_permutation_equivariance(self, rng):
        enc = init_encoder(rng, 2, 3, n_layers=2, n_heads=2)
        mu = random_measure(rng, 6)
        perm = rng.permutation(6)
        np.testing.assert_allclose(encode_atoms(enc, mu.permuted(perm)),
                                   encode_atoms(enc, mu)[perm], atol=1e-12)

    def test_continuity(self, rng):
        enc = init_encoder(rng, 2, 3, n_layers=2, n_heads=2)
        mu = random_measure(rng, 4)
        base = encode_atoms(enc, mu)
        direction = rng.normal(size=2)
        deltas = []
        for h in (1e-3, 1e-4):
            support = mu.support.copy()
            support[0] += h * direction
            moved = encode_atoms(enc, DiscreteMeasure(support, mu.weights))
            deltas.append(np.abs(moved - base).max())
        assert 5 <= deltas[0] / deltas[1] <= 20

    def test_dimension_chain(self, rng):
        a = init_encoder(rng, 2, 3)
        b = init_encoder(rng, 4, 2)
        with pytest.raises(DimensionMismatchError):
            EncoderParams(a.layers + b.layers)
        with pytest.raises(InvalidInputError):
            EncoderParams([])
        with pytest.raises(DimensionMismatchError):
            encoder_forward(a, random_measure(rng, 2), np.zeros(3))

    def test_init_range(self, rng):
        enc = init_encoder(rng, 4, 2, hidden=9)
        W1 = enc.layers[0].mlp.W1
        assert np.abs(W1).max() <= 1 / math.sqrt(4)
        assert np.abs(enc.layers[0].mlp.W2).max() <= 1 / 3

    def test_json_roundtrip(self, rng):
        enc = init_encoder(rng, 2, 3, n_layers=2, n_heads=2, skip=True)
        doc = json.loads(json.dumps(enc.to_dict()))
        back = EncoderParams.from_dict(doc)
        for a, b in zip(enc.arrays(), back.arrays()):
            assert np.array_equal(a, b)

    def test_rebuild(self, rng):
        enc = init_encoder(rng, 2, 2, n_layers=2)
        arrays = [a + 1.0 for a in enc.arrays()]
        for a, b in zip(rebuild(enc, arrays).arrays(), arrays):
            assert np.array_equal(a, b)


class TestEncoderGradient:
    @pytest.mark.parametrize("seed", range(10))
    def test_vjp_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 4))
        enc = init_encoder(rng, d, int(rng.integers(1, 4)), n_layers=int(rng.integers(1, 3)),
                           n_heads=int(rng.integers(1, 3)), k_h=2, hidden=4,
                           skip=bool(seed % 2))
        mu = random_measure(rng, int(rng.integers(1, 5)), dim=d)
        log_w = np.log(mu.weights)
        R = rng.normal(size=(mu.n, enc.d_out))

        def f(arrays, X):
            return float(np.sum(R * encode_atoms_cached(rebuild(enc, arrays), X, log_w)[0]))

        out, caches = encode_atoms_cached(enc, mu.support, log_w)
        grads, dX = encode_atoms_vjp(enc, caches, R)
        arrays = [a.copy() for a in enc.arrays()]
        step = 1e-5
        for k, a in enumerate(arrays):
            for idx in np.ndindex(a.shape):
                plus = [b.copy() for b in arrays]
                minus = [b.copy() for b in arrays]
                plus[k][idx] += step
                minus[k][idx] -= step
                fd = (f(plus, mu.support) - f(minus, mu.support)) / (2 * step)
                ad = grads[k][idx]
                assert abs(ad - fd) / max(1e-6, abs(ad) + abs(fd)) <= 1e-4
        for idx in np.ndindex(mu.support.shape):
            Xp, Xm = mu.support.copy(), mu.support.copy()
            Xp[idx] += step
            Xm[idx] -= step
            fd = (f(arrays, Xp) - f(arrays, Xm)) / (2 * step)
            assert abs(dX[idx] - fd) / max(1e-6, abs(dX[idx]) + abs(fd)) <= 1e-4
