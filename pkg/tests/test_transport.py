import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sinkhorn_transformer.errors import (ConvergenceError, DimensionMismatchError,
                                         InvalidInputError, NumericError)
from sinkhorn_transformer.measures import (Coupling, DiscreteMeasure, marginals,
                                           product_coupling)
from sinkhorn_transformer.transport import (CostMatrix, SinkhornConfig, entropic_objective,
                                            factorization_residual, kl_divergence,
                                            lipschitz_probe, logsumexp, sinkhorn_solve,
                                            sinkhorn_unrolled, sinkhorn_unrolled_vjp)

from conftest import random_measure

HALF = DiscreteMeasure([[0.0], [1.0]], [0.5, 0.5])


def feasible_perturbation(rng, pi, scale):
    """Random plan with the marginals of ``pi``, obtained by adding zero-sum 2x2 cycles."""
    mass = pi.mass.copy()
    n, m = mass.shape
    for _ in range(10):
        i, k = rng.choice(n, 2, replace=False)
        j, l = rng.choice(m, 2, replace=False)
        t = rng.uniform(-scale, scale)
        t = np.clip(t, -min(mass[i, j], mass[k, l]), min(mass[i, l], mass[k, j]))
        mass[i, j] += t
        mass[k, l] += t
        mass[i, l] -= t
        mass[k, j] -= t
    return pi.with_mass(np.maximum(mass, 0.0))


class TestSinkhornSolve:
    def test_zero_cost_uniform(self):
        sol = sinkhorn_solve(np.zeros((2, 2)), HALF, HALF)
        np.testing.assert_allclose(sol.mass, 0.25, atol=1e-15)
        uv = np.outer(sol.u, sol.v)
        assert np.ptp(uv) <= 1e-12

    def test_single_row_forced(self, rng):
        mu = DiscreteMeasure([[0.0]], [1.0])
        nu = DiscreteMeasure([[0.0], [1.0]], [0.3, 0.7])
        sol = sinkhorn_solve(rng.normal(size=(1, 2)), mu, nu)
        np.testing.assert_allclose(sol.mass, [[0.3, 0.7]], atol=1e-12)

    def test_planted_two_by_two(self):
        P = np.array([[0.4, 0.1], [0.1, 0.4]])
        rho = P / 0.25
        eps = 1.0
        c = -eps * np.log(rho)
        sol = sinkhorn_solve(c, HALF, HALF, SinkhornConfig(epsilon=eps, tol=1e-12))
        np.testing.assert_allclose(sol.mass, P, atol=1e-8)
        # J(gamma') - J(gamma) = eps KL(gamma' || gamma) >= 0 over a grid of feasible plans
        ref = np.full((2, 2), 0.25)
        gamma = Coupling(HALF.support, HALF.support, P)
        j0 = entropic_objective(gamma, c, eps, ref)
        for t in np.linspace(-0.099, 0.399, 41):
            g = np.array([[0.4 - t, 0.1 + t], [0.1 + t, 0.4 - t]])
            jg = entropic_objective(g, c, eps, ref)
            assert jg - j0 == pytest.approx(eps * kl_divergence(g, P), abs=1e-12)
            assert jg >= j0 - 1e-15

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 12))
    def test_contract(self, seed, n, m):
        rng = np.random.default_rng(seed)
        mu, nu = random_measure(rng, n), random_measure(rng, m)
        c = rng.uniform(-5, 5, size=(n, m))
        sol = sinkhorn_solve(c, mu, nu)
        row, col = marginals(sol.coupling)
        assert np.abs(row - mu.weights).sum() <= 1e-15
        assert np.abs(col - nu.weights).sum() <= 1e-9
        assert sol.final_violation <= 1e-9
        assert factorization_residual(sol, c, mu, nu, 1.0) <= 1e-8
        assert np.all(sol.u > 0) and np.all(sol.v > 0)

    def test_factorization_in_potentials(self, rng):
        mu, nu = random_measure(rng, 4), random_measure(rng, 5)
        c = rng.normal(size=(4, 5))
        eps = 0.7
        sol = sinkhorn_solve(c, mu, nu, SinkhornConfig(epsilon=eps))
        model = sol.u[:, None] * np.exp(-c / eps) * sol.v[None, :] * np.outer(mu.weights,
                                                                              nu.weights)
        np.testing.assert_allclose(sol.mass, model, rtol=1e-8)

    def test_zero_cost_law(self, rng):
        mu, nu = random_measure(rng, 7), random_measure(rng, 3)
        sol = sinkhorn_solve(np.zeros((7, 3)), mu, nu)
        np.testing.assert_allclose(sol.mass, product_coupling(mu, nu).mass, atol=1e-10)

    def test_shift_invariance(self, rng):
        mu, nu = random_measure(rng, 5), random_measure(rng, 4)
        c = rng.normal(size=(5, 4))
        s1 = sinkhorn_solve(c, mu, nu)
        s2 = sinkhorn_solve(c + 17.5, mu, nu)
        np.testing.assert_allclose(s1.mass, s2.mass, atol=1e-8)

    def test_optimality_against_feasible_perturbations(self, rng):
        mu, nu = random_measure(rng, 5), random_measure(rng, 6)
        c = rng.uniform(-2, 2, size=(5, 6))
        sol = sinkhorn_solve(c, mu, nu, SinkhornConfig(tol=1e-13))
        ref = np.outer(mu.weights, nu.weights)
        best = entropic_objective(sol.coupling, c, 1.0, ref)
        for _ in range(50):
            other = feasible_perturbation(rng, sol.coupling, 0.02)
            assert entropic_objective(other, c, 1.0, ref) >= best - 1e-9

    def test_deterministic(self, rng):
        mu, nu = random_measure(rng, 6), random_measure(rng, 6)
        c = rng.normal(size=(6, 6))
        assert np.array_equal(sinkhorn_solve(c, mu, nu).mass, sinkhorn_solve(c, mu, nu).mass)

    def test_plain_mode_agrees_on_benign_costs(self, rng):
        mu, nu = random_measure(rng, 4), random_measure(rng, 5)
        c = rng.uniform(-1, 1, size=(4, 5))
        a = sinkhorn_solve(c, mu, nu, SinkhornConfig(tol=1e-12))
        b = sinkhorn_solve(c, mu, nu, SinkhornConfig(tol=1e-12, log_domain=False))
        np.testing.assert_allclose(a.mass, b.mass, atol=1e-12)

    def test_plain_mode_overflow(self, rng):
        mu, nu = random_measure(rng, 3), random_measure(rng, 3)
        # separable cost: the plan is the product, but exp(-c) leaves double range
        c = np.add.outer([-900.0, 0.0, 900.0], [0.0, 1.0, -2.0])
        with pytest.raises(NumericError, match="log_domain"):
            sinkhorn_solve(c, mu, nu, SinkhornConfig(log_domain=False))
        sol = sinkhorn_solve(c, mu, nu, SinkhornConfig(epsilon=1.0))
        np.testing.assert_allclose(sol.mass, product_coupling(mu, nu).mass, atol=1e-12)

    def test_small_epsilon_log_domain(self, rng):
        mu, nu = random_measure(rng, 6), random_measure(rng, 6)
        c = rng.uniform(0, 1, size=(6, 6))
        sol = sinkhorn_solve(c, mu, nu, SinkhornConfig(epsilon=1e-3, max_iters=200_000))
        assert sol.final_violation <= 1e-9

    def test_non_convergence(self, rng):
        mu, nu = random_measure(rng, 4), random_measure(rng, 4)
        c = rng.uniform(0, 1, size=(4, 4))
        with pytest.raises(ConvergenceError) as info:
            sinkhorn_solve(c, mu, nu, SinkhornConfig(epsilon=0.01, max_iters=2, tol=1e-12))
        assert info.value.final_violation > 1e-12
        assert info.value.iters == 2

    def test_zero_weight_rejected(self):
        mu = DiscreteMeasure([[0.0], [1.0]], [1.0, 0.0])
        with pytest.raises(InvalidInputError):
            sinkhorn_solve(np.zeros((2, 2)), mu, HALF)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            sinkhorn_solve(np.zeros((3, 2)), HALF, HALF)

    @pytest.mark.parametrize("kwargs", [{"epsilon": 0.0}, {"tol": -1.0}, {"max_iters": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(InvalidInputError):
            SinkhornConfig(**kwargs)


class TestCostMatrix:
    def test_bound_defaults_to_max_abs(self):
        assert CostMatrix([[1.0, -3.0]]).bound == 3.0

    def test_bound_enforced(self):
        with pytest.raises(InvalidInputError):
            CostMatrix([[1.0, -3.0]], bound=2.0)

    def test_finite(self):
        with pytest.raises(NumericError):
            CostMatrix([[np.nan]])


class TestObjectives:
    def test_kl_self(self, rng):
        p = rng.uniform(size=(3, 3))
        assert kl_divergence(p / p.sum(), p / p.sum()) == 0.0

    def test_kl_ln2(self):
        p = np.array([[0.5, 0.0], [0.0, 0.5]])
        assert kl_divergence(p, np.full((2, 2), 0.25)) == pytest.approx(np.log(2), abs=1e-15)

    def test_kl_infinite(self):
        assert kl_divergence(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])) == np.inf

    def test_objective_at_reference(self, rng):
        mu, nu = random_measure(rng, 3), random_measure(rng, 4)
        ref = product_coupling(mu, nu)
        assert entropic_objective(ref, np.zeros((3, 4)), 1.0, ref) == 0.0
        c = rng.normal(size=(3, 4))
        assert entropic_objective(ref, c, 0.3, ref) == pytest.approx(np.sum(c * ref.mass),
                                                                     abs=1e-15)

    def test_objective_infinite_off_support(self):
        pi = np.array([[0.5, 0.5]])
        ref = np.array([[1.0, 0.0]])
        assert entropic_objective(pi, np.zeros((1, 2)), 1.0, ref) == np.inf

    def test_representation_identity(self, rng):
        # with c = -eps ln rho, J(g') - J(g) = eps KL(g' || g) for feasible g'
        mu, nu = random_measure(rng, 4), random_measure(rng, 3)
        eps = 0.5
        rho = np.exp(rng.uniform(-1, 1, size=(4, 3)))
        gamma = sinkhorn_solve(-np.log(rho), mu, nu, SinkhornConfig(tol=1e-14)).coupling
        c = -eps * np.log(gamma.mass / np.outer(mu.weights, nu.weights))
        ref = np.outer(mu.weights, nu.weights)
        j0 = entropic_objective(gamma, c, eps, ref)
        for _ in range(10):
            g2 = feasible_perturbation(rng, gamma, 0.01)
            lhs = entropic_objective(g2, c, eps, ref) - j0
            assert lhs == pytest.approx(eps * kl_divergence(g2, gamma), abs=1e-10)

    def test_logsumexp_stable(self):
        z = np.array([[1000.0, 1000.0], [-1000.0, -1000.0]])
        np.testing.assert_allclose(logsumexp(z, axis=1), [1000 + np.log(2), -1000 + np.log(2)])


class TestLipschitzProbe:
    def test_constant_shift_moves_nothing(self, rng):
        mu, nu = random_measure(rng, 5), random_measure(rng, 5)
        c = rng.uniform(-2, 2, size=(5, 5))
        ratio, w1, gap = lipschitz_probe(c, c + 0.8, mu, nu)
        assert w1 <= 1e-8 and gap == pytest.approx(0.8)

    def test_zero_gap_guard(self, rng):
        mu = random_measure(rng, 3)
        c = rng.normal(size=(3, 3))
        with pytest.raises(InvalidInputError):
            lipschitz_probe(c, c, mu, mu)

    def test_ratio_finite(self, rng):
        mu, nu = random_measure(rng, 5), random_measure(rng, 5)
        ratios = [lipschitz_probe(rng.uniform(-2, 2, (5, 5)), rng.uniform(-2, 2, (5, 5)),
                                  mu, nu)[0] for _ in range(20)]
        assert np.all(np.isfinite(ratios)) and max(ratios) < 10


class TestUnrolled:
    def test_converges_to_solver(self, rng):
        mu, nu = random_measure(rng, 4), random_measure(rng, 5)
        c = rng.uniform(-1, 1, size=(4, 5))
        tape = sinkhorn_unrolled(c, mu.weights, nu.weights, 1.0, 200)
        ref = sinkhorn_solve(c, mu, nu, SinkhornConfig(tol=1e-13))
        np.testing.assert_allclose(np.exp(tape.log_plan), ref.mass, atol=1e-12)

    def test_row_marginal_exact(self, rng):
        mu, nu = random_measure(rng, 4), random_measure(rng, 3)
        tape = sinkhorn_unrolled(rng.normal(size=(4, 3)), mu.weights, nu.weights, 1.0, 5)
        np.testing.assert_allclose(np.exp(tape.log_plan).sum(axis=1), mu.weights, atol=1e-15)

    def test_vjp_matches_finite_differences(self, rng):
        mu, nu = random_measure(rng, 3), random_measure(rng, 4)
        C = rng.normal(size=(3, 4))
        W = rng.normal(size=(3, 4))
        eps, T = 0.8, 7

        def f(C):
            return float(np.sum(W * sinkhorn_unrolled(C, mu.weights, nu.weights, eps, T).log_plan))

        tape = sinkhorn_unrolled(C, mu.weights, nu.weights, eps, T)
        dC = sinkhorn_unrolled_vjp(tape, W, eps)
        h = 1e-6
        for i in range(3):
            for j in range(4):
                E = np.zeros_like(C)
                E[i, j] = h
                fd = (f(C + E) - f(C - E)) / (2 * h)
                assert dC[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-8)
