"""Discrete UOT: primal value, Sinkhorn vs brute force, semi-dual weak duality."""

import time

import numpy as np
import pytest

from uotlab.cost import EntropyFn
from uotlab.oracle import (ConvergenceError, DiscreteMeasure, TransportPlan,
                           entropic_primal_value, marginal_deviation, random_instance,
                           semidual_value, solve_uot_bruteforce, solve_uot_sinkhorn,
                           squared_euclidean_cost, uot_primal_value)

KL = EntropyFn("kl")


def _instances(n=50, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m, k = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        out.append(random_instance(rng, m, k))
    return out


class TestMeasure:
    def test_lengths_match(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((3, 2)), [1.0, 1.0])

    def test_needs_positive_mass(self):
        with pytest.raises(ValueError):
            DiscreteMeasure(np.zeros((2, 2)), [0.0, 0.0])

    def test_cost_matrix(self):
        c = squared_euclidean_cost([[0, 0], [1, 1]], [[1, 0]])
        np.testing.assert_array_equal(c, [[1.0], [1.0]])


class TestPrimalValue:
    def test_exact_marginals_zero_cost(self):
        pi = np.array([[0.2, 0.3], [0.1, 0.4]])
        v = uot_primal_value(pi, np.zeros((2, 2)), pi.sum(1), pi.sum(0), KL, KL)
        assert v == pytest.approx(0.0, abs=1e-15)

    def test_one_by_one(self):
        v = uot_primal_value(TransportPlan(np.array([[1.0]])), np.array([[3.0]]), [1.0], [1.0], KL, KL)
        assert v == pytest.approx(3.0)

    def test_straight_line_recomputation(self):
        rng = np.random.default_rng(1)
        pi = rng.uniform(0.1, 1.0, (2, 2))
        c = rng.uniform(0.0, 2.0, (2, 2))
        mu, nu = rng.uniform(0.2, 1.0, 2), rng.uniform(0.2, 1.0, 2)
        f1, f2 = EntropyFn("kl", 0.7), EntropyFn("chi2", 1.3)
        ref = 0.0
        for j in reversed(range(2)):
            for i in reversed(range(2)):
                ref += c[i, j] * pi[i, j]
        for j in reversed(range(2)):
            r = pi[0, j] + pi[1, j]
            ref += nu[j] * 1.3 * (r / nu[j] - 1.0) ** 2
        for i in reversed(range(2)):
            r = (pi[i, 0] + pi[i, 1]) / mu[i]
            ref += mu[i] * 0.7 * (r * np.log(r) - r + 1.0)
        assert uot_primal_value(pi, c, mu, nu, f1, f2) == pytest.approx(ref, abs=1e-13)

    def test_zero_mass_atom_limit(self):
        pi = np.array([[0.0, 0.0], [0.5, 0.5]])
        v = uot_primal_value(pi, np.zeros((2, 2)), [0.0, 1.0], [0.5, 0.5], KL, KL)
        assert v == pytest.approx(0.0, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            uot_primal_value(np.ones((2, 2)), np.ones((2, 3)), [1, 1], [1, 1, 1], KL, KL)


class TestSinkhorn:
    def test_requires_kl(self):
        with pytest.raises(ValueError):
            solve_uot_sinkhorn([1.0], [1.0], [[0.0]], psi1=EntropyFn("chi2"))

    def test_balanced_limit(self):
        mu = nu = np.array([0.5, 0.5])
        c = np.array([[0.0, 1.0], [1.0, 0.0]])
        big = EntropyFn("kl", 1e6)
        # the balanced gauge of the scalings drifts by ~eps/scale per sweep,
        # so the scaling tolerance must sit above that drift
        plan = solve_uot_sinkhorn(mu, nu, c, 1e-3, big, big, max_iters=20000, tol=1e-8)
        np.testing.assert_allclose(plan.row_marginal, mu, atol=1e-3)
        np.testing.assert_allclose(plan.col_marginal, nu, atol=1e-3)

    def test_symmetric_instance(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(size=(3, 2))
        c = squared_euclidean_cost(x, x)
        mu = rng.uniform(0.2, 1.0, 3)
        plan = solve_uot_sinkhorn(mu, mu, c, 1e-2)
        np.testing.assert_allclose(plan.pi, plan.pi.T, atol=1e-9)

    def test_nonconvergence_reports_residual(self):
        with pytest.raises(ConvergenceError) as exc:
            solve_uot_sinkhorn([1.0, 0.5], [0.3, 1.0], [[0.0, 1.0], [1.0, 0.0]], 1e-3,
                               max_iters=1)
        assert exc.value.residual > 0

    def test_tiny_epsilon_no_overflow(self):
        plan = solve_uot_sinkhorn([1.0, 1.0], [1.0, 1.0], [[0.0, 5.0], [5.0, 0.0]], 1e-5)
        assert np.all(np.isfinite(plan.pi))


class TestBruteForce:
    def test_size_limit(self):
        with pytest.raises(ValueError):
            solve_uot_bruteforce(np.ones(4), np.ones(5), np.zeros((4, 5)))

    def test_zero_cost_recovers_marginals(self):
        mu = np.array([0.3, 0.7])
        plan = solve_uot_bruteforce(mu, mu, np.zeros((2, 2)), 1e-4)
        assert marginal_deviation(plan, mu, mu) < 1e-2

    def test_mass_destruction(self):
        plan = solve_uot_bruteforce([1.0], [1.0], [[10.0]], 1e-3)
        assert plan.pi[0, 0] < 1.0
        # stationarity of the scalar problem: c + 2 log p + eps log p = 0
        p = plan.pi[0, 0]
        assert 10.0 + 2 * np.log(p) + 1e-3 * np.log(p) == pytest.approx(0.0, abs=1e-8)

    def test_chi2_supported(self):
        f = EntropyFn("chi2")
        plan = solve_uot_bruteforce([1.0, 0.5], [0.8], [[0.2], [0.4]], 1e-3, f, f)
        assert np.all(plan.pi > 0)

    def test_first_order_optimality(self):
        rng = np.random.default_rng(3)
        mu, nu, c = random_instance(rng, 3, 3)
        plan = solve_uot_bruteforce(mu, nu, c, 1e-3)
        f0 = entropic_primal_value(plan, c, mu, nu, KL, KL, 1e-3)
        for _ in range(20):
            pert = plan.pi * np.exp(1e-4 * rng.standard_normal(plan.pi.shape))
            assert entropic_primal_value(pert, c, mu, nu, KL, KL, 1e-3) >= f0 - 1e-12


class TestCrossOracle:
    def test_fifty_instances_agree(self):
        t0 = time.perf_counter()
        worst = 0.0
        for mu, nu, c in _instances():
            a = solve_uot_sinkhorn(mu, nu, c, 1e-3)
            b = solve_uot_bruteforce(mu, nu, c, 1e-3)
            worst = max(worst, float(np.max(np.abs(a.pi - b.pi))))
            pa = uot_primal_value(a, c, mu, nu, KL, KL)
            pb = uot_primal_value(b, c, mu, nu, KL, KL)
            assert pa <= pb + 1e-3 * 20
        assert worst < 1e-4
        assert time.perf_counter() - t0 < 60.0

    def test_three_by_three_primal_values(self):
        rng = np.random.default_rng(4)
        mu, nu, c = random_instance(rng, 3, 3)
        a = solve_uot_sinkhorn(mu, nu, c, 1e-3)
        b = solve_uot_bruteforce(mu, nu, c, 1e-3)
        assert uot_primal_value(a, c, mu, nu, KL, KL) == pytest.approx(
            uot_primal_value(b, c, mu, nu, KL, KL), abs=1e-4)

    def test_stronger_penalty_never_loosens_marginals(self):
        # at eps = 1e-3 and scale 10 the sweeps contract by 1 - 1e-4, too slow
        for mu, nu, c in _instances(20):
            lo = solve_uot_sinkhorn(mu, nu, c, 1e-2, EntropyFn("kl", 1.0), EntropyFn("kl", 1.0))
            hi = solve_uot_sinkhorn(mu, nu, c, 1e-2, EntropyFn("kl", 10.0), EntropyFn("kl", 10.0))
            assert marginal_deviation(hi, mu, nu) <= marginal_deviation(lo, mu, nu) + 1e-12

    def test_zero_cost_huge_scale_recovers_marginals(self):
        big = EntropyFn("kl", 1e6)
        for mu, nu, _ in _instances(10, seed=5):
            nu = nu * mu.sum() / nu.sum()
            plan = solve_uot_sinkhorn(mu, nu, np.zeros((len(mu), len(nu))), 1e-3, big, big,
                                      max_iters=20000, tol=1e-8)
            assert marginal_deviation(plan, mu, nu) < 1e-3


def _grid_min(f, centre, half_width, n):
    ga = np.linspace(centre[0] - half_width, centre[0] + half_width, n)
    gb = np.linspace(centre[1] - half_width, centre[1] + half_width, n)
    vals = np.array([[f([a, b]) for b in gb] for a in ga])
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    return float(vals[i, j]), (ga[i], gb[j])


class TestSemidual:
    def test_zero_potential_zero_cost(self):
        assert semidual_value([0.0, 0.0], [0.4, 0.6], [0.5, 0.5], np.zeros((2, 2)), KL, KL) == 0.0

    def test_one_by_one(self):
        v = semidual_value([0.5], [1.0], [1.0], [[1.0]], KL, KL)
        assert v == pytest.approx(2 * np.expm1(-0.5), abs=1e-12)

    def test_shape_checked(self):
        with pytest.raises(ValueError):
            semidual_value([0.0], [1.0], [1.0, 1.0], np.zeros((1, 2)), KL, KL)

    def test_weak_duality_on_grid(self):
        # minimising the semi-dual over v gives minus the unregularised
        # primal optimum, approached here by the eps = 1e-3 brute force
        rng = np.random.default_rng(6)
        for _ in range(3):
            mu, nu, c = random_instance(rng, 2, 2)
            plan = solve_uot_bruteforce(mu, nu, c, 1e-3)
            primal = uot_primal_value(plan, c, mu, nu, KL, KL)
            best, centre = _grid_min(lambda v: semidual_value(v, mu, nu, c, KL, KL),
                                     (0.0, 0.0), 2.0, 81)
            best, _ = _grid_min(lambda v: semidual_value(v, mu, nu, c, KL, KL),
                                centre, 0.05, 41)
            assert best >= -primal - 1e-3
            # the eps-regularised plan overestimates the unregularised optimum
            # by at most eps * entries * |log| terms, plus the grid step
            assert best <= -primal + 1e-3 * 20 + 1e-2
