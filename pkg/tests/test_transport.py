import numpy as np
import pytest
from scipy.optimize import linprog

from otfwi.measures import DiscreteMeasure, cost_matrix
from otfwi.transport import (
    SolverConfig,
    TransportResult,
    _DualSolver,
    lp_oracle,
    mixed_distance,
    sinkhorn,
    uot_scaling,
)


def _gaussian_measure(grid, center, sigma):
    m = np.exp(-0.5 * ((grid - center) / sigma) ** 2)
    return DiscreteMeasure(m / m.sum(), grid)


def _random_pair(rng, n, unit=True):
    x = np.sort(rng.uniform(0, 1, n))
    y = np.sort(rng.uniform(0, 1, n))
    am = rng.uniform(0.2, 1, n)
    bm = rng.uniform(0.2, 1, n)
    if unit:
        am /= am.sum()
        bm /= bm.sum()
    return DiscreteMeasure(am, x), DiscreteMeasure(bm, y), cost_matrix(x, y)


class TestSolverConfig:
    def test_defaults(self):
        cfg = SolverConfig()
        assert cfg.eta == 1e-9
        assert cfg.max_iters == 500

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epsilon": 0.0},
            {"epsilon_u": -1.0},
            {"lambda_m": -0.1},
            {"eta": 0.0},
            {"max_iters": 0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)


class TestLpOracle:
    def test_identical_measures(self):
        a = DiscreteMeasure([0.3, 0.7], [0.0, 1.0])
        P, d = lp_oracle(a, a, cost_matrix(a.support, a.support))
        assert d == pytest.approx(0.0)
        assert np.allclose(P, np.diag([0.3, 0.7]))

    def test_split_one_atom(self):
        a = DiscreteMeasure([1.0], [0.0])
        b = DiscreteMeasure([0.5, 0.5], [0.0, 1.0])
        _, d = lp_oracle(a, b, cost_matrix(a.support, b.support))
        assert d == pytest.approx(0.5)

    def test_unit_shift(self):
        a = DiscreteMeasure([0.5, 0.5], [0.0, 1.0])
        b = DiscreteMeasure([0.5, 0.5], [1.0, 2.0])
        C = cost_matrix(a.support, b.support)
        _, d = lp_oracle(a, b, C)
        assert d == pytest.approx(1.0)
        # Enumerate both feasible permutation-style plans by hand.
        monotone = 0.5 * C[0, 0] + 0.5 * C[1, 1]
        crossing = 0.5 * C[0, 1] + 0.5 * C[1, 0]
        assert d == pytest.approx(min(monotone, crossing))

    def test_against_linprog(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            a, b, C = _random_pair(rng, 5)
            _, d = lp_oracle(a, b, C)
            n, m = C.shape
            A_eq = np.zeros((n + m, n * m))
            for i in range(n):
                A_eq[i, i * m:(i + 1) * m] = 1.0
            for j in range(m):
                A_eq[n + j, j::m] = 1.0
            lp = linprog(
                C.ravel(),
                A_eq=A_eq,
                b_eq=np.concatenate([a.masses, b.masses]),
                bounds=(0, None),
                method="highs",
            )
            assert lp.status == 0
            assert d == pytest.approx(lp.fun, rel=1e-9, abs=1e-12)

    def test_size_limit(self):
        x = np.arange(9.0)
        a = DiscreteMeasure(np.full(9, 1 / 9), x)
        with pytest.raises(ValueError):
            lp_oracle(a, a, cost_matrix(x, x))

    def test_unequal_mass(self):
        a = DiscreteMeasure([1.0], [0.0])
        b = DiscreteMeasure([2.0], [0.0])
        with pytest.raises(ValueError):
            lp_oracle(a, b, np.array([[0.0]]))


class TestSinkhorn:
    def test_single_atom(self):
        a = DiscreteMeasure([1.0], [0.5])
        res = sinkhorn(a, a, np.array([[0.0]]), SolverConfig(epsilon=1e-3))
        assert res.distance == pytest.approx(0.0, abs=1e-12)
        assert res.plan == pytest.approx(1.0)

    def test_forced_unit_plan(self):
        a = DiscreteMeasure([1.0], [0.0])
        b = DiscreteMeasure([1.0], [1.0])
        res = sinkhorn(a, b, np.array([[1.0]]), SolverConfig(epsilon=1e-3))
        assert res.distance == pytest.approx(1.0)
        assert res.plan == pytest.approx(1.0)

    def test_within_one_percent_of_lp(self):
        rng = np.random.default_rng(1)
        cfg = SolverConfig(epsilon=1e-3, eta=1e-10, max_iters=100000)
        for _ in range(20):
            a, b, C = _random_pair(rng, 4)
            _, d_lp = lp_oracle(a, b, C)
            res = sinkhorn(a, b, C, cfg, want_plan=False)
            assert res.converged
            assert abs(res.distance - d_lp) <= 0.01 * max(d_lp, 1e-12)

    def test_marginal_consistency(self):
        rng = np.random.default_rng(2)
        a, b, C = _random_pair(rng, 6)
        res = sinkhorn(a, b, C, SolverConfig(epsilon=1e-3, eta=1e-10, max_iters=100000))
        assert res.converged
        P = res.plan
        assert np.abs(P.sum(axis=1) - a.masses).sum() <= 1e-6
        assert np.abs(P.sum(axis=0) - b.masses).sum() <= 1e-6

    def test_non_unit_mass_rejected(self):
        a = DiscreteMeasure([0.7], [0.0])
        with pytest.raises(ValueError):
            sinkhorn(a, a, np.array([[0.0]]), SolverConfig())

    def test_zero_mass_atoms_retained(self):
        a = DiscreteMeasure([0.0, 0.5, 0.5], [0.0, 0.5, 1.0])
        b = DiscreteMeasure([0.5, 0.5, 0.0], [0.0, 0.5, 1.0])
        C = cost_matrix(a.support, b.support)
        res = sinkhorn(a, b, C, SolverConfig(epsilon=1e-3, eta=1e-10, max_iters=100000))
        P = res.plan
        assert np.allclose(P[0, :], 0.0)
        assert np.allclose(P[:, 2], 0.0)
        assert np.abs(P.sum(axis=1) - a.masses).sum() <= 1e-6
        # Distance matches the same problem with the zero atoms dropped.
        a2 = DiscreteMeasure([0.5, 0.5], [0.5, 1.0])
        b2 = DiscreteMeasure([0.5, 0.5], [0.0, 0.5])
        res2 = sinkhorn(
            a2, b2, cost_matrix(a2.support, b2.support),
            SolverConfig(epsilon=1e-3, eta=1e-10, max_iters=100000),
        )
        assert res.distance == pytest.approx(res2.distance, rel=1e-8)

    def test_iteration_cap_reported(self):
        rng = np.random.default_rng(3)
        a, b, C = _random_pair(rng, 6)
        res = sinkhorn(a, b, C, SolverConfig(epsilon=1e-4, eta=1e-14, max_iters=2))
        assert res.iterations <= 2
        assert not res.converged

    def test_kernel_paths_agree(self):
        # Direct-kernel sweeps and log-sum-exp sweeps must produce the same
        # potentials when both are numerically viable.
        rng = np.random.default_rng(4)
        a, b, C = _random_pair(rng, 5)
        eps = 0.5 * float(C.max())
        fast = _DualSolver(a.masses, b.masses, C, eps)
        slow = _DualSolver(a.masses, b.masses, C, eps)
        slow.fast = False
        assert fast.fast
        for _ in range(200):
            fast.sweep()
            slow.sweep()
        assert np.max(np.abs(fast.phi - slow.phi)) <= 1e-8
        assert np.max(np.abs(fast.psi - slow.psi)) <= 1e-8

    def test_warm_start_skips_to_answer(self):
        rng = np.random.default_rng(5)
        a, b, C = _random_pair(rng, 6)
        cfg = SolverConfig(epsilon=1e-3, eta=1e-10, max_iters=100000)
        cold = sinkhorn(a, b, C, cfg, want_plan=False)
        warm = sinkhorn(
            a, b, C, cfg, want_plan=False,
            init_potentials=(cold.potential_a, cold.potential_b),
        )
        assert warm.converged
        assert warm.iterations <= cold.iterations
        assert warm.distance == pytest.approx(cold.distance, rel=1e-10)

    def test_shift_convexity(self):
        grid = np.linspace(0.0, 1.0, 61)
        beta = _gaussian_measure(grid, 0.5, 0.05)
        C = cost_matrix(grid, grid)
        cfg = SolverConfig(epsilon=1e-3, eta=1e-10, max_iters=100000)
        shifts = np.linspace(-0.15, 0.15, 41)
        vals = []
        for s in shifts:
            alpha = _gaussian_measure(grid, 0.5 + s, 0.05)
            vals.append(sinkhorn(alpha, beta, C, cfg, want_plan=False).distance)
        diffs = np.diff(vals)
        signs = np.sign(diffs[np.abs(diffs) > 1e-14])
        assert np.sum(np.diff(signs) != 0) <= 1


class TestUotScaling:
    def test_identical_point_masses(self):
        a = DiscreteMeasure([1.0], [0.0])
        res = uot_scaling(a, a, np.array([[0.0]]),
                          SolverConfig(epsilon=1e-6, epsilon_u=1.0, max_iters=10000))
        assert res.distance == pytest.approx(0.0, abs=1e-6)
        assert res.plan == pytest.approx(1.0, abs=1e-4)

    def test_pure_mass_creation(self):
        # One atom, zero cost: optimum splits the KL penalties at the
        # geometric mean of the masses, with objective KL(2|4) + KL(2|1) = 1.
        a = DiscreteMeasure([4.0], [0.0])
        b = DiscreteMeasure([1.0], [0.0])
        cfg = SolverConfig(epsilon=1e-6, epsilon_u=1.0, eta=1e-12, max_iters=100000)
        res = uot_scaling(a, b, np.array([[0.0]]), cfg)
        assert res.converged
        assert res.distance == pytest.approx(1.0, abs=1e-5)
        assert res.plan == pytest.approx(2.0, abs=1e-4)

    def test_balanced_limit_two_percent(self):
        rng = np.random.default_rng(6)
        a, b, C = _random_pair(rng, 5)
        cfg = SolverConfig(epsilon=1e-3, eta=1e-11, max_iters=100000)
        d_sink = sinkhorn(a, b, C, cfg, want_plan=False).distance
        d_uot = uot_scaling(
            a, b, C,
            SolverConfig(epsilon=1e-3, epsilon_u=1e4, eta=1e-11, max_iters=100000),
            want_plan=False,
        ).distance
        assert abs(d_uot - d_sink) <= 0.02 * d_sink

    def test_balanced_limit_monotone(self):
        rng = np.random.default_rng(7)
        a, b, C = _random_pair(rng, 5)
        cfg = SolverConfig(epsilon=1e-2, eta=1e-13, max_iters=200000)
        d_sink = sinkhorn(a, b, C, cfg, want_plan=False).distance
        gaps = []
        for eps_u in (1.0, 10.0, 100.0, 1000.0):
            d = uot_scaling(
                a, b, C,
                SolverConfig(epsilon=1e-2, epsilon_u=eps_u, eta=1e-13,
                             max_iters=200000),
                want_plan=False,
            ).distance
            gaps.append(abs(d - d_sink))
        assert all(g1 <= g0 * 1.01 for g0, g1 in zip(gaps, gaps[1:]))

    def test_zero_mass_input_rejected(self):
        a = DiscreteMeasure([0.0], [0.0])
        b = DiscreteMeasure([1.0], [0.0])
        with pytest.raises(ValueError):
            uot_scaling(a, b, np.array([[0.0]]), SolverConfig())


class TestMixedDistance:
    def test_identical_atoms(self):
        a = DiscreteMeasure([3.0], [0.0])
        res = mixed_distance(a, a, np.array([[0.0]]), SolverConfig(lambda_m=1.0))
        assert res.distance == pytest.approx(0.0, abs=1e-12)

    def test_pure_mass_term(self):
        a = DiscreteMeasure([2.0], [0.0])
        b = DiscreteMeasure([1.0], [0.0])
        res = mixed_distance(a, b, np.array([[0.0]]), SolverConfig(lambda_m=0.5))
        assert res.distance == pytest.approx(0.5)

    def test_against_lp_plus_mass_term(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            a, b, C = _random_pair(rng, 3, unit=False)
            cfg = SolverConfig(epsilon=1e-3, lambda_m=1.0, eta=1e-10,
                               max_iters=100000)
            res = mixed_distance(a, b, C, cfg, want_plan=False)
            a_hat = DiscreteMeasure(a.masses / a.total_mass, a.support)
            b_hat = DiscreteMeasure(b.masses / b.total_mass, b.support)
            _, d_lp = lp_oracle(a_hat, b_hat, C)
            mass_term = (a.total_mass - b.total_mass) ** 2
            assert abs(res.distance - mass_term - d_lp) <= 0.01 * max(d_lp, 1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        a, _, _ = _random_pair(rng, 5, unit=False)
        b, _, _ = _random_pair(rng, 5, unit=False)
        cfg = SolverConfig(epsilon=1e-3, lambda_m=1e-2, eta=1e-13, max_iters=200000)
        Cab = cost_matrix(a.support, b.support)
        dab = mixed_distance(a, b, Cab, cfg, want_plan=False).distance
        dba = mixed_distance(b, a, Cab.T, cfg, want_plan=False).distance
        assert abs(dab - dba) <= 1e-8

    def test_mass_scaling_convex_with_minimum_at_one(self):
        rng = np.random.default_rng(10)
        a, _, _ = _random_pair(rng, 5, unit=False)
        C = cost_matrix(a.support, a.support)
        cfg = SolverConfig(epsilon=1e-3, lambda_m=1.0, eta=1e-11, max_iters=100000)
        ks = np.array([0.25, 0.5, 1.0, 2.0, 4.0])
        vals = np.array([
            mixed_distance(DiscreteMeasure(k * a.masses, a.support), a, C, cfg,
                           want_plan=False).distance
            for k in ks
        ])
        assert np.argmin(vals) == 2
        second = np.diff(np.diff(vals))
        assert np.all(second >= -1e-12)

    def test_matrix_free_jacobian_matches_explicit(self):
        rng = np.random.default_rng(11)
        a, b, C = _random_pair(rng, 6, unit=False)
        cfg = SolverConfig(epsilon=1e-4, lambda_m=0.3, eta=1e-12, max_iters=100000)
        res = mixed_distance(a, b, C, cfg, want_plan=False)
        a_hat = DiscreteMeasure(a.masses / a.total_mass, a.support)
        b_hat = DiscreteMeasure(b.masses / b.total_mass, b.support)
        g = sinkhorn(
            a_hat, b_hat, C, cfg, want_plan=False,
            init_potentials=(res.potential_a, res.potential_b),
        ).grad_a
        sa = a.total_mass
        J = (np.eye(6) - np.outer(a_hat.masses, np.ones(6))).T / sa
        explicit = J @ g + 2 * cfg.lambda_m * (sa - b.total_mass)
        assert np.allclose(res.grad_a, explicit, atol=1e-10)

    def test_zero_mass_rejected(self):
        a = DiscreteMeasure([0.0], [0.0])
        b = DiscreteMeasure([1.0], [0.0])
        with pytest.raises(ValueError):
            mixed_distance(a, b, np.array([[0.0]]), SolverConfig())


class TestGradients:
    """Central finite differences against the analytic gradients."""

    DELTA = 1e-6

    def test_sinkhorn_gradient(self):
        rng = np.random.default_rng(12)
        a, b, C = _random_pair(rng, 5)
        cfg = SolverConfig(epsilon=1e-6, eta=1e-13, max_iters=200000)
        g = sinkhorn(a, b, C, cfg, want_plan=False).grad_a
        fd = np.empty(5)
        for i in range(5):
            def value(s):
                m = a.masses.copy()
                m[i] += s * self.DELTA
                m /= m.sum()
                return sinkhorn(DiscreteMeasure(m, a.support), b, C, cfg,
                                want_plan=False).distance
            fd[i] = (value(+1) - value(-1)) / (2 * self.DELTA)
        fd -= fd.mean()
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) <= 1e-3

    def test_uot_gradient(self):
        rng = np.random.default_rng(13)
        a, b, C = _random_pair(rng, 5, unit=False)
        cfg = SolverConfig(epsilon=1e-7, epsilon_u=1.0, eta=1e-13, max_iters=200000)
        g = uot_scaling(a, b, C, cfg, want_plan=False).grad_a
        fd = np.empty(5)
        for i in range(5):
            def value(s):
                m = a.masses.copy()
                m[i] += s * self.DELTA
                return uot_scaling(DiscreteMeasure(m, a.support), b, C, cfg,
                                   want_plan=False).distance
            fd[i] = (value(+1) - value(-1)) / (2 * self.DELTA)
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) <= 1e-4

    def test_mixed_gradient(self):
        rng = np.random.default_rng(16)
        a, b, C = _random_pair(rng, 5, unit=False)
        cfg = SolverConfig(epsilon=1e-6, lambda_m=1e-2, eta=1e-13, max_iters=200000)
        g = mixed_distance(a, b, C, cfg, want_plan=False).grad_a
        fd = np.empty(5)
        for i in range(5):
            def value(s):
                m = a.masses.copy()
                m[i] += s * self.DELTA
                return mixed_distance(DiscreteMeasure(m, a.support), b, C, cfg,
                                      want_plan=False).distance
            fd[i] = (value(+1) - value(-1)) / (2 * self.DELTA)
        assert np.linalg.norm(fd - g) / np.linalg.norm(g) <= 1e-4


class TestResultShape:
    def test_want_plan_false(self):
        rng = np.random.default_rng(15)
        a, b, C = _random_pair(rng, 4)
        res = sinkhorn(a, b, C, SolverConfig(epsilon=1e-3), want_plan=False)
        assert isinstance(res, TransportResult)
        assert res.plan is None
        assert res.grad_a.shape == (4,)
        assert res.potential_a.shape == (4,)
