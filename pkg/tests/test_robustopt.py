import numpy as np
import pytest

from clrmlab.resim import BhpSchedule, RateSeries
from clrmlab.robustopt import (
    ConstraintSpec,
    EconParams,
    PsoSettings,
    aggregate_violation,
    constraint_value,
    filter_compare,
    npv,
    pso_minimize,
    pso_step,
    robust_optimize,
    save_trace_csv,
    select_realizations,
)


def rate_series(times, inj, oil, wat):
    inj = np.atleast_2d(np.asarray(inj, dtype=float))
    oil = np.atleast_2d(np.asarray(oil, dtype=float))
    wat = np.atleast_2d(np.asarray(wat, dtype=float))
    return RateSeries(np.asarray(times, dtype=float),
                      [f"I{i+1}" for i in range(inj.shape[0])],
                      [f"P{i+1}" for i in range(oil.shape[0])], inj, oil, wat)


class TestNpv:
    def test_zero_rates(self):
        r = rate_series([0.0, 30.0, 60.0], np.zeros((1, 3)), np.zeros((1, 3)),
                        np.zeros((1, 3)))
        assert npv(r, EconParams()) == 0.0

    def test_single_interval_hand_value(self):
        # 100 m3/day oil for one 30-day interval at $74/STB, no discounting
        r = rate_series([0.0, 30.0], [[0.0, 0.0]], [[100.0, 55.0]],
                        np.zeros((1, 2)))
        econ = EconParams(discount_rate=0.0, cost_water_inj=0.0,
                          cost_water_prod=0.0)
        # rate at the last report time has no following interval
        assert npv(r, econ) == pytest.approx(100 * 6.28981 * 74 * 30, rel=1e-12)

    def test_discount_at_one_year(self):
        # interval [350, 380) has midpoint 365: worth exactly 1/1.1 of the
        # undiscounted cash
        times = [350.0, 380.0]
        r = rate_series(times, [[0.0, 0.0]], [[10.0, 10.0]], np.zeros((1, 2)))
        econ0 = EconParams(discount_rate=0.0)
        econ1 = EconParams(discount_rate=0.1)
        assert npv(r, econ1) == pytest.approx(npv(r, econ0) / 1.1, rel=1e-12)

    def test_costs_subtract(self):
        times = [0.0, 30.0]
        r = rate_series(times, [[50.0, 0.0]], [[100.0, 0.0]], [[20.0, 0.0]])
        econ = EconParams(price_oil=74.0, cost_water_prod=5.0,
                          cost_water_inj=9.0, discount_rate=0.0)
        expect = 6.28981 * 30 * (74 * 100 - 5 * 20 - 9 * 50)
        assert npv(r, econ) == pytest.approx(expect, rel=1e-12)


class TestSelectRealizations:
    def test_twenty_keeps_sixteen(self):
        rng = np.random.default_rng(0)
        kept = select_realizations(rng.standard_normal(20))
        assert len(kept) == 16

    def test_all_equal_tie_rule(self):
        kept = select_realizations(np.ones(20))
        assert list(kept) == list(range(2, 18))

    def test_sorted_values(self):
        kept = select_realizations(np.arange(1.0, 21.0))
        assert list(kept) == list(range(2, 18))

    def test_too_few(self):
        with pytest.raises(ValueError):
            select_realizations(np.ones(8))

    def test_non_integral_fraction(self):
        with pytest.raises(ValueError):
            select_realizations(np.ones(15))

    def test_scaling_invariance(self):
        rng = np.random.default_rng(1)
        npvs = rng.standard_normal(20) + 5.0
        assert np.array_equal(select_realizations(npvs),
                              select_realizations(npvs * 3.5))


class TestAggregateViolation:
    def test_all_feasible(self):
        cbar, h, m = aggregate_violation([[50.0], [90.0], [99.0]], [100.0])
        assert np.all(cbar == 0.0) and np.all(h == 0.0)
        assert m[0] == 99.0

    def test_worst_particle_has_unit_violation(self):
        cbar, h, m = aggregate_violation([[90.0], [110.0], [120.0]], [100.0])
        assert cbar[:, 0] == pytest.approx([0.0, 0.5, 1.0])
        assert h == pytest.approx([0.0, 0.5, 1.0])

    def test_negative_ratio_clamped(self):
        cbar, _, _ = aggregate_violation([[50.0], [200.0]], [100.0])
        assert cbar[0, 0] == 0.0
        assert cbar[1, 0] == 1.0

    def test_h_sums_constraints(self):
        cbar, h, _ = aggregate_violation([[110.0, 220.0]], [100.0, 200.0])
        assert h[0] == pytest.approx(2.0)  # worst particle for both

    def test_h_zero_iff_feasible(self):
        c = np.array([[99.0, 150.0], [101.0, 100.0]])
        cbar, h, _ = aggregate_violation(c, [100.0, 200.0])
        assert h[0] == 0.0 and h[1] > 0.0

    def test_empty_swarm_rejected(self):
        with pytest.raises(ValueError):
            aggregate_violation(np.empty((0, 1)), [1.0])


class TestFilterCompare:
    def test_feasible_beats_infeasible(self):
        assert filter_compare((-5.0, 0.0), (-9.0, 0.2)) == (-5.0, 0.0)

    def test_lower_j_wins_when_both_feasible(self):
        assert filter_compare((-5.0, 0.0), (-9.0, 0.0)) == (-9.0, 0.0)

    def test_lower_h_wins_when_both_infeasible(self):
        assert filter_compare((-1.0, 0.3), (-8.0, 0.1)) == (-8.0, 0.1)

    def test_tie_keeps_incumbent(self):
        a, b = (-5.0, 0.0), (-5.0, 0.0)
        assert filter_compare(a, b) is a


class _FixedRng:
    def __init__(self, value):
        self.value = value

    def random(self, n):
        return np.full(n, self.value)


class TestPsoStep:
    def test_hand_velocity_update(self):
        u = np.array([[0.0]])
        v = np.array([[1.0]])
        best = np.array([[2.0]])
        u2, v2 = pso_step(u, v, best, best, np.array([[-10.0, 10.0]]),
                          [_FixedRng(0.5)])
        assert v2[0, 0] == pytest.approx(0.729 + 1.494 * 0.5 * 2 * 2, rel=1e-12)
        assert u2[0, 0] == pytest.approx(3.717, rel=1e-12)

    def test_stationary_at_own_best(self):
        u = np.array([[1.5, -0.5]])
        v = np.zeros((1, 2))
        u2, v2 = pso_step(u, v, u.copy(), u.copy(),
                          np.array([[-5.0, 5.0], [-5.0, 5.0]]), [_FixedRng(0.7)])
        assert np.array_equal(u2, u)
        assert np.array_equal(v2, np.zeros((1, 2)))

    def test_clamp_zeroes_velocity(self):
        u = np.array([[9.5]])
        v = np.array([[2.0]])
        best = np.array([[12.0]])
        u2, v2 = pso_step(u, v, best, best, np.array([[0.0, 10.0]]),
                          [_FixedRng(1.0)])
        assert u2[0, 0] == 10.0
        assert v2[0, 0] == 0.0


def quadratic_evaluate(positions):
    j = np.sum(positions**2, axis=1)
    c = np.zeros((len(positions), 0))
    return j, c


def constrained_evaluate(positions):
    # minimize sum x^2 subject to sum x >= 1, cast as 1 - sum x <= 0
    j = np.sum(positions**2, axis=1)
    c = (1.0 - np.sum(positions, axis=1))[:, None]
    return j, c


class TestPsoMinimize:
    SETTINGS = PsoSettings(n_particles=35, n_iterations=30)

    def test_unconstrained_quadratic(self):
        bounds = np.array([[-2.0, 2.0]] * 3)
        res = pso_minimize(quadratic_evaluate, bounds, np.zeros(0),
                           self.SETTINGS, seed=0)
        assert res.best_j < 1e-3
        assert np.all(res.best_u >= -2.0) and np.all(res.best_u <= 2.0)

    def test_constrained_benchmark_single_seed(self):
        bounds = np.array([[0.0, 1.0]] * 5)
        res = pso_minimize(constrained_evaluate, bounds, np.array([0.0]),
                           self.SETTINGS, seed=1)
        assert res.best_h == 0.0
        assert abs(res.best_j - 0.2) < 1e-2

    def test_irrelevant_constraint_matches_unconstrained(self):
        bounds = np.array([[-2.0, 2.0]] * 3)

        def with_slack_constraint(positions):
            j, _ = quadratic_evaluate(positions)
            return j, np.full((len(positions), 1), -5.0)  # never binds

        a = pso_minimize(quadratic_evaluate, bounds, np.zeros(0),
                         self.SETTINGS, seed=3)
        b = pso_minimize(with_slack_constraint, bounds, np.array([1000.0]),
                         self.SETTINGS, seed=3)
        assert np.array_equal(a.best_u, b.best_u)
        assert a.best_j == b.best_j

    def test_first_particle_mid_bounds(self):
        bounds = np.array([[0.0, 10.0], [-4.0, 0.0]])
        seen = {}

        def recording(positions):
            seen.setdefault("first", positions[0].copy())
            return quadratic_evaluate(positions)

        pso_minimize(recording, bounds, np.zeros(0),
                     PsoSettings(n_particles=5, n_iterations=1), seed=0)
        assert np.array_equal(seen["first"], [5.0, -2.0])

    def test_best_sequence_monotone(self):
        bounds = np.array([[-2.0, 2.0]] * 5)
        res = pso_minimize(constrained_evaluate, bounds, np.array([0.0]),
                           self.SETTINGS, seed=5)
        hs = [row[2] for row in res.trace]
        assert all(h2 <= h1 + 1e-15 for h1, h2 in zip(hs, hs[1:]))
        js = [row[1] for row in res.trace]
        feasible_from = next(i for i, h in enumerate(hs) if h == 0.0)
        tail = js[feasible_from:]
        assert all(j2 <= j1 + 1e-15 for j1, j2 in zip(tail, tail[1:]))

    def test_deterministic(self):
        bounds = np.array([[-1.0, 1.0]] * 4)
        a = pso_minimize(quadratic_evaluate, bounds, np.zeros(0),
                         PsoSettings(10, 5), seed=9)
        b = pso_minimize(quadratic_evaluate, bounds, np.zeros(0),
                         PsoSettings(10, 5), seed=9)
        assert np.array_equal(a.best_u, b.best_u)
        assert a.trace == b.trace


class SyntheticEvaluator:
    """Ten fake realizations: rates respond linearly to the injector BHP."""

    def __init__(self, n_real=10, n_t=7):
        self.n_real = n_real
        self.n_t = n_t
        self.calls = 0

    def rates(self, schedule: BhpSchedule):
        self.calls += 1
        times = np.arange(self.n_t) * 30.0
        out = []
        for i in range(self.n_real):
            inj = np.empty((1, self.n_t))
            for t in range(self.n_t):
                step = schedule.step_of(times[t])
                inj[0, t] = (schedule.bhp[0, step] - 300.0) * (1.0 + 0.02 * i)
            oil = 0.8 * inj
            wat = 0.1 * inj
            out.append(RateSeries(times, ["I1"], ["P1"], inj, oil, wat))
        return out


class TestRobustOptimize:
    BOUNDS = np.array([[325.0, 335.0], [300.0, 315.0]])

    def _run(self, constraints=(), prefix=None, seed=0):
        ev = SyntheticEvaluator()
        res = robust_optimize(
            ev, EconParams(), list(constraints), self.BOUNDS,
            t_cs_days=90.0, n_cs=2, fixed_prefix=prefix,
            settings=PsoSettings(n_particles=8, n_iterations=6), seed=seed)
        return ev, res

    def test_pushes_injection_up_when_unconstrained(self):
        _, res = self._run()
        # oil revenue dominates, so the optimum injects as hard as allowed
        assert np.all(res.schedule.bhp[0] > 334.0)
        assert res.best_h == 0.0

    def test_constraint_caps_injection(self):
        cs = ConstraintSpec("field", "water_injection", limit=30.0)
        _, res = self._run(constraints=[cs])
        assert res.best_h == 0.0
        assert res.constraint_values[0] <= 30.0 + 1e-9
        # binding constraint: the optimizer pushes close to the limit
        assert res.constraint_values[0] > 25.0

    def test_prefix_untouched(self):
        prefix = np.array([[330.0], [305.0]])
        _, res = self._run(prefix=prefix)
        assert np.array_equal(res.schedule.bhp[:, :1], prefix)
        assert res.schedule.n_cs == 2

    def test_kept_size_and_counts(self):
        ev, res = self._run()
        assert len(res.kept) == 8
        assert len(res.npvs) == 10
        assert res.evaluations == ev.calls

    def test_deterministic(self):
        _, a = self._run(seed=4)
        _, b = self._run(seed=4)
        assert np.array_equal(a.schedule.bhp, b.schedule.bhp)
        assert a.trace == b.trace

    def test_trace_csv(self, tmp_path):
        _, res = self._run()
        path = tmp_path / "trace.csv"
        save_trace_csv(path, res.trace)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "iteration,best_J,best_h,swarm_mean_J,feasible_count"
        assert len(lines) == len(res.trace) + 1


class TestConstraintValue:
    def test_field_and_well_scopes(self):
        times = [0.0, 30.0, 60.0]
        r = RateSeries(np.array(times), ["I1", "I2"], ["P1"],
                       np.array([[10.0, 40.0, 20.0], [5.0, 5.0, 30.0]]),
                       np.array([[1.0, 1.0, 1.0]]),
                       np.array([[0.0, 2.0, 7.0]]))
        assert constraint_value(r, ConstraintSpec("field", "water_injection", 1.0)) == 50.0
        assert constraint_value(r, ConstraintSpec("I2", "water_injection", 1.0)) == 30.0
        assert constraint_value(r, ConstraintSpec("field", "water_production", 1.0)) == 7.0

    def test_limit_positive(self):
        with pytest.raises(ValueError):
            ConstraintSpec("field", "water_injection", 0.0)
