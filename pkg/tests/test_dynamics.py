import numpy as np
import pytest
from scipy.stats import kurtosis

from pomfg import presets
from pomfg.dynamics import (InfoState, Scenario, induced_flow, mean_field_drift, normals, simulate_mckean_vlasov,
                            simulate_population, stream, zero_policy)
from pomfg.errors import ConfigError, InvalidInput
from pomfg.measure_flow import MeasureFlow, empirical_measure


def scenario(f=lambda t, x, y: 0.0 * x, sigma=1.0, T=1.0, dt=0.01, **kw):
    return Scenario(T=T, dt=dt, f_dagger=f, sigma=sigma, h=lambda x: x, **kw)


class TestScenario:
    def test_sigma_positive(self):
        with pytest.raises(ConfigError, match="sigma must be positive"):
            scenario(sigma=0.0)

    def test_steps_integral(self):
        with pytest.raises(ConfigError):
            scenario(T=1.0, dt=0.3)

    def test_control_set(self):
        with pytest.raises(ConfigError):
            scenario(U=(1.0, -1.0))

    def test_means_per_agent(self):
        sc = scenario(init_means=[0.0, 1.0, 2.0])
        assert sc.means_for(2).tolist() == [0.0, 1.0]
        with pytest.raises(InvalidInput):
            sc.means_for(4)


class TestMeanFieldDrift:
    def test_identity_against_point_mass(self):
        assert mean_field_drift(lambda t, x, y: y + 0 * x, 0.0, 1.0, empirical_measure([0.7])) == pytest.approx(0.7)

    def test_zero(self):
        assert mean_field_drift(lambda t, x, y: 0.0 * (x + y), 0.0, np.ones(3), empirical_measure([1, 2])).tolist() == [0, 0, 0]

    def test_two_point_quadrature(self):
        mu = empirical_measure([0.0, np.pi / 2])
        assert mean_field_drift(lambda t, x, y: np.sin(y) + 0 * x, 0.0, 0.0, mu) == pytest.approx(0.5)

    def test_none_means_origin(self):
        assert mean_field_drift(lambda t, x, y: y + 1 + 0 * x, 0.0, 0.0, None) == pytest.approx(1.0)


class TestNoise:
    def test_streams_are_counter_based(self):
        a = stream(3, 5, "state", rep=2).standard_normal(4)
        b = stream(3, 5, "state", rep=2).standard_normal(4)
        c = stream(3, 6, "state", rep=2).standard_normal(4)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_agent_noise_independent_of_population_size(self):
        small = normals(1, range(3), "obs", (10,))
        big = normals(1, range(8), "obs", (10,))
        assert np.array_equal(small, big[:3])


class TestPopulation:
    def test_driftless_mean(self):
        sc = scenario(init_means=1.5, dt=0.01)
        b = simulate_population(sc, zero_policy, 2000, "none")
        se = b.states[:, -1].std(ddof=1) / np.sqrt(2000)
        assert abs(b.states[:, -1].mean() - 1.5) < 3 * se

    def test_pair_sum_is_martingale(self):
        sc = scenario(f=lambda t, x, y: y - x, dt=0.01)
        totals = [simulate_population(sc, zero_policy, 2, "none", rep=r).states.sum(axis=0) for r in range(200)]
        drift_free = np.array(totals)[:, -1]
        assert abs(drift_free.mean()) < 3 * drift_free.std(ddof=1) / np.sqrt(200)
        b = simulate_population(sc, zero_policy, 2, "none")
        incr = np.diff(b.states.sum(axis=0))
        expected = sc.sigma * b.noises["state"].sum(axis=0)
        assert np.allclose(incr, expected, atol=1e-12)

    def test_constant_policy_hits_bound(self):
        sc = scenario(U=(-1.0, 1.0))
        b = simulate_population(sc, lambda t, info: 5.0, 4, "none")
        assert np.all(b.controls == 1.0)

    def test_increments_gaussian(self):
        sc = scenario(dt=0.01)
        b = simulate_population(sc, zero_policy, 500, "none")
        incr = np.diff(b.states, axis=1).ravel()
        assert incr.var() == pytest.approx(sc.dt, rel=0.05)
        assert abs(kurtosis(incr)) < 5 * np.sqrt(24 / incr.size)

    def test_per_agent_policies(self):
        sc = scenario(U=(-2.0, 2.0))
        b = simulate_population(sc, [lambda t, i: 1.0, lambda t, i: -1.0], 2, "none")
        assert b.controls[:, 0].tolist() == [1.0, -1.0]
        with pytest.raises(InvalidInput):
            simulate_population(sc, [zero_policy], 2, "none")

    def test_unknown_filter_mode(self):
        with pytest.raises(ConfigError):
            simulate_population(scenario(), zero_policy, 2, "kalman")

    def test_grid_filter_feeds_policy(self):
        sc = presets.linear_gaussian(dt=1e-3, T=0.05)
        seen = []

        def policy(t, info):
            seen.append(info)
            return 0.0

        simulate_population(sc, policy, 3, "grid")
        assert isinstance(seen[0], InfoState) and seen[0].mean == pytest.approx([2.0] * 3, abs=1e-6)

    def test_bundle_csv(self, tmp_path):
        b = simulate_population(scenario(T=0.02), zero_policy, 2, "none")
        b.write_csv(tmp_path / "p.csv")
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "path_id,t,z,y,u" and len(lines) == 1 + 2 * 3


class TestMcKeanVlasov:
    def test_coupling_free_matches_population_bitwise(self):
        sc = scenario(init_var=0.3)
        flow = MeasureFlow.constant(sc.times, empirical_measure([4.0]))
        pop = simulate_population(sc, zero_policy, 5, "none")
        mv = simulate_mckean_vlasov(sc, zero_policy, flow, 5, "none")
        assert np.array_equal(pop.states, mv.states)
        for kind in ("init", "state", "obs"):
            assert np.array_equal(pop.noises[kind], mv.noises[kind])

    def test_zero_mean_field(self):
        sc = scenario(f=lambda t, x, y: y + 0 * x)
        flow = MeasureFlow.constant(sc.times, empirical_measure([0.0]))
        mv = simulate_mckean_vlasov(sc, zero_policy, flow, 3, "none")
        base = simulate_mckean_vlasov(scenario(), zero_policy, flow, 3, "none")
        assert np.array_equal(mv.states, base.states)

    def test_flow_with_linear_mean(self):
        sc = scenario(f=lambda t, x, y: y + 0 * x, dt=0.01)
        flow = MeasureFlow(sc.times, [empirical_measure([t]) for t in sc.times])
        mv = simulate_mckean_vlasov(sc, zero_policy, flow, 4000, "none")
        se = mv.states[:, -1].std(ddof=1) / np.sqrt(4000)
        assert abs(mv.states[:, -1].mean() - 0.5) < 3 * se + 0.01  # left-point sum of t dt is 0.495

    def test_bounded_growth(self):
        sc = scenario(f=lambda t, x, y: np.tanh(y - x), dt=0.01, U=(-1.0, 1.0))
        flow = MeasureFlow.constant(sc.times, empirical_measure([3.0]))
        mv = simulate_mckean_vlasov(sc, lambda t, i: 1.0, flow, 10_000, "none")
        bound = (1.0 + 1.0) * sc.T + 6 * sc.sigma * np.sqrt(sc.T)
        assert np.abs(mv.states).max() <= bound


class TestInducedFlow:
    def test_constant_path(self):
        sc = scenario(sigma=1e-9)
        b = simulate_mckean_vlasov(sc, zero_policy, MeasureFlow.constant(sc.times, empirical_measure([0.0])), 1, "none")
        assert np.allclose(induced_flow(b).means(), 0.0, atol=1e-6)

    def test_mirrored_paths(self):
        sc = scenario()
        b = simulate_population(sc, zero_policy, 1, "none")
        b.states = np.vstack([b.states, -b.states])
        assert np.allclose(induced_flow(b).means(), 0.0)

    def test_brownian_variance(self):
        sc = scenario(dt=0.01)
        b = simulate_population(sc, zero_policy, 1000, "none")
        flow = induced_flow(b)
        for k in (25, 50, 100):
            assert flow.measures[k].variance == pytest.approx(sc.times[k], rel=0.1)
