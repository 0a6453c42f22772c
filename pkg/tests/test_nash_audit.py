import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pomfg import presets
from pomfg.control import CostForm, HJBGrid, evaluate_policy_cost
from pomfg.dynamics import zero_policy
from pomfg.errors import InvalidInput
from pomfg.measure_flow import MeasureFlow, empirical_measure
from pomfg.nash_audit import (NO_DEVIATION, NashGapReport, NashRateReport, epsilon_N, mv_rate_study, nash_gap,
                              nash_rate_study)

SHORT = dict(T=0.2, dt=0.01)


def zero(t, r):
    return np.zeros(len(r))


def point_flow(model):
    return MeasureFlow.constant(model.times, empirical_measure([0.0]))


class TestEpsilonN:
    def test_examples(self):
        assert epsilon_N([1.0, 1.0], 1.0) == 0.0
        assert epsilon_N([0.0, 2.0], 1.0) == pytest.approx(1.0)
        assert epsilon_N([0.0], 3.0) == pytest.approx(9.0)

    def test_empty(self):
        with pytest.raises(InvalidInput):
            epsilon_N([], 0.0)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(-5, 5), st.randoms())
    def test_permutation_invariant(self, means, z, rnd):
        shuffled = list(means)
        rnd.shuffle(shuffled)
        assert epsilon_N(shuffled, z) == pytest.approx(epsilon_N(means, z), abs=1e-9)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.floats(-5, 5))
    def test_is_squared_mean_offset_plus_spread(self, means, z):
        m = np.array(means)
        assert epsilon_N(means, z) == pytest.approx((m.mean() - z) ** 2 + m.var(), abs=1e-9)


class TestNashGap:
    model = presets.benes_quadratic(**SHORT)

    def test_baseline_only_family(self):
        rep = nash_gap(self.model, zero, point_flow(self.model), 4, 1, seed=3, replications=4,
                       deviations=[(1.0, 0.0)], best_response=False)
        assert rep.gap == 0.0 and rep.best_deviation == "affine(alpha=1,beta=0)" and not rep.detected

    def test_baseline_matches_population_cost(self):
        rep = nash_gap(self.model, zero, point_flow(self.model), 5, 1, seed=3, replications=6,
                       deviations=[(1.0, 0.0)], best_response=False)
        ref = evaluate_policy_cost(self.model, zero, point_flow(self.model), 6, "population", N=5, seed=3)
        assert rep.baseline_cost == ref.mean

    def test_control_penalty_only(self):
        from dataclasses import replace
        model = replace(self.model, cost=CostForm(lambda z, y: 0.0 * z[..., 1] + 0 * y, 1.0))
        rep = nash_gap(model, zero, point_flow(model), 4, 15, seed=1, replications=4, best_response=False)
        assert rep.baseline_cost == 0.0 and rep.gap == 0.0
        shifted = rep.deviation_costs["affine(alpha=1,beta=0.1)"]
        assert shifted == pytest.approx(0.5 * 0.01 * model.n_steps * model.dt, rel=1e-12)

    def test_gap_is_baseline_minus_best(self):
        grids = HJBGrid.around(self.model, n=21)
        rep = nash_gap(self.model, zero, point_flow(self.model), 4, 3, seed=2, replications=4, grids=grids)
        assert rep.gap == pytest.approx(rep.baseline_cost - min(rep.deviation_costs.values()), abs=1e-15)
        assert "best_response" in rep.deviation_costs and len(rep.deviation_costs) == 4

    def test_budget(self):
        with pytest.raises(InvalidInput):
            nash_gap(self.model, zero, point_flow(self.model), 4, 0, seed=0, replications=2)

    def test_detection_rule(self):
        assert NashGapReport(4, 1.0, 0.9, 0.1, 0.01, "x", 0.0).detected
        assert not NashGapReport(4, 1.0, 0.99, 0.01, 0.01, "x", 0.0).detected


class TestNashRate:
    model = presets.benes_quadratic(**SHORT)

    def test_no_deviation_message(self):
        rep = nash_rate_study(self.model, zero, point_flow(self.model), [4, 8], seed=0, replications=4,
                              deviations=[(1.0, 0.0)], best_response=False, deviation_budget=1)
        assert rep.passed and rep.message == NO_DEVIATION and rep.C == 0.0

    def test_csv(self, tmp_path):
        reports = [NashGapReport(n, 1.0, 0.9, g, 0.001, "x", 0.0) for n, g in ((4, 0.2), (16, 0.1))]
        rate = NashRateReport(reports, -0.5, 0.4, True, "")
        assert rate.bounds == pytest.approx([0.2, 0.1])
        rate.write_csv(tmp_path / "n.csv")
        lines = (tmp_path / "n.csv").read_text().splitlines()
        assert lines[0] == "N,gap,epsilon_N,bound" and lines[1].startswith("4,0.2")


class TestMVRate:
    def test_machine_noise_on_driftless(self, tmp_path):
        sc = presets.driftless(**SHORT)
        rep = mv_rate_study(sc, zero_policy, [4, 8], 4, seed=0, flow=point_flow(sc))
        assert rep.errors == [0.0, 0.0] and math.isnan(rep.slope)
        assert rep.message == "gaps at machine-noise level for all N"
        rep.write_csv(tmp_path / "r.csv")
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "N,error,stderr"

    @pytest.mark.parametrize("N,reps", [([2, 8], 4), ([8, 4], 4), ([4, 5000], 4), ([4, 8], 3)])
    def test_validation(self, N, reps):
        sc = presets.driftless(**SHORT)
        with pytest.raises(InvalidInput):
            mv_rate_study(sc, zero_policy, N, reps, seed=0, flow=point_flow(sc))

    def test_coupled_gap_positive_and_literal_dominates(self):
        sc = presets.mean_reversion_coupled(T=0.1, dt=0.01)
        flow = presets.mean_reversion_flow(0.5, 0.5, 0.0, 0.25, sc.times)
        rep = mv_rate_study(sc, presets.open_loop_drive(), [4, 16], 4, seed=1, flow=flow)
        assert all(e > 0 for e in rep.errors)
        assert all(lit >= e - 1e-15 for lit, e in zip(rep.literal_errors, rep.errors))
