import math

import numpy as np
import pytest

from prevest.core import EventHistory, TestCharacteristics
from prevest.estimators import (
    DayEvaluator,
    DegenerateStratumError,
    EstimateSeries,
    DayEstimate,
    Panel,
    ScheduleMatrix,
    WeightTable,
    bias_ratio,
    estimate_schedule_matrix,
    exact_schedule_matrix,
    ht_estimate_w,
    ht_estimated,
    ht_known,
    prevalence_from_w,
    testing_probability_from_matrix,
    tpr,
    tpr_prevalence,
)
from prevest.regimens import RegimenConfig
from prevest.simulate import ScenarioConfig, HazardModel, ExternalHazard, simulate

from _oracles import testing_process_oracle

PERFECT = TestCharacteristics()
STUDY = TestCharacteristics(0.832, 0.992)
SIMPLE = RegimenConfig.simple_random(1 / 6)


class TestTpr:
    def test_definition(self):
        assert tpr(5, 100) == pytest.approx(0.05)
        assert tpr(0, 100) == 0.0
        assert tpr(100, 100) == 1.0

    def test_untested_day_is_undefined(self):
        assert math.isnan(tpr(0, 0))

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            tpr(5, 3)

    def test_prevalence_adjustment_inverts_test_errors(self):
        clipped, raw = tpr_prevalence(50, 1000, STUDY)
        # rate = eta * prev + (1 - nu) * (1 - prev) solved for prev
        assert raw == pytest.approx((0.05 - 0.008) / 0.824)
        assert clipped == raw
        clipped, raw = tpr_prevalence(0, 1000, STUDY)
        assert raw < 0.0 and clipped == 0.0


class TestHtEstimateW:
    def test_perfect_census_counts_negatives(self):
        tested = np.ones(10, bool)
        positive = np.zeros(10, bool)
        positive[:2] = True
        assert ht_estimate_w(tested, positive, np.ones(10), PERFECT) == pytest.approx(8.0)

    def test_imperfect_census_arithmetic(self):
        tested = np.ones(1000, bool)
        positive = np.zeros(1000, bool)
        positive[:50] = True
        w_hat = ht_estimate_w(tested, positive, np.ones(1000), STUDY)
        assert w_hat == pytest.approx(950 / 0.824 - 0.168 * 1000 / 0.824)
        assert w_hat == pytest.approx(949.0291, abs=1e-3)

    def test_uninformative_test_rejected(self):
        with pytest.raises(ValueError):
            ht_estimate_w(np.ones(3, bool), np.zeros(3, bool), np.ones(3),
                          TestCharacteristics(0.5, 0.5))

    @pytest.mark.parametrize("tests", [PERFECT, STUDY], ids=["perfect", "imperfect"])
    def test_monte_carlo_unbiased_for_fixed_population(self, tests):
        # fixed membership vector, random testing draws: mean recovers W+
        rng = np.random.default_rng(17)
        n, w_plus, p = 1000, 940, 1 / 6
        well = np.zeros(n, bool)
        well[:w_plus] = True
        reps = 10_000
        est = np.empty(reps)
        for chunk in range(10):
            size = reps // 10
            d = rng.random((size, n)) < p
            pos_prob = np.where(well, 1 - tests.specificity, tests.sensitivity)
            y = d & (rng.random((size, n)) < pos_prob)
            k = (d & ~y).sum(axis=1) - (1 - tests.sensitivity) * d.sum(axis=1)
            est[chunk * size : (chunk + 1) * size] = (1 / p) * k / tests.youden
        se = est.std(ddof=1) / math.sqrt(reps)
        assert abs(est.mean() - w_plus) < 3 * se


class TestPrevalenceFromW:
    def test_direct(self):
        assert prevalence_from_w(8.0, 10, 0) == (pytest.approx(0.2), pytest.approx(0.2))

    def test_clipping(self):
        clipped, raw = prevalence_from_w(1005.0, 1000, 0)
        assert raw == pytest.approx(-0.005)
        assert clipped == 0.0

    def test_continues_census_example(self):
        clipped, _ = prevalence_from_w(949.0291262135922, 1000, 0)
        assert clipped == pytest.approx(0.05097, abs=5e-5)

    def test_empty_population_is_undefined(self):
        clipped, raw = prevalence_from_w(1.0, 10, 10)
        assert math.isnan(clipped) and math.isnan(raw)


class TestScheduleMatrices:
    def test_rotation_rows_are_deterministic(self):
        tau, c, t = 4, 2, 9
        m = exact_schedule_matrix(RegimenConfig.rotation_every(tau), c, t)
        for s in range(c, t + 1):
            z = min(s + tau, t + 1)
            row = np.zeros(t + 2)
            row[z] = 1.0
            assert np.array_equal(m.entries[s], row)

    def test_invariants_hold_for_all_builtins(self):
        regimens = [SIMPLE, RegimenConfig.max_gap(10), RegimenConfig.once_per_period(7),
                    RegimenConfig.min_max(10, 5), RegimenConfig.rotation_every(7)]
        for regimen in regimens:
            for t in (3, 8, 12):
                for c in range(t):
                    exact_schedule_matrix(regimen, c, t).validate()

    def test_estimated_matrix_from_panel(self):
        # three individuals, never removed; next tests after day 2 at 3, 4, none
        histories = [
            EventHistory(test_times=(2, 3), test_results=(False, False)),
            EventHistory(test_times=(2, 4), test_results=(False, False)),
            EventHistory(test_times=(2,), test_results=(False,)),
        ]
        panel = Panel.from_histories(histories, horizon=5)
        m = estimate_schedule_matrix(panel, 0, 5)
        m.validate()
        assert np.allclose(m.entries[2], [0, 0, 0, 1 / 3, 1 / 3, 0, 1 / 3])
        # day-1 row has no qualifying negative test: tail indicator
        assert np.allclose(m.entries[1], [0, 0, 0, 0, 0, 0, 1.0])

    def test_empty_stratum_raises(self):
        panel = Panel.from_histories([EventHistory()], horizon=4)
        with pytest.raises(DegenerateStratumError):
            estimate_schedule_matrix(panel, 2, 4)

    def test_validation_rejects_bad_matrices(self):
        m = exact_schedule_matrix(SIMPLE, 0, 5)
        bad = m.entries.copy()
        bad[2, 1] = 0.5  # below the diagonal
        with pytest.raises(ValueError):
            ScheduleMatrix(stratum=0, horizon=5, entries=bad).validate()


class TestTestingProbabilityFromMatrix:
    def test_memoryless_schedule_returns_p_everywhere(self):
        for t in (4, 9, 12):
            for c in range(t):
                m = exact_schedule_matrix(SIMPLE, c, t)
                for nu in (1.0, 0.992):
                    assert testing_probability_from_matrix(m, nu) == pytest.approx(1 / 6)

    def test_rotation_is_degenerate_off_cycle(self):
        m = exact_schedule_matrix(RegimenConfig.rotation_every(7), 0, 7)
        assert testing_probability_from_matrix(m, 1.0) == pytest.approx(1.0)
        m = exact_schedule_matrix(RegimenConfig.rotation_every(7), 0, 9)
        assert testing_probability_from_matrix(m, 1.0) == 0.0

    def test_zero_denominator_raises(self):
        entries = np.zeros((7, 7))  # deliberately invalid: no mass anywhere
        m = ScheduleMatrix(stratum=0, horizon=5, entries=entries)
        with pytest.raises(DegenerateStratumError):
            testing_probability_from_matrix(m, 0.9)

    def test_matches_forward_simulation_with_imperfect_specificity(self):
        nu = 0.992
        m = exact_schedule_matrix(SIMPLE, 0, 10)
        formula = testing_probability_from_matrix(m, nu)
        prob, se, _ = testing_process_oracle(SIMPLE, 0, 10, nu, n_paths=100_000, seed=42)
        assert abs(formula - prob[10]) < 3 * se[10]


def small_simulation(seed=21, regimen=SIMPLE, n=200, tests=STUDY):
    cfg = ScenarioConfig(
        population_size=n, horizon_days=15, regimen=regimen, tests=tests,
        hazard=HazardModel(external=ExternalHazard(kind="constant", rate=0.05),
                           initial_prevalence=0.1),
        removal_duration_days=4, seed=seed,
    )
    return simulate(cfg)


class TestHtEstimated:
    def test_census_with_perfect_tests_equals_tpr(self):
        sim = small_simulation(regimen=RegimenConfig.simple_random(1.0), tests=PERFECT)
        panel = sim.panel()
        for day in range(1, 16):
            nonrem = ~panel.removed[:, day]
            n_tests = int((panel.tested[:, day] & nonrem).sum())
            n_pos = int((panel.positive[:, day] & nonrem).sum())
            # every stratum weighted: the headcount fallback is a deliberate
            # departure from pure weighting, so it is disabled here
            est, table = ht_estimated(panel, day, PERFECT, min_stratum_size=1)
            assert all(e.weight == pytest.approx(1.0) for e in table.entries.values())
            assert est.estimate == pytest.approx(tpr(n_pos, n_tests)), day

    def test_zero_test_stratum_contributes_headcount(self):
        # 20 untouched individuals, 5 cleared on day 3 with no tests afterwards
        histories = [
            EventHistory(test_times=(2,), test_results=(False,)) for _ in range(10)
        ] + [
            EventHistory(test_times=(5,), test_results=(False,)) for _ in range(10)
        ] + [
            EventHistory(test_times=(1,), test_results=(True,), clearance_times=(3,))
            for _ in range(5)
        ]
        panel = Panel.from_histories(histories, horizon=6)
        est, table = ht_estimated(panel, 5, PERFECT, min_stratum_size=5)
        # stratum 0: 20 members, 10 tested negative at day 5 with weight 1/p
        assert table.entries[3].provenance == "fallback"
        assert est.n_fallback_strata == 1
        w0 = table.entries[0].weight
        w_hat = w0 * 10 + 5
        expected = (25 - w_hat) / 25
        assert est.unclipped == pytest.approx(expected)

    def test_weights_match_public_matrix_path(self):
        sim = small_simulation()
        panel = sim.panel()
        day = 12
        est, table = ht_estimated(panel, day, STUDY, min_stratum_size=5)
        for c, entry in table.entries.items():
            if entry.provenance != "estimated":
                continue
            m = estimate_schedule_matrix(panel, c, day)
            prob = testing_probability_from_matrix(m, STUDY.specificity)
            assert entry.weight == pytest.approx(1.0 / prob), c

    def test_batch_equals_materialised_resample(self):
        sim = small_simulation(seed=33)
        panel = sim.panel()
        day = 10
        rng = np.random.default_rng(7)
        idx = rng.integers(0, panel.n_individuals, panel.n_individuals)
        ev = DayEvaluator(panel, day, STUDY, min_stratum_size=5)
        via_batch = float(ev.batch(idx[None, :])[0])
        resampled = Panel(
            horizon=panel.horizon,
            tested=panel.tested[idx],
            positive=panel.positive[idx],
            removed=panel.removed[idx],
            cleared=panel.cleared[idx],
            last_clear=panel.last_clear[idx],
            next_test=panel.next_test[idx],
            assumed_well=panel.assumed_well[idx],
        )
        direct, _ = ht_estimated(resampled, day, STUDY, min_stratum_size=5)
        assert via_batch == pytest.approx(direct.estimate, abs=1e-12)

    def test_identity_multiplicity_equals_point(self):
        sim = small_simulation(seed=5)
        panel = sim.panel()
        ev = DayEvaluator(panel, 8, STUDY)
        point = float(ev.estimate()[0])
        ident = float(ev.batch(np.arange(panel.n_individuals)[None, :])[0])
        assert point == pytest.approx(ident, abs=1e-14)


class TestHtKnown:
    def test_zero_test_stratum_contributes_zero(self):
        histories = [
            EventHistory(test_times=(5,), test_results=(False,)) for _ in range(10)
        ] + [
            EventHistory(test_times=(1,), test_results=(True,), clearance_times=(3,))
            for _ in range(5)
        ]
        panel = Panel.from_histories(histories, horizon=6)
        est, table, variance = ht_known(panel, 5, PERFECT, lambda c, t: 2.0)
        # w_hat = 2 * 10 tested negatives + 0 from the untested stratum
        assert est.unclipped == pytest.approx((15 - 20) / 15)
        assert est.estimate == 0.0
        assert variance == pytest.approx(10 * (1 - 0.5) / 0.25)

    def test_weight_table_provenance(self):
        sim = small_simulation(seed=8)
        panel = sim.panel()
        _, table, _ = ht_known(panel, 6, STUDY, lambda c, t: 6.0)
        assert all(e.provenance == "known" for e in table.entries.values())


class TestBiasRatio:
    def test_equal_shares_unbiased(self):
        prev = {1: 0.1, 2: 0.4, 3: 0.2}
        share = {1: 0.2, 2: 0.5, 3: 0.3}
        assert bias_ratio(prev, share, dict(share)) == pytest.approx(1.0)

    def test_rotation_closed_form(self):
        # linear stratum prevalence, tests concentrated at the oldest stratum
        def ratio(tau, t=100):
            strata = list(range(t - tau, t))
            prev = {z: float(t - z) for z in strata}
            test_share = {z: 1.0 if z == t - tau else 0.0 for z in strata}
            pop_share = {z: 1.0 / tau for z in strata}
            return bias_ratio(prev, test_share, pop_share)

        assert ratio(7) == pytest.approx(2 * 7 / 8, abs=1e-12)
        assert abs(ratio(200, t=300) - 2.0) < 0.01

    def test_support_and_share_validation(self):
        with pytest.raises(ValueError):
            bias_ratio({1: 0.1}, {2: 1.0}, {1: 1.0})
        with pytest.raises(ValueError):
            bias_ratio({1: 0.1}, {1: 0.5}, {1: 1.0})

    def test_zero_denominator_marker(self):
        out = bias_ratio({1: 0.0}, {1: 1.0}, {1: 1.0})
        assert math.isnan(out)


class TestSeriesSerialisation:
    def test_csv_and_jsonl_round_trip(self, tmp_path):
        series = EstimateSeries([
            DayEstimate(day=1, kind="tpr", estimate=0.05, lo=0.01, hi=0.09,
                        n_tests=100, n_positive=5),
            DayEstimate(day=2, kind="ht-e", estimate=math.nan),
        ])
        csv_path = tmp_path / "series.csv"
        series.to_csv(csv_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "day,kind,estimate,lo,hi,n_tests,n_pos,n_fallback_strata"
        assert lines[1].startswith("1,tpr,0.05,0.01,0.09,100,5,0")
        assert lines[2].startswith("2,ht-e,nan")
        jsonl_path = tmp_path / "series.jsonl"
        series.to_jsonl(jsonl_path)
        import json

        rows = [json.loads(l) for l in jsonl_path.read_text().splitlines()]
        assert rows[0]["estimate"] == 0.05
        assert rows[1]["estimate"] is None

    def test_weight_table_rejects_sub_unit_weights(self):
        table = WeightTable(day=1)
        with pytest.raises(ValueError):
            table.add(0, 0.5, "known")


class TestWeightCap:
    def test_cap_limits_extreme_weights(self):
        sim = small_simulation(seed=12)
        panel = sim.panel()
        capped, table = ht_estimated(panel, 12, STUDY, min_stratum_size=5, weight_cap=3.0)
        assert all(e.weight <= 3.0 for e in table.entries.values()
                   if e.provenance == "estimated")
        uncapped, _ = ht_estimated(panel, 12, STUDY, min_stratum_size=5)
        assert capped.estimate >= uncapped.estimate  # smaller weights, smaller well count

    def test_default_is_uncapped(self):
        sim = small_simulation(seed=12)
        a, _ = ht_estimated(sim.panel(), 12, STUDY, min_stratum_size=5)
        b, _ = ht_estimated(sim.panel(), 12, STUDY, min_stratum_size=5, weight_cap=None)
        assert a.estimate == b.estimate

    def test_sub_unit_cap_rejected(self):
        sim = small_simulation(seed=12)
        with pytest.raises(ValueError):
            ht_estimated(sim.panel(), 5, STUDY, weight_cap=0.5)


def test_clipping_never_moves_away_from_truth():
    rng = np.random.default_rng(3)
    for _ in range(500):
        x = float(rng.normal(0.3, 0.6))
        truth = float(rng.uniform(0, 1))
        clipped = min(max(x, 0.0), 1.0)
        assert abs(clipped - truth) <= abs(x - truth) + 1e-15
