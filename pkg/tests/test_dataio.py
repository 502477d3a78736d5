import datetime as dt
import json

import numpy as np
import pytest

from prevest.core import TestCharacteristics
from prevest.dataio import (
    ABSENT,
    NEGATIVE,
    POSITIVE,
    AdjustmentPolicy,
    ParseError,
    TestingMatrix,
    anonymize_shuffle,
    apply_adjustments,
    load_adjustment_policy,
    load_interval_spec,
    load_scenario_config,
    matrix_from_simulation,
    parse_testing_matrix,
    scenario_config_from_dict,
    write_testing_matrix,
)
from prevest.estimators import ht_estimated, tpr_prevalence
from prevest.regimens import ConfigError, RegimenConfig
from prevest.simulate import ExternalHazard, HazardModel, ScenarioConfig, simulate

MONDAY = dt.date(2020, 8, 31)


def write(tmp_path, text, name="m.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def small_sim(seed=0, n=200, horizon=15):
    cfg = ScenarioConfig(
        population_size=n, horizon_days=horizon,
        regimen=RegimenConfig.min_max(gap=6, min_gap=2),
        tests=TestCharacteristics(0.832, 0.992),
        hazard=HazardModel(external=ExternalHazard(kind="constant", rate=0.05),
                           initial_prevalence=0.1),
        removal_duration_days=4, seed=seed,
    )
    return simulate(cfg)


class TestParsing:
    def test_two_by_three(self, tmp_path):
        path = write(tmp_path, "2020-08-31,2020-09-01,2020-09-02\nN,,P\n,N,\n")
        m = parse_testing_matrix(path)
        assert m.n_individuals == 2 and m.n_days == 3
        assert m.n_tests() == 3
        assert m.cells[0, 2] == POSITIVE and m.cells[1, 1] == NEGATIVE
        assert m.cells[0, 1] == ABSENT

    def test_id_column(self, tmp_path):
        path = write(tmp_path, "id,2020-08-31,2020-09-01\nr1,N,\nr2,,P\n")
        m = parse_testing_matrix(path)
        assert m.row_labels == ["r1", "r2"]
        assert m.n_days == 2

    def test_empty_file(self, tmp_path):
        with pytest.raises(ParseError, match="empty"):
            parse_testing_matrix(write(tmp_path, ""))

    def test_ragged_row_reports_line(self, tmp_path):
        with pytest.raises(ParseError, match="line 3"):
            parse_testing_matrix(write(tmp_path, "2020-08-31,2020-09-01\nN,\nN\n"))

    def test_unknown_symbol_reports_position(self, tmp_path):
        with pytest.raises(ParseError, match="line 2, column 2"):
            parse_testing_matrix(write(tmp_path, "2020-08-31,2020-09-01\nN,X\n"))

    def test_gapped_dates_rejected(self, tmp_path):
        with pytest.raises(ParseError, match="consecutive"):
            parse_testing_matrix(write(tmp_path, "2020-08-31,2020-09-02\nN,\n"))

    def test_round_trip_file(self, tmp_path):
        sim = small_sim()
        matrix = matrix_from_simulation(sim, start_date=MONDAY)
        path = tmp_path / "sim.csv"
        write_testing_matrix(matrix, path)
        back = parse_testing_matrix(path)
        assert back.dates == matrix.dates
        assert np.array_equal(back.cells, matrix.cells)


class TestAdjustments:
    def test_result_delay_and_isolation_window(self):
        cells = np.full((1, 20), ABSENT, dtype=np.int8)
        cells[0, 2] = POSITIVE  # study day 3
        m = TestingMatrix([MONDAY + dt.timedelta(days=j) for j in range(20)], cells)
        adj = apply_adjustments(m, AdjustmentPolicy(result_delay_days=2, isolation_days=10,
                                                    post_isolation_exemption_days=90,
                                                    keep_first_test_per_week=False,
                                                    min_daily_tests=0))
        removed = adj.panel.removed[0]
        assert not removed[5] and removed[6] and removed[15]  # days 6..15 removed
        assert not removed[16]
        assert adj.panel.cleared[0, 15]
        assert adj.panel.assumed_well[0, 16] and adj.panel.assumed_well[0, 20]

    def test_weekly_filter_keeps_first_test(self):
        cells = np.full((1, 14), ABSENT, dtype=np.int8)
        cells[0, 1] = NEGATIVE  # Tuesday
        cells[0, 3] = NEGATIVE  # Thursday, same week: dropped
        cells[0, 7] = NEGATIVE  # next Monday: kept
        m = TestingMatrix([MONDAY + dt.timedelta(days=j) for j in range(14)], cells)
        adj = apply_adjustments(m, AdjustmentPolicy(min_daily_tests=0))
        assert adj.n_dropped_weekly == 1
        assert list(np.flatnonzero(adj.panel.tested[0])) == [2, 8]

    def test_min_daily_tests_exclusion(self):
        cells = np.full((99, 2), NEGATIVE, dtype=np.int8)
        m = TestingMatrix([MONDAY, MONDAY + dt.timedelta(days=1)], cells)
        adj = apply_adjustments(m, AdjustmentPolicy(keep_first_test_per_week=False))
        assert bool(adj.excluded_days[1]) and bool(adj.excluded_days[2])
        bigger = TestingMatrix([MONDAY], np.full((100, 1), NEGATIVE, dtype=np.int8))
        adj2 = apply_adjustments(bigger, AdjustmentPolicy(keep_first_test_per_week=False))
        assert not adj2.excluded_days[1]

    def test_idempotent(self):
        sim = small_sim(seed=5)
        matrix = matrix_from_simulation(sim, start_date=MONDAY)
        policy = AdjustmentPolicy(result_delay_days=1, isolation_days=7,
                                  post_isolation_exemption_days=20, min_daily_tests=3)
        once = apply_adjustments(matrix, policy)
        twice = apply_adjustments(once.to_matrix(), policy)
        for name in ("tested", "positive", "removed", "cleared", "assumed_well"):
            assert np.array_equal(getattr(once.panel, name), getattr(twice.panel, name)), name
        assert np.array_equal(once.excluded_days, twice.excluded_days)

    def test_round_trip_matches_direct_panel(self):
        sim = small_sim(seed=9)
        matrix = matrix_from_simulation(sim, start_date=MONDAY)
        policy = AdjustmentPolicy.for_simulation(sim.config)
        adj = apply_adjustments(matrix, policy)
        direct = sim.panel()
        for name in ("tested", "positive", "removed", "cleared", "last_clear"):
            assert np.array_equal(getattr(adj.panel, name), getattr(direct, name)), name
        for day in (4, 9, 15):
            a, _ = ht_estimated(adj.panel, day, sim.config.tests)
            b, _ = ht_estimated(direct, day, sim.config.tests)
            assert a.estimate == b.estimate


def series_fingerprint(panel, tests, days):
    out = []
    for day in days:
        nonrem = ~panel.removed[:, day]
        n_tests = int((panel.tested[:, day] & nonrem).sum())
        n_pos = int((panel.positive[:, day] & nonrem).sum())
        est, _ = ht_estimated(panel, day, tests, min_stratum_size=5)
        out.append((n_tests, n_pos, tpr_prevalence(n_pos, n_tests, tests)[0], est.estimate))
    return out


class TestAnonymizer:
    def test_single_individual_unchanged(self):
        cells = np.array([[NEGATIVE, ABSENT, POSITIVE]], dtype=np.int8)
        m = TestingMatrix([MONDAY + dt.timedelta(days=j) for j in range(3)], cells)
        out = anonymize_shuffle(m, seed=3)
        assert np.array_equal(out.cells, m.cells)

    def test_daily_counts_preserved(self):
        sim = small_sim(seed=2)
        m = matrix_from_simulation(sim, start_date=MONDAY)
        out = anonymize_shuffle(m, seed=1, policy=AdjustmentPolicy.for_simulation(sim.config))
        assert np.array_equal((out.cells >= 0).sum(axis=0), (m.cells >= 0).sum(axis=0))
        assert np.array_equal((out.cells == POSITIVE).sum(axis=0),
                              (m.cells == POSITIVE).sum(axis=0))

    def test_estimators_invariant_under_shuffle(self):
        sim = small_sim(seed=4)
        m = matrix_from_simulation(sim, start_date=MONDAY)
        policy = AdjustmentPolicy.for_simulation(sim.config)
        out = anonymize_shuffle(m, seed=8, policy=policy)
        assert not np.array_equal(out.cells, m.cells)  # it actually shuffled
        days = range(1, sim.horizon + 1)
        before = series_fingerprint(apply_adjustments(m, policy).panel, sim.config.tests, days)
        after = series_fingerprint(apply_adjustments(out, policy).panel, sim.config.tests, days)
        assert before == after

    def test_seeded_shuffle_reproducible(self):
        sim = small_sim(seed=6)
        m = matrix_from_simulation(sim, start_date=MONDAY)
        a = anonymize_shuffle(m, seed=5)
        b = anonymize_shuffle(m, seed=5)
        assert np.array_equal(a.cells, b.cells)
        assert a.row_labels is None


class TestConfigFiles:
    def test_scenario_round_trip(self, tmp_path):
        obj = {
            "population_size": 120,
            "horizon_days": 10,
            "cluster_size": 4,
            "seed": 7,
            "tests": {"sensitivity": 0.832, "specificity": 0.992},
            "hazard": {
                "initial_prevalence": 0.02,
                "within_cluster_rate": 0.2,
                "repeat_exposure_multiplier": 0.5,
                "external": {"kind": "bump", "shape_horizon": 21, "peak": 0.1,
                             "base": 0.02, "scale": 0.0333},
            },
            "regimen": {"kind": "min-max", "gap": 10, "min_gap": 5,
                        "overlays": {"contact_tracing": True}},
        }
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(obj))
        cfg = load_scenario_config(path)
        assert cfg.population_size == 120
        assert cfg.regimen.min_gap == 5 and cfg.regimen.overlays.contact_tracing
        assert cfg.hazard.external.kind == "bump"

    def test_unknown_key_is_named(self):
        with pytest.raises(ConfigError, match="weekly_quota"):
            scenario_config_from_dict({
                "population_size": 10, "horizon_days": 5, "weekly_quota": 3,
                "regimen": {"kind": "simple-random", "p": 0.2},
            })

    def test_missing_regimen(self):
        with pytest.raises(ConfigError, match="regimen"):
            scenario_config_from_dict({"population_size": 10, "horizon_days": 5})

    def test_invalid_json_reports_line(self, tmp_path):
        path = write(tmp_path, '{"population_size": 10,\n  "bad"\n}', name="broken.json")
        with pytest.raises(ConfigError, match=r"line \d"):
            load_scenario_config(path)

    def test_policy_and_interval_loaders(self, tmp_path):
        p = tmp_path / "policy.json"
        p.write_text(json.dumps({"result_delay_days": 1, "isolation_days": 5}))
        policy = load_adjustment_policy(p)
        assert policy.isolation_days == 5 and policy.assumed_specificity == 1.0
        i = tmp_path / "iv.json"
        i.write_text(json.dumps({"bootstrap_iterations": 199, "jackknife_block_count": 79}))
        spec = load_interval_spec(i)
        assert spec.bootstrap_iterations == 199 and spec.jackknife_block_count == 79
