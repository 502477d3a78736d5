"""Named simulation scenarios and the replication harness.

Nine built-in scenarios share one population model (1000 individuals in
clusters of 4 over a 21-day window, 2% baseline prevalence, a parabolic
external exposure hazard plus a per-infectious-clustermate hazard of 1/5,
halved external hazard after a first exposure, 5 isolation days, test
sensitivity 83.2% and specificity 99.2%) and differ in the testing regimen
or in which estimator assumption they deliberately break:

=====================  ======================================================
simple-random           test each day with probability 1/6
max-gap                 quadratic hazard, forced test 10 days after the last
once-per-period         one uniform test per 7-day period
min-max                 max-gap with a 5-day minimum spacing
undetected-recoveries   min-max; infectious recover undetected 6 days after
                        exposure
time-varying-sensitivity min-max; sensitivity follows a parabola in days
                        since exposure (estimation assumes its 55.7% mean)
symptomatic             min-max; 1/4 of new infections force a test on their
                        first infectious day
contact-tracing         min-max; clustermates of a positive are tested the
                        next day (known-weight estimator unavailable)
clustered               min-max schedule applied to whole clusters
=====================  ======================================================
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .core import TestCharacteristics
from .estimators import (
    DayEstimate,
    DayEvaluator,
    EstimateSeries,
    Panel,
    exact_schedule_matrix,
    ht_known,
    testing_probability_from_matrix,
    tpr_prevalence,
)
from .regimens import ConfigError, Overlays, RegimenConfig, next_test_pmf
from .simulate import (
    ExternalHazard,
    HazardModel,
    ScenarioConfig,
    SensitivityCurve,
    simulate,
)
from .uncertainty import (
    IntervalSpec,
    bca_bootstrap,
    clopper_pearson,
    wald_prevalence_interval,
)

def _nan_aggregate(func, *args, **kwargs):
    # day 0 is all-nan by construction; silence the empty-slice warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return func(*args, **kwargs)


SCENARIO_NAMES = (
    "simple-random",
    "max-gap",
    "once-per-period",
    "min-max",
    "undetected-recoveries",
    "time-varying-sensitivity",
    "symptomatic",
    "contact-tracing",
    "clustered",
)

STUDY_TESTS = TestCharacteristics(sensitivity=0.832, specificity=0.992)
# Mean of the time-varying sensitivity parabola over the 10 days post exposure.
ASSUMED_SENSITIVITY_TIME_VARYING = 0.557


def study_hazard(horizon: int = 21) -> HazardModel:
    return HazardModel(
        external=ExternalHazard(kind="bump", shape_horizon=horizon, peak=1 / 10, base=1 / 50,
                                scale=1 / 30),
        within_cluster_rate=1 / 5,
        repeat_exposure_multiplier=1 / 2,
        initial_prevalence=0.02,
    )


@dataclass(frozen=True)
class ScenarioBundle:
    """A simulation config paired with its estimation-side settings."""

    name: str
    config: ScenarioConfig
    assumed_tests: TestCharacteristics
    ht_known_available: bool = True
    known_weights_by_renewal: bool = False  # cluster-level schedules ignore clearances


def build_scenario(
    name: str, population_size: int = 1000, horizon_days: int = 21
) -> ScenarioBundle:
    if name not in SCENARIO_NAMES:
        raise ConfigError(f"unknown scenario {name!r}; expected one of {SCENARIO_NAMES}")
    min_max = RegimenConfig.min_max(gap=10, min_gap=5)
    base = dict(
        population_size=population_size,
        horizon_days=horizon_days,
        cluster_size=4,
        tests=STUDY_TESTS,
        hazard=study_hazard(horizon_days),
        removal_duration_days=5,
    )
    assumed = STUDY_TESTS
    ht_k = True
    renewal = False
    if name == "simple-random":
        config = ScenarioConfig(regimen=RegimenConfig.simple_random(1 / 6), **base)
    elif name == "max-gap":
        config = ScenarioConfig(regimen=RegimenConfig.max_gap(gap=10), **base)
    elif name == "once-per-period":
        config = ScenarioConfig(regimen=RegimenConfig.once_per_period(period=7), **base)
    elif name == "min-max":
        config = ScenarioConfig(regimen=min_max, **base)
    elif name == "undetected-recoveries":
        config = ScenarioConfig(
            regimen=min_max, undetected_recovery_days=6, baseline_exposure_window=6, **base
        )
    elif name == "time-varying-sensitivity":
        config = ScenarioConfig(
            regimen=min_max,
            sensitivity_curve=SensitivityCurve(peak=STUDY_TESTS.sensitivity, window=10),
            baseline_exposure_window=6,
            **base,
        )
        assumed = TestCharacteristics(ASSUMED_SENSITIVITY_TIME_VARYING, STUDY_TESTS.specificity)
    elif name == "symptomatic":
        regimen = replace(min_max, overlays=Overlays(symptomatic_probability=1 / 4))
        config = ScenarioConfig(regimen=regimen, **base)
    elif name == "contact-tracing":
        regimen = replace(min_max, overlays=Overlays(contact_tracing=True))
        config = ScenarioConfig(regimen=regimen, **base)
        ht_k = False
    else:  # clustered
        config = ScenarioConfig(regimen=RegimenConfig.clustered(min_max), **base)
        renewal = True
    return ScenarioBundle(
        name=name,
        config=config,
        assumed_tests=assumed,
        ht_known_available=ht_k,
        known_weights_by_renewal=renewal,
    )


# ---------------------------------------------------------------------------
# Known testing-probability weights


def renewal_fire_probabilities(regimen: RegimenConfig, horizon: int) -> np.ndarray:
    """P[schedule fires on day d] for a renewal schedule that never resets.

    Used for cluster-level schedules: the cluster keeps testing on its own
    clock, so an individual's clearance does not move their next test.
    """
    base = regimen.base if regimen.kind == "clustered" else regimen
    first = next_test_pmf(base, 0, "clearance", horizon)
    gap_row = next_test_pmf(base, 1, "test", horizon + 1)
    gap = np.zeros(horizon + 1)
    for j in range(1, min(horizon, gap_row.size - 2) + 1):
        gap[j] = gap_row[1 + j]
    fire = np.zeros(horizon + 1)
    for d in range(1, horizon + 1):
        fire[d] = first[d] + sum(fire[s] * gap[d - s] for s in range(1, d))
    return fire


class KnownWeights:
    """Reciprocal testing probabilities implied by a regimen, cached per (stratum, day)."""

    def __init__(self, bundle: ScenarioBundle):
        self.regimen = bundle.config.regimen
        self.specificity = bundle.assumed_tests.specificity
        self.by_renewal = bundle.known_weights_by_renewal
        self.horizon = bundle.config.horizon_days
        self._cache: dict[tuple[int, int], float] = {}
        self._fire: Optional[np.ndarray] = None
        if self.by_renewal:
            self._fire = renewal_fire_probabilities(self.regimen, self.horizon)

    def __call__(self, stratum: int, day: int) -> float:
        key = (stratum, day)
        if key not in self._cache:
            if self._fire is not None:
                prob = float(self._fire[day])
            else:
                matrix = exact_schedule_matrix(self.regimen, stratum, day)
                prob = testing_probability_from_matrix(matrix, self.specificity)
            if prob <= 0.0:
                raise ConfigError(
                    f"regimen gives zero testing probability for stratum {stratum} on day {day}"
                )
            self._cache[key] = 1.0 / prob
        return self._cache[key]


# ---------------------------------------------------------------------------
# Series assembly shared by the scenario harness and the data pipeline


def estimate_panel_series(
    panel: Panel,
    tests: TestCharacteristics,
    estimators: Sequence[str] = ("tpr", "ht-e"),
    interval_spec: Optional[IntervalSpec] = None,
    known_weights: Optional[Callable[[int, int], float]] = None,
    min_stratum_size: int = 10,
    excluded_days: Optional[np.ndarray] = None,
    seed: int = 0,
) -> EstimateSeries:
    """Per-day estimates (and optional intervals) for every requested estimator.

    Excluded days yield undefined-marker records so that the day indexing
    stays dense.  ``known_weights`` must be supplied for the ``ht-k``
    estimator.
    """
    series = EstimateSeries()
    level = interval_spec.level if interval_spec is not None else 0.95
    for day in range(1, panel.horizon + 1):
        excluded = bool(excluded_days[day]) if excluded_days is not None else False
        nonrem = ~panel.removed[:, day]
        n_tests = int((panel.tested[:, day] & nonrem).sum())
        n_pos = int((panel.positive[:, day] & nonrem).sum())
        for kind in estimators:
            if excluded or n_tests == 0:
                series.append(DayEstimate(day=day, kind=kind, estimate=math.nan,
                                          n_tests=n_tests, n_positive=n_pos))
                continue
            if kind == "tpr":
                est, raw = tpr_prevalence(n_pos, n_tests, tests)
                record = DayEstimate(day=day, kind="tpr", estimate=est, unclipped=raw,
                                     n_tests=n_tests, n_positive=n_pos)
                if interval_spec is not None:
                    lo, hi = clopper_pearson(n_pos, n_tests, level)
                    lo = (lo - (1.0 - tests.specificity)) / tests.youden
                    hi = (hi - (1.0 - tests.specificity)) / tests.youden
                    record.lo = min(max(lo, 0.0), 1.0)
                    record.hi = min(max(hi, 0.0), 1.0)
            elif kind == "ht-k":
                if known_weights is None:
                    raise ValueError("ht-k requires known testing-probability weights")
                record, _, variance = ht_known(panel, day, tests, known_weights)
                if interval_spec is not None:
                    w_hat_scale = int(nonrem.sum())
                    record.lo, record.hi = wald_prevalence_interval(
                        (1.0 - record.unclipped) * w_hat_scale, variance,
                        panel.n_individuals, int((~nonrem).sum()), level,
                    )
            elif kind == "ht-e":
                evaluator = DayEvaluator(panel, day, tests, min_stratum_size)
                point = float(evaluator.estimate()[0])
                record = DayEstimate(
                    day=day, kind="ht-e", estimate=point,
                    unclipped=float(evaluator._last_unclipped[0]),
                    n_tests=n_tests, n_positive=n_pos,
                    n_fallback_strata=int(evaluator._last_fallback[0]),
                )
                if interval_spec is not None:
                    interval = bca_bootstrap(
                        evaluator.resampler(), panel.n_individuals, interval_spec,
                        seed=(seed, day), point=record.unclipped,
                    )
                    record.lo, record.hi = interval.lo, interval.hi
            else:
                raise ValueError(f"unknown estimator kind {kind!r}")
            if interval_spec is not None and not math.isnan(record.lo):
                record.lo = min(record.lo, record.estimate)
                record.hi = max(record.hi, record.estimate)
            series.append(record)
    return series


# ---------------------------------------------------------------------------
# Replicated scenario runs


@dataclass
class ScenarioRunResult:
    """Per-replicate, per-day estimates and realised truths for one scenario."""

    name: str
    replicates: int
    seed: int
    estimators: tuple[str, ...]
    truth: np.ndarray                      # [replicates, horizon + 1]
    estimates: dict[str, np.ndarray]       # kind -> [replicates, horizon + 1], clipped to [0, 1]
    unclipped: dict[str, np.ndarray]       # kind -> same shape, no [0, 1] restriction
    covered: dict[str, np.ndarray]         # kind -> bool/nan array, same shape
    with_intervals: bool

    @property
    def horizon(self) -> int:
        return self.truth.shape[1] - 1

    @property
    def days(self) -> np.ndarray:
        return np.arange(1, self.horizon + 1)

    def mean_truth(self) -> np.ndarray:
        return _nan_aggregate(np.nanmean, self.truth, axis=0)

    def mean_estimate(self, kind: str) -> np.ndarray:
        return _nan_aggregate(np.nanmean, self.estimates[kind], axis=0)

    def bias(self, kind: str) -> np.ndarray:
        return _nan_aggregate(np.nanmean, self.estimates[kind] - self.truth, axis=0)

    def bias_unclipped(self, kind: str) -> np.ndarray:
        """Bias of the unrestricted estimator (the clipped one is biased up by design)."""
        return _nan_aggregate(np.nanmean, self.unclipped[kind] - self.truth, axis=0)

    def mc_se_unclipped(self, kind: str) -> np.ndarray:
        return _nan_aggregate(np.nanstd, self.unclipped[kind], axis=0, ddof=1) / math.sqrt(self.replicates)

    def rmse(self, kind: str) -> np.ndarray:
        return np.sqrt(_nan_aggregate(np.nanmean, (self.estimates[kind] - self.truth) ** 2, axis=0))

    def coverage(self, kind: str) -> np.ndarray:
        return _nan_aggregate(np.nanmean, self.covered[kind], axis=0)

    def mc_se(self, kind: str) -> np.ndarray:
        """Monte Carlo standard error of the mean estimate, per day."""
        return _nan_aggregate(np.nanstd, self.estimates[kind], axis=0, ddof=1) / math.sqrt(self.replicates)

    def rows(self):
        """Tidy aggregate rows (scenario, estimator, day, ...)."""
        mean_truth = self.mean_truth()
        for kind in self.estimators:
            mean_est = self.mean_estimate(kind)
            bias = self.bias(kind)
            rmse = self.rmse(kind)
            cover = self.coverage(kind) if self.with_intervals else np.full_like(mean_truth, np.nan)
            for day in range(1, self.horizon + 1):
                yield {
                    "scenario": self.name,
                    "estimator": kind,
                    "day": day,
                    "mean_estimate": float(mean_est[day]),
                    "mean_truth": float(mean_truth[day]),
                    "bias": float(bias[day]),
                    "rmse": float(rmse[day]),
                    "ci_coverage": float(cover[day]),
                }


def run_scenario(
    bundle: ScenarioBundle | str,
    replicates: int,
    seed: int = 0,
    estimators: Optional[Sequence[str]] = None,
    interval_spec: Optional[IntervalSpec] = None,
    min_stratum_size: int = 10,
    population_size: Optional[int] = None,
    first_replicate: int = 0,
    log: Optional[Callable[[str], None]] = None,
) -> ScenarioRunResult:
    """Replicate a scenario and collect per-day estimates against realised truths.

    Coverage is evaluated per replicate against that replicate's realised
    prevalence among the non-removed population.  Replicate RNG streams are
    keyed by absolute replicate index, so partitioned runs (``first_replicate``
    offsets) reproduce a single sequential run exactly.
    """
    if isinstance(bundle, str):
        bundle = build_scenario(bundle)
    if population_size is not None and population_size != bundle.config.population_size:
        bundle = replace(
            bundle, config=replace(bundle.config, population_size=population_size)
        )
    if replicates < 1:
        raise ConfigError("need at least one replicate")
    if estimators is None:
        estimators = ("tpr", "ht-k", "ht-e") if bundle.ht_known_available else ("tpr", "ht-e")
    estimators = tuple(estimators)
    if "ht-k" in estimators and not bundle.ht_known_available:
        raise ConfigError(f"known-weight estimator is not available for {bundle.name!r}")
    config = bundle.config
    horizon = config.horizon_days
    n = config.population_size
    tests = bundle.assumed_tests
    weights = KnownWeights(bundle) if "ht-k" in estimators else None
    with_intervals = interval_spec is not None
    level = interval_spec.level if with_intervals else 0.95

    truth = np.full((replicates, horizon + 1), np.nan)
    estimates = {k: np.full((replicates, horizon + 1), np.nan) for k in estimators}
    unclipped = {k: np.full((replicates, horizon + 1), np.nan) for k in estimators}
    covered = {k: np.full((replicates, horizon + 1), np.nan) for k in estimators}

    for r in range(replicates):
        abs_r = first_replicate + r
        sim = simulate(config, seed=(seed, abs_r))
        panel = sim.panel()
        truth_r = sim.true_prevalence()
        truth[r] = truth_r
        for day in range(1, horizon + 1):
            nonrem = ~panel.removed[:, day]
            n_tests = int((panel.tested[:, day] & nonrem).sum())
            n_pos = int((panel.positive[:, day] & nonrem).sum())
            for kind in estimators:
                if n_tests == 0:
                    continue
                lo = hi = math.nan
                if kind == "tpr":
                    value, raw = tpr_prevalence(n_pos, n_tests, tests)
                    if with_intervals:
                        lo, hi = clopper_pearson(n_pos, n_tests, level)
                        lo = max((lo - (1.0 - tests.specificity)) / tests.youden, 0.0)
                        hi = min((hi - (1.0 - tests.specificity)) / tests.youden, 1.0)
                elif kind == "ht-k":
                    record, _, variance = ht_known(panel, day, tests, weights)
                    value, raw = record.estimate, record.unclipped
                    if with_intervals:
                        nonrem_n = int(nonrem.sum())
                        w_hat = nonrem_n - record.unclipped * nonrem_n
                        lo, hi = wald_prevalence_interval(
                            w_hat, variance, n, n - nonrem_n, level
                        )
                else:
                    evaluator = DayEvaluator(panel, day, tests, min_stratum_size)
                    value = float(evaluator.estimate()[0])
                    raw = float(evaluator._last_unclipped[0])
                    if with_intervals:
                        interval = bca_bootstrap(
                            evaluator.resampler(), n, interval_spec, seed=(seed, abs_r, day),
                            point=raw,
                        )
                        lo, hi = interval.lo, interval.hi
                estimates[kind][r, day] = value
                unclipped[kind][r, day] = raw
                if with_intervals:
                    covered[kind][r, day] = float(lo <= truth_r[day] <= hi)
        if log is not None and (r + 1) % max(1, replicates // 10) == 0:
            log(f"{bundle.name}: replicate {r + 1}/{replicates}")
    return ScenarioRunResult(
        name=bundle.name,
        replicates=replicates,
        seed=seed,
        estimators=estimators,
        truth=truth,
        estimates=estimates,
        unclipped=unclipped,
        covered=covered,
        with_intervals=with_intervals,
    )
