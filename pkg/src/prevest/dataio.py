"""Testing-matrix files, anonymisation, and the real-data adjustment pipeline.

The interchange format is a delimited text matrix: one row per individual,
one column per calendar day, cells ``P`` (positive), ``N`` (negative) or
empty (no test).  The header row holds ISO dates, optionally preceded by an
``id`` column of opaque row labels.  Columns must be consecutive calendar
days; internally column ``j`` maps to study day ``j + 1`` (day 0 is the
pre-surveillance baseline).

Scenario, regimen, adjustment-policy and interval configs are JSON objects;
see the README for the schema and defaults.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .core import TestCharacteristics
from .estimators import Panel
from .regimens import ConfigError, Overlays, RegimenConfig
from .simulate import (
    ExternalHazard,
    HazardModel,
    ScenarioConfig,
    SensitivityCurve,
    SimulationResult,
)
from .uncertainty import IntervalSpec

ABSENT, NEGATIVE, POSITIVE = -1, 0, 1
_CELLS = {"": ABSENT, "N": NEGATIVE, "P": POSITIVE}
_SYMBOLS = {ABSENT: "", NEGATIVE: "N", POSITIVE: "P"}


class ParseError(ValueError):
    """Malformed testing-matrix input, with 1-based file coordinates."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
        self.line = line
        self.column = column


@dataclass
class TestingMatrix:
    dates: list[dt.date]
    cells: np.ndarray  # int8 [individuals, days]
    row_labels: Optional[list[str]] = None

    __test__ = False  # "Testing" prefix is domain vocabulary, not a pytest suite

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int8)
        if self.cells.ndim != 2 or self.cells.shape[1] != len(self.dates):
            raise ValueError("cell matrix shape does not match the date header")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise ValueError(f"day columns must be consecutive: {a} -> {b}")

    @property
    def n_individuals(self) -> int:
        return self.cells.shape[0]

    @property
    def n_days(self) -> int:
        return self.cells.shape[1]

    def tests_per_day(self) -> np.ndarray:
        return (self.cells >= 0).sum(axis=0)

    def n_tests(self) -> int:
        return int((self.cells >= 0).sum())


def parse_testing_matrix(path) -> TestingMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise ParseError("empty testing-matrix file")
    header = [h.strip() for h in lines[0].split(",")]
    has_ids = False
    try:
        dt.date.fromisoformat(header[0])
    except ValueError:
        has_ids = True
    date_cells = header[1:] if has_ids else header
    if not date_cells:
        raise ParseError("header contains no date columns", line=1)
    dates = []
    for j, cell in enumerate(date_cells):
        try:
            dates.append(dt.date.fromisoformat(cell))
        except ValueError:
            raise ParseError(f"bad date {cell!r} in header", line=1, column=j + 1 + has_ids)
    for j, (a, b) in enumerate(zip(dates, dates[1:])):
        if (b - a).days != 1:
            raise ParseError(
                f"dates must be consecutive calendar days: {a} then {b}",
                line=1,
                column=j + 2 + has_ids,
            )
    n_cols = len(header)
    labels: list[str] = []
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != n_cols:
            raise ParseError(f"row has {len(parts)} fields, header has {n_cols}", line=i)
        if has_ids:
            labels.append(parts[0])
            parts = parts[1:]
        row = np.empty(len(parts), dtype=np.int8)
        for j, cell in enumerate(parts):
            value = _CELLS.get(cell.upper())
            if value is None:
                raise ParseError(f"unknown cell symbol {cell!r}", line=i, column=j + 1 + has_ids)
            row[j] = value
        rows.append(row)
    if not rows:
        raise ParseError("testing-matrix file has a header but no rows")
    return TestingMatrix(
        dates=dates, cells=np.vstack(rows), row_labels=labels if has_ids else None
    )


def write_testing_matrix(matrix: TestingMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        header = [d.isoformat() for d in matrix.dates]
        if matrix.row_labels is not None:
            header = ["id"] + header
        fh.write(",".join(header) + "\n")
        for i in range(matrix.n_individuals):
            cells = [_SYMBOLS[int(v)] for v in matrix.cells[i]]
            if matrix.row_labels is not None:
                cells = [matrix.row_labels[i]] + cells
            fh.write(",".join(cells) + "\n")


def matrix_from_simulation(
    sim: SimulationResult, start_date: dt.date = dt.date(2020, 8, 31)
) -> TestingMatrix:
    """Export simulated tests: column ``j`` is study day ``j + 1``."""
    horizon = sim.horizon
    cells = np.full((sim.population_size, horizon), ABSENT, dtype=np.int8)
    tested = sim.tested[1:].T  # [n, horizon]
    cells[tested] = np.where(sim.positive[1:].T[tested], POSITIVE, NEGATIVE)
    dates = [start_date + dt.timedelta(days=j) for j in range(horizon)]
    return TestingMatrix(dates=dates, cells=cells)


# ---------------------------------------------------------------------------
# Adjustment pipeline


@dataclass(frozen=True)
class AdjustmentPolicy:
    """Bookkeeping rules that turn a raw testing matrix into event histories.

    Results arrive ``result_delay_days`` after the swab; an individual who
    tests positive counts as infectious (non-removed) through the result
    day, is removed for the following ``isolation_days``, and is then
    assumed well while exempt from testing until ``post_isolation_exemption_days``
    after the positive test.  ``keep_first_test_per_week`` drops all but the
    first test per individual per Monday-to-Sunday week; days with fewer
    than ``min_daily_tests`` retained tests are excluded from estimation.
    """

    result_delay_days: int = 2
    isolation_days: int = 10
    post_isolation_exemption_days: int = 90
    keep_first_test_per_week: bool = True
    min_daily_tests: int = 100
    assumed_sensitivity: float = 0.832
    assumed_specificity: float = 1.0

    def __post_init__(self):
        for name in ("result_delay_days", "isolation_days", "post_isolation_exemption_days",
                     "min_daily_tests"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} cannot be negative")
        if self.isolation_days < 1:
            raise ConfigError("isolation must last at least one day")

    @property
    def tests(self) -> TestCharacteristics:
        return TestCharacteristics(self.assumed_sensitivity, self.assumed_specificity)

    @staticmethod
    def for_simulation(config: ScenarioConfig) -> "AdjustmentPolicy":
        """Policy matching the simulator's bookkeeping (no delay, no exemption)."""
        return AdjustmentPolicy(
            result_delay_days=0,
            isolation_days=config.removal_duration_days,
            post_isolation_exemption_days=0,
            keep_first_test_per_week=False,
            min_daily_tests=0,
            assumed_sensitivity=config.tests.sensitivity,
            assumed_specificity=config.tests.specificity,
        )


@dataclass
class AdjustedData:
    """Panel-ready view of an adjusted testing matrix."""

    panel: Panel
    dates: list[dt.date]
    excluded_days: np.ndarray      # bool per study day 0..horizon
    tests_per_day: np.ndarray      # retained tests per study day 0..horizon
    n_dropped_weekly: int          # tests dropped by the first-test-per-week rule
    n_dropped_isolation: int       # tests dropped inside a removal window
    policy: AdjustmentPolicy

    @property
    def horizon(self) -> int:
        return self.panel.horizon

    def to_matrix(self, row_labels=None) -> TestingMatrix:
        cells = np.full((self.panel.n_individuals, self.horizon), ABSENT, dtype=np.int8)
        tested = self.panel.tested[:, 1:]
        cells[tested] = np.where(self.panel.positive[:, 1:][tested], POSITIVE, NEGATIVE)
        return TestingMatrix(dates=list(self.dates), cells=cells, row_labels=row_labels)


def _week_key(date: dt.date) -> tuple[int, int]:
    iso = date.isocalendar()
    return iso[0], iso[1]  # Monday-to-Sunday calendar weeks


def apply_adjustments(matrix: TestingMatrix, policy: AdjustmentPolicy) -> AdjustedData:
    """Derive per-individual event histories and per-day exclusion flags."""
    n, horizon = matrix.n_individuals, matrix.n_days
    tested = np.zeros((n, horizon + 1), dtype=bool)
    positive = np.zeros((n, horizon + 1), dtype=bool)
    removed = np.zeros((n, horizon + 1), dtype=bool)
    cleared = np.zeros((n, horizon + 1), dtype=bool)
    assumed = np.zeros((n, horizon + 1), dtype=bool)
    week_of_day = [_week_key(d) for d in matrix.dates]

    dropped_weekly = 0
    dropped_isolation = 0
    for i in range(n):
        cols = np.flatnonzero(matrix.cells[i] >= 0)
        rem_start, rem_end = 0, 0  # active removal episode (pendency precedes rem_start)
        last_week = None
        for j in cols:
            day = j + 1
            if policy.keep_first_test_per_week:
                week = week_of_day[j]
                if week == last_week:
                    dropped_weekly += 1
                    continue
                last_week = week
            if rem_start <= day <= rem_end:
                dropped_isolation += 1  # a removed individual cannot be in the tested set
                continue
            tested[i, day] = True
            result = matrix.cells[i, j] == POSITIVE
            positive[i, day] = result
            if result and rem_end < day:  # pendency blocks a nested episode
                rem_start = day + policy.result_delay_days + 1
                rem_end = day + policy.result_delay_days + policy.isolation_days
                exempt_until = day + policy.post_isolation_exemption_days
                if rem_start <= horizon:
                    removed[i, rem_start : min(rem_end, horizon) + 1] = True
                if rem_end <= horizon:
                    cleared[i, rem_end] = True
                if exempt_until > rem_end and rem_end + 1 <= horizon:
                    assumed[i, rem_end + 1 : min(exempt_until, horizon) + 1] = True
    panel = Panel._derived(horizon, tested, positive, removed, cleared, assumed)
    tests_per_day = tested.sum(axis=0)
    excluded = tests_per_day < policy.min_daily_tests
    excluded[0] = True  # day 0 is the baseline, never estimated
    return AdjustedData(
        panel=panel,
        dates=list(matrix.dates),
        excluded_days=excluded,
        tests_per_day=tests_per_day,
        n_dropped_weekly=dropped_weekly,
        n_dropped_isolation=dropped_isolation,
        policy=policy,
    )


# ---------------------------------------------------------------------------
# Anonymising shuffle


def anonymize_shuffle(
    matrix: TestingMatrix, seed: int, policy: AdjustmentPolicy | None = None
) -> TestingMatrix:
    """Permute test-sequence suffixes within schedule strata, then shuffle rows.

    Iterating forward through the days, non-removed individuals are grouped
    by (last test day, last test result, last clearance day) and their
    remaining test columns are exchanged as whole vectors within the group.
    Grouping also by the last result refines the stated test/clearance
    strata just enough to make every day-level estimator value provably
    invariant under the shuffle; a trailing row permutation then detaches
    rows from their input order.  The removal bookkeeping follows
    ``policy`` (isolation windows, result delay).
    """
    policy = policy or AdjustmentPolicy()
    rng = np.random.default_rng(seed)
    cells = matrix.cells.copy()
    n, horizon = cells.shape

    last_test = np.zeros(n, dtype=np.int64)
    last_result = np.zeros(n, dtype=np.int64)
    last_clear = np.zeros(n, dtype=np.int64)
    rem_start = np.zeros(n, dtype=np.int64)
    rem_end = np.zeros(n, dtype=np.int64)

    for day in range(1, horizon + 1):
        j = day - 1
        cleared_now = (rem_end > 0) & (rem_end == day - 1)
        last_clear[cleared_now] = rem_end[cleared_now]
        nonremoved = (day < rem_start) | (day > rem_end)
        keys: dict[tuple[int, int, int], list[int]] = {}
        for i in np.flatnonzero(nonremoved):
            keys.setdefault((last_test[i], last_result[i], last_clear[i]), []).append(i)
        for members in keys.values():
            if len(members) < 2:
                continue
            members = np.array(members)
            perm = rng.permutation(members.size)
            cells[members, j:] = cells[members[perm], j:]
        # apply day events from the (possibly swapped) suffixes
        idx = np.flatnonzero(cells[:, j] >= 0)
        last_test[idx] = day
        last_result[idx] = (cells[idx, j] == POSITIVE).astype(np.int64)
        pos = idx[cells[idx, j] == POSITIVE]
        starts = pos[rem_end[pos] < day]  # pendency/removal blocks a nested episode
        rem_start[starts] = day + policy.result_delay_days + 1
        rem_end[starts] = day + policy.result_delay_days + policy.isolation_days

    order = rng.permutation(n)
    return TestingMatrix(dates=list(matrix.dates), cells=cells[order], row_labels=None)


# ---------------------------------------------------------------------------
# JSON configuration files


def _require_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}; allowed: {sorted(allowed)}")


def _regimen_from_dict(obj: dict, where: str = "regimen") -> RegimenConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {"kind", "p", "gap", "min_gap", "first_test_window", "period", "rotation",
               "base", "gap_clock", "overlays"}
    _require_keys(obj, allowed, where)
    kwargs = dict(obj)
    if "overlays" in kwargs:
        ov = kwargs.pop("overlays")
        _require_keys(ov, {"symptomatic_probability", "contact_tracing"}, f"{where}.overlays")
        kwargs["overlays"] = Overlays(**ov)
    if "base" in kwargs and kwargs["base"] is not None:
        kwargs["base"] = _regimen_from_dict(kwargs["base"], f"{where}.base")
    try:
        return RegimenConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _hazard_from_dict(obj: dict) -> HazardModel:
    _require_keys(obj, {"initial_prevalence", "within_cluster_rate",
                        "repeat_exposure_multiplier", "external"}, "hazard")
    kwargs = dict(obj)
    if "external" in kwargs:
        ext = kwargs.pop("external")
        _require_keys(ext, {"kind", "rate", "shape_horizon", "peak", "base", "scale"},
                      "hazard.external")
        kwargs["external"] = ExternalHazard(**ext)
    return HazardModel(**kwargs)


def scenario_config_from_dict(obj: dict) -> ScenarioConfig:
    allowed = {"population_size", "horizon_days", "cluster_size", "seed",
               "removal_duration_days", "undetected_recovery_days",
               "baseline_exposure_window", "tests", "sensitivity_curve",
               "hazard", "regimen"}
    _require_keys(obj, allowed, "scenario")
    kwargs = dict(obj)
    if "regimen" not in kwargs:
        raise ConfigError("scenario: missing required key 'regimen'")
    kwargs["regimen"] = _regimen_from_dict(kwargs["regimen"])
    if "tests" in kwargs:
        _require_keys(kwargs["tests"], {"sensitivity", "specificity"}, "tests")
        kwargs["tests"] = TestCharacteristics(**kwargs["tests"])
    if kwargs.get("sensitivity_curve") is not None:
        _require_keys(kwargs["sensitivity_curve"], {"peak", "window"}, "sensitivity_curve")
        kwargs["sensitivity_curve"] = SensitivityCurve(**kwargs["sensitivity_curve"])
    if "hazard" in kwargs:
        kwargs["hazard"] = _hazard_from_dict(kwargs["hazard"])
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"scenario: {exc}") from exc


def load_scenario_config(path) -> ScenarioConfig:
    return scenario_config_from_dict(_load_json(path))


def load_adjustment_policy(path) -> AdjustmentPolicy:
    obj = _load_json(path)
    _require_keys(obj, {f.name for f in fields(AdjustmentPolicy)}, "policy")
    return AdjustmentPolicy(**obj)


def load_interval_spec(path) -> IntervalSpec:
    obj = _load_json(path)
    _require_keys(obj, {f.name for f in fields(IntervalSpec)}, "intervals")
    try:
        return IntervalSpec(**obj)
    except ValueError as exc:
        raise ConfigError(f"intervals: {exc}") from exc


def _load_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return obj
