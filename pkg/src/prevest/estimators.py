"""Prevalence estimators for longitudinal testing data.

Three estimators of prevalence in the non-removed population are provided:

* the test-positive rate (TPR), adjusted for test characteristics;
* an inverse-probability-of-testing weighted estimate of the well count
  with *known* testing probabilities (``ht_known``);
* the same estimator with testing probabilities *estimated
  nonparametrically* from the testing data itself (``ht_estimated``).

The weighted estimators work stratum by stratum, where a stratum collects
the non-removed individuals sharing a last clearance day ``c``.  Within a
stratum the probability that a currently-well individual is tested on day
``t`` is identified from the distribution of next-test times via a
stochastic upper-triangular schedule matrix (:class:`ScheduleMatrix`); the
estimated well count is

    W_hat = (1 / (eta + nu - 1)) * sum_i w_i D_i (1 - Y_i)
          - ((1 - eta) / (eta + nu - 1)) * sum_i w_i D_i

with ``w_i`` the reciprocal testing probability, ``D_i`` the test indicator
and ``Y_i`` the positive-result indicator.  Small or untested strata fall
back to counting every non-removed member as well, which is the low-
incidence behaviour that keeps noisy reciprocal weights from exploding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import sparse

from .core import EventHistory, TestCharacteristics
from .regimens import RegimenConfig, next_test_pmf

_EPS = 1e-12


class DegenerateStratumError(ValueError):
    """The schedule matrix cannot identify a positive testing probability."""


# ---------------------------------------------------------------------------
# Panel: dense observable arrays


@dataclass
class Panel:
    """Day-by-individual view of the observable testing record.

    All estimator inputs are derived from observables only: test days,
    results, and clearance days.  ``last_clear[i, t]`` is the last clearance
    day strictly before ``t`` (0 when none), ``next_test[i, s]`` the first
    test day strictly after ``s`` (``horizon + 2`` when none).
    ``assumed_well`` marks days on which an individual is counted as well by
    fiat (post-isolation testing exemptions) instead of being weighted.
    """

    horizon: int
    tested: np.ndarray
    positive: np.ndarray
    removed: np.ndarray
    cleared: np.ndarray
    last_clear: np.ndarray
    next_test: np.ndarray
    assumed_well: np.ndarray

    @property
    def n_individuals(self) -> int:
        return self.tested.shape[0]

    def stratum_after(self, s: int) -> np.ndarray:
        """Last clearance day <= s, i.e. the stratum in force on day s + 1."""
        return np.where(self.cleared[:, s], s, self.last_clear[:, s])

    @staticmethod
    def _derived(horizon: int, tested, positive, removed, cleared, assumed_well=None) -> "Panel":
        n = tested.shape[0]
        last_clear = np.zeros((n, horizon + 1), dtype=np.int32)
        running = np.zeros(n, dtype=np.int32)
        for t in range(horizon + 1):
            last_clear[:, t] = running
            running = np.where(cleared[:, t], t, running)
        next_test = np.full((n, horizon + 1), horizon + 2, dtype=np.int32)
        for s in range(horizon - 1, -1, -1):
            next_test[:, s] = np.where(tested[:, s + 1], s + 1, next_test[:, s + 1])
        if assumed_well is None:
            assumed_well = np.zeros_like(tested)
        return Panel(
            horizon=horizon,
            tested=tested,
            positive=positive,
            removed=removed,
            cleared=cleared,
            last_clear=last_clear,
            next_test=next_test,
            assumed_well=assumed_well,
        )

    @staticmethod
    def from_simulation(sim) -> "Panel":
        return Panel._derived(
            horizon=sim.horizon,
            tested=np.ascontiguousarray(sim.tested.T),
            positive=np.ascontiguousarray(sim.positive.T),
            removed=np.ascontiguousarray(sim.removed.T),
            cleared=np.ascontiguousarray(sim.cleared.T),
        )

    @staticmethod
    def from_histories(histories: Sequence[EventHistory], horizon: int) -> "Panel":
        n = len(histories)
        tested = np.zeros((n, horizon + 1), dtype=bool)
        positive = np.zeros((n, horizon + 1), dtype=bool)
        removed = np.zeros((n, horizon + 1), dtype=bool)
        cleared = np.zeros((n, horizon + 1), dtype=bool)
        for i, h in enumerate(histories):
            h.validate()
            for z, y in zip(h.test_times, h.test_results):
                if z <= horizon:
                    tested[i, z] = True
                    positive[i, z] = y
            for c in h.clearance_times:
                if c <= horizon:
                    cleared[i, c] = True
            # removal spans: day after a positive test through the next clearance
            for z, y in zip(h.test_times, h.test_results):
                if not y or z >= horizon:
                    continue
                later = [c for c in h.clearance_times if c > z]
                end = min(later[0], horizon) if later else horizon
                removed[i, z + 1 : end + 1] = True
        return Panel._derived(horizon, tested, positive, removed, cleared)


# ---------------------------------------------------------------------------
# Schedule matrices


@dataclass(frozen=True)
class StratumKey:
    """Identifies a stratum by the shared last clearance day."""

    last_clearance_day: int

    def __post_init__(self):
        if self.last_clearance_day < 0:
            raise ValueError("clearance day cannot be negative")


@dataclass
class ScheduleMatrix:
    """Next-test-time transition matrix for one stratum up to a horizon.

    Entry ``[s, z]`` (0-based) is the probability that the next test after
    day ``s`` lands on day ``z``, with column ``horizon + 1`` collecting
    "after the horizon".  Rows below the stratum's clearance day, and the
    final row, are the indicator of "after the horizon", which makes the
    matrix stochastic and upper triangular with a unit bottom-right corner.
    """

    stratum: int
    horizon: int
    entries: np.ndarray

    @property
    def size(self) -> int:
        return self.horizon + 2

    def validate(self) -> None:
        c, t, p = self.stratum, self.horizon, self.entries
        if not 0 <= c < t:
            raise ValueError(f"stratum day {c} must lie in [0, horizon) = [0, {t})")
        if p.shape != (t + 2, t + 2):
            raise ValueError(f"expected shape {(t + 2, t + 2)}, got {p.shape}")
        sums = p.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValueError(f"rows must sum to 1; worst deviation {np.abs(sums - 1).max():.3e}")
        if np.any(p < 0):
            raise ValueError("entries must be non-negative")
        lower = np.tril(p)  # includes the diagonal
        lower[t + 1, t + 1] = 0.0
        if np.any(lower != 0.0):
            raise ValueError("matrix must be upper triangular with a zero diagonal")
        if p[t + 1, t + 1] != 1.0:
            raise ValueError("bottom-right corner must be 1")
        indicator = np.zeros(t + 2)
        indicator[t + 1] = 1.0
        for s in range(c):
            if np.any(p[s] != indicator):
                raise ValueError(f"row {s} (before the stratum day) must be the tail indicator")


def _indicator_base(t: int) -> np.ndarray:
    base = np.zeros((t + 2, t + 2))
    base[:, t + 1] = 1.0
    return base


def exact_schedule_matrix(regimen: RegimenConfig, stratum: int, t: int) -> ScheduleMatrix:
    """Analytic schedule matrix implied by a regimen's next-test-time law."""
    if not 0 <= stratum < t:
        raise ValueError(f"need 0 <= stratum < t, got stratum={stratum}, t={t}")
    entries = _indicator_base(t)
    entries[stratum] = next_test_pmf(regimen, stratum, "clearance", t)
    for s in range(stratum + 1, t + 1):
        entries[s] = next_test_pmf(regimen, s, "test", t)
    matrix = ScheduleMatrix(stratum=stratum, horizon=t, entries=entries)
    matrix.validate()
    return matrix


def estimate_schedule_matrix(panel: Panel, stratum: int, t: int) -> ScheduleMatrix:
    """Plug-in schedule matrix from observed next-test times.

    Row ``c`` is the empirical distribution of the first test after the
    clearance among individuals whose clearance history matches the stratum;
    row ``s > c`` conditions additionally on a negative test at ``s``.  Rows
    with no qualifying individual fall back to the tail indicator.
    """
    c = stratum
    if not 0 <= c < t:
        raise ValueError(f"need 0 <= stratum < t, got stratum={c}, t={t}")
    if np.count_nonzero(panel.stratum_after(c) == c) == 0:
        raise DegenerateStratumError(f"no individuals with last clearance {c} by day {c + 1}")
    entries = _indicator_base(t)
    for s in range(c, t + 1):
        if s == c:
            sel = panel.stratum_after(c) == c
        else:
            sel = panel.tested[:, s] & ~panel.positive[:, s] & (panel.stratum_after(s) == c)
        if not np.any(sel):
            continue
        values = np.minimum(panel.next_test[sel, s], t + 1)
        counts = np.bincount(values, minlength=t + 2).astype(float)
        entries[s] = counts / counts.sum()
    matrix = ScheduleMatrix(stratum=c, horizon=t, entries=entries)
    matrix.validate()
    return matrix


def _ratio_terms(mats: np.ndarray, nu: float, c: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Numerator and denominator of the testing-probability ratio, batched.

    For each matrix P: numerator = sum_{k=1}^{t-c} nu^(k-1) (P^k)[c, t];
    denominator = sum_k nu^(k-1) ((P^k - P^(k-1))[c, t] + (P^k - P^(k-1))[c, t+1]).
    Only row ``c`` of the powers is needed, so powers are taken as
    vector-matrix products.
    """
    b, size, _ = mats.shape
    v = np.zeros((b, size))
    v[:, c] = 1.0
    prev_tail = v[:, t] + v[:, t + 1]
    num = np.zeros(b)
    den = np.zeros(b)
    coef = 1.0
    for _ in range(t - c):
        v = np.matmul(v[:, None, :], mats)[:, 0, :]
        tail = v[:, t] + v[:, t + 1]
        num += coef * v[:, t]
        den += coef * (tail - prev_tail)
        prev_tail = tail
        coef *= nu
    return num, den


def testing_probability_from_matrix(
    matrix: ScheduleMatrix, specificity: float, stratum: int | None = None, t: int | None = None
) -> float:
    """P[tested on day t | well on day t, last clearance = stratum] from the matrix.

    Under perfect specificity the denominator is exactly 1 (asserted to
    1e-12); a non-positive denominator means the stratum cannot be weighted
    and raises :class:`DegenerateStratumError`.  A zero numerator (a
    deterministic schedule with no test due at ``t``) returns 0.0; callers
    treat that as a positivity failure.
    """
    c = matrix.stratum if stratum is None else stratum
    horizon = matrix.horizon if t is None else t
    num, den = _ratio_terms(matrix.entries[None, :, :], specificity, c, horizon)
    num_v, den_v = float(num[0]), float(den[0])
    if specificity == 1.0 and abs(den_v - 1.0) > 1e-12:
        raise AssertionError(f"perfect-specificity denominator is {den_v!r}, expected 1")
    if den_v <= _EPS:
        raise DegenerateStratumError(
            f"stratum {c}, day {horizon}: testing-probability denominator {den_v:.3e} <= 0"
        )
    return num_v / den_v


testing_probability_from_matrix.__test__ = False  # op name collides with pytest's prefix


# ---------------------------------------------------------------------------
# Point estimators


def tpr(positives: int, tested: int) -> float:
    """Raw test-positive rate; nan marks an undefined (untested) day."""
    if positives < 0 or tested < 0 or positives > tested:
        raise ValueError(f"bad counts: positives={positives}, tested={tested}")
    if tested == 0:
        return math.nan
    return positives / tested

def tpr_prevalence(positives: int, tested: int, tests: TestCharacteristics) -> tuple[float, float]:
    """TPR mapped to the prevalence scale for an imperfect test, (clipped, raw).

    Inverts rate = eta * prev + (1 - nu) * (1 - prev); reduces to the raw
    rate under a perfect test.
    """
    rate = tpr(positives, tested)
    if math.isnan(rate):
        return math.nan, math.nan
    tests.require_informative()
    unclipped = (rate - (1.0 - tests.specificity)) / tests.youden
    return min(max(unclipped, 0.0), 1.0), unclipped


def ht_estimate_w(
    tested: np.ndarray,
    positive: np.ndarray,
    weights: np.ndarray,
    tests: TestCharacteristics,
) -> float:
    """Weighted well-count core over one or more non-fallback strata.

    ``weights`` holds the reciprocal testing probabilities of the same
    individuals; entries for untested individuals are ignored.  Fallback
    strata and by-fiat well counts are added by the callers.
    """
    tests.require_informative()
    tested = np.asarray(tested, dtype=bool)
    positive = np.asarray(positive, dtype=bool)
    w = np.asarray(weights, dtype=float)
    wd = np.where(tested, w, 0.0)
    y = tests.youden
    neg_sum = float(wd[~positive].sum())
    all_sum = float(wd.sum())
    return neg_sum / y - (1.0 - tests.sensitivity) * all_sum / y


def prevalence_from_w(w_hat: float, n_population: int, removed: int) -> tuple[float, float]:
    """Map an estimated well count to (clipped, unclipped) prevalence.

    Prevalence is taken over the non-removed population; an empty
    non-removed population yields nan markers.
    """
    nonremoved = n_population - removed
    if nonremoved <= 0:
        return math.nan, math.nan
    unclipped = (nonremoved - w_hat) / nonremoved
    return min(max(unclipped, 0.0), 1.0), unclipped


def bias_ratio(
    stratum_prevalences: Mapping[int, float],
    test_share: Mapping[int, float],
    population_share: Mapping[int, float],
) -> float:
    """Ratio of test-weighted to population-weighted average stratum prevalence.

    The strata are last-test days; the ratio is the multiplicative bias of
    the test-positive rate as a prevalence estimator when testing and
    infectiousness are dependent through the schedule.
    """
    keys = set(stratum_prevalences)
    if set(test_share) != keys or set(population_share) != keys:
        raise ValueError("stratum maps must share the same support")
    for name, share in (("test", test_share), ("population", population_share)):
        total = math.fsum(share.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"{name} shares sum to {total!r}, not 1")
    num = math.fsum(stratum_prevalences[z] * test_share[z] for z in keys)
    den = math.fsum(stratum_prevalences[z] * population_share[z] for z in keys)
    if den == 0.0:
        return math.nan
    return num / den


# ---------------------------------------------------------------------------
# Day-level estimates


@dataclass
class DayEstimate:
    day: int
    kind: str
    estimate: float
    lo: float = math.nan
    hi: float = math.nan
    unclipped: float = math.nan
    n_tests: int = 0
    n_positive: int = 0
    n_fallback_strata: int = 0

    @property
    def defined(self) -> bool:
        return not math.isnan(self.estimate)


@dataclass
class StratumWeight:
    stratum: int
    weight: Optional[float]
    provenance: str  # "known" | "estimated" | "fallback"


@dataclass
class WeightTable:
    """Per-stratum reciprocal testing probabilities for one day."""

    day: int
    entries: dict[int, StratumWeight] = field(default_factory=dict)

    def add(self, stratum: int, weight: Optional[float], provenance: str) -> None:
        if weight is not None and (not math.isfinite(weight) or weight < 1.0):
            raise ValueError(f"weight for stratum {stratum} must be finite and >= 1, got {weight}")
        self.entries[stratum] = StratumWeight(stratum, weight, provenance)

    @property
    def n_fallback(self) -> int:
        return sum(1 for e in self.entries.values() if e.provenance == "fallback")


class EstimateSeries:
    """Per-day estimate records with a fixed serialisation column order."""

    COLUMNS = ("day", "kind", "estimate", "lo", "hi", "n_tests", "n_pos", "n_fallback_strata")

    def __init__(self, records: Iterable[DayEstimate] = ()):
        self.records: list[DayEstimate] = list(records)

    def append(self, record: DayEstimate) -> None:
        self.records.append(record)

    def for_kind(self, kind: str) -> list[DayEstimate]:
        return [r for r in self.records if r.kind == kind]

    def _rows(self):
        for r in self.records:
            yield (r.day, r.kind, r.estimate, r.lo, r.hi, r.n_tests, r.n_positive,
                   r.n_fallback_strata)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self._rows():
                fh.write(",".join(_cell(v) for v in row) + "\n")

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in self._rows():
                fh.write(json.dumps(dict(zip(self.COLUMNS, _json_safe(row)))) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else format(value, ".10g")
    return str(value)


def _json_safe(row):
    return [None if isinstance(v, float) and math.isnan(v) else v for v in row]


# ---------------------------------------------------------------------------
# Stratified estimators over a panel


class DayEvaluator:
    """Re-evaluates the estimated-weight estimator for one (panel, day).

    Precomputes the stratum bookkeeping and next-test contributions once so
    that resampled re-estimation (bootstrap multiplicity vectors, jackknife
    blocks) reduces to count aggregation plus batched matrix powers.
    """

    def __init__(self, panel: Panel, day: int, tests: TestCharacteristics,
                 min_stratum_size: int = 10, weight_cap: Optional[float] = None):
        if not 1 <= day <= panel.horizon:
            raise ValueError(f"day {day} outside 1..{panel.horizon}")
        tests.require_informative()
        if weight_cap is not None and weight_cap < 1.0:
            raise ValueError(f"a weight cap below 1 is impossible, got {weight_cap}")
        self.panel = panel
        self.day = day
        self.tests = tests
        self.min_stratum_size = min_stratum_size
        self.weight_cap = weight_cap  # None preserves unbiasedness; caps trade bias for variance
        t = day
        n = panel.n_individuals

        nonrem = ~panel.removed[:, t]
        assumed = panel.assumed_well[:, t] & nonrem
        member = nonrem & ~assumed
        strat = panel.last_clear[:, t]  # < t by construction
        self.strata = np.unique(strat[member])
        slot = {c: j for j, c in enumerate(self.strata)}
        s_count = len(self.strata)

        self._nonrem = nonrem.astype(float)
        self._assumed = assumed.astype(float)
        self._n_tests_all = panel.tested[:, t] & nonrem
        self._n_pos_all = panel.positive[:, t] & nonrem

        onehot = np.zeros((n, s_count))
        tested_oh = np.zeros((n, s_count))
        neg_oh = np.zeros((n, s_count))
        for c, j in slot.items():
            in_c = member & (strat == c)
            onehot[in_c, j] = 1.0
            t_in = in_c & panel.tested[:, t]
            tested_oh[t_in, j] = 1.0
            neg_oh[t_in & ~panel.positive[:, t], j] = 1.0
        self._member_oh = onehot
        self._tested_oh = tested_oh
        self._neg_oh = neg_oh

        # Next-test contributions, coded (stratum slot, row offset, value).
        width = t + 2
        rows_i: list[np.ndarray] = []
        codes: list[np.ndarray] = []
        for c, j in slot.items():
            for s in range(c, t + 1):
                if s == c:
                    sel = panel.stratum_after(c) == c
                else:
                    sel = panel.tested[:, s] & ~panel.positive[:, s] & (panel.stratum_after(s) == c)
                idx = np.flatnonzero(sel)
                if idx.size == 0:
                    continue
                values = np.minimum(panel.next_test[idx, s], t + 1)
                code = (j * width + (s - c)) * width + values
                rows_i.append(idx)
                codes.append(code)
        if rows_i:
            all_i = np.concatenate(rows_i)
            all_code = np.concatenate(codes)
        else:
            all_i = np.zeros(0, dtype=int)
            all_code = np.zeros(0, dtype=int)
        self._n_codes = s_count * width * width
        self._contrib = sparse.csr_matrix(
            (np.ones(all_i.size), (all_i, all_code)), shape=(n, max(self._n_codes, 1))
        )
        self._base = _indicator_base(t)

    def _stratum_probs(self, counts: np.ndarray, need: np.ndarray) -> np.ndarray:
        """Testing probabilities per (multiplicity row, stratum) from packed row counts.

        ``need[b, j]`` marks the pairs whose probability is actually used
        (large-enough resampled stratum with at least one test); everything
        else falls back to a headcount, so the matrix walk is only run on
        the needed rows of each stratum.  The walk keeps just the stuffed
        row block (rows ``c..t``): with the remaining rows equal to the tail
        indicator, the mass a vector carries on column ``t + 1`` stays put.
        """
        b = counts.shape[0]
        t = self.day
        nu = self.tests.specificity
        width = t + 2
        probs = np.zeros((b, len(self.strata)))
        for j, c in enumerate(self.strata):
            sel = np.flatnonzero(need[:, j])
            if sel.size == 0:
                continue
            span = t - c + 1  # row offsets 0..t-c correspond to matrix rows c..t
            rows = counts[sel, j * width * width : (j + 1) * width * width]
            rows = rows.reshape(sel.size, width, width)[:, :span, :]
            sums = rows.sum(axis=2, keepdims=True)
            empty = sums[..., 0] == 0
            rows = rows / np.maximum(sums, 1.0)
            if np.any(empty):
                rows[empty] = 0.0
                rows[empty, t + 1] = 1.0  # unobserved row: tail indicator
            v = np.zeros((sel.size, width))
            v[:, c] = 1.0
            num = np.zeros(sel.size)
            den = np.zeros(sel.size)
            prev_tail = v[:, t] + v[:, t + 1]
            coef = 1.0
            for _ in range(t - c):
                inner = np.matmul(v[:, None, c : t + 1], rows)[:, 0, :]
                inner[:, t + 1] += v[:, t + 1]  # absorbing tail column
                v = inner
                tail = v[:, t] + v[:, t + 1]
                num += coef * v[:, t]
                den += coef * (tail - prev_tail)
                prev_tail = tail
                coef *= nu
            with np.errstate(invalid="ignore", divide="ignore"):
                probs[sel, j] = np.where(den > _EPS, num / np.maximum(den, _EPS), 0.0)
        return np.minimum(probs, 1.0)

    def estimate(self, multiplicity: np.ndarray | None = None,
                 collect: Optional[WeightTable] = None) -> np.ndarray:
        """Clipped prevalence estimates for each multiplicity row (1s when None)."""
        panel = self.panel
        eta = self.tests.sensitivity
        youden = self.tests.youden
        if multiplicity is None:
            multiplicity = np.ones((1, panel.n_individuals))
        b = multiplicity.shape[0]

        assumed_n = multiplicity @ self._assumed
        nonrem_n = multiplicity @ self._nonrem
        w_hat = assumed_n.copy()
        fallback = np.zeros(b)
        if len(self.strata):
            n_c = multiplicity @ self._member_oh          # [b, S]
            tested_c = multiplicity @ self._tested_oh
            neg_c = multiplicity @ self._neg_oh
            counts = np.asarray(self._contrib.T.dot(multiplicity.T).T)  # [b, codes]
            need = (n_c >= self.min_stratum_size) & (tested_c > 0)
            probs = self._stratum_probs(counts, need)
            if self.weight_cap is not None:
                probs = np.where(need, np.maximum(probs, 1.0 / self.weight_cap), probs)
            active = need & (probs > _EPS)
            weighted = (neg_c - (1.0 - eta) * tested_c) / (youden * np.maximum(probs, _EPS))
            w_hat += np.where(active, weighted, n_c).sum(axis=1)
            fallback += (~active & (n_c > 0)).sum(axis=1)
            if collect is not None:
                for j, c in enumerate(self.strata):
                    if need[0, j] and probs[0, j] <= _EPS:
                        # a tested individual's own path always carries mass
                        raise AssertionError(
                            f"stratum {c}: tested members but zero estimated probability"
                        )
                    if active[0, j]:
                        collect.add(int(c), max(1.0 / probs[0, j], 1.0), "estimated")
                    elif n_c[0, j] > 0:
                        collect.add(int(c), None, "fallback")
        self._last_fallback = fallback
        self._last_nonremoved = nonrem_n
        with np.errstate(invalid="ignore", divide="ignore"):
            unclipped = np.where(nonrem_n > 0, (nonrem_n - w_hat) / np.maximum(nonrem_n, 1.0), np.nan)
        self._last_unclipped = unclipped
        return np.clip(unclipped, 0.0, 1.0)

    # -- resampling adapters (bootstrap over individuals)

    def __call__(self, indices: np.ndarray) -> float:
        return float(self.batch(indices[None, :])[0])

    def _multiplicity(self, index_matrix: np.ndarray) -> np.ndarray:
        n = self.panel.n_individuals
        b = index_matrix.shape[0]
        flat = (np.arange(b)[:, None] * n + index_matrix).ravel()
        return np.bincount(flat, minlength=b * n).reshape(b, n).astype(float)

    def batch(self, index_matrix: np.ndarray) -> np.ndarray:
        return self.estimate(self._multiplicity(index_matrix))

    def resampler(self) -> "_UnclippedResampler":
        """Adapter for interval construction: re-estimates on the unclipped scale.

        Bootstrap machinery runs on the unrestricted estimates (clipping
        piles mass at the boundary and corrupts the bias-correction
        constant); interval endpoints are clipped afterwards.
        """
        return _UnclippedResampler(self)


class _UnclippedResampler:
    def __init__(self, evaluator: DayEvaluator):
        self._evaluator = evaluator

    def __call__(self, indices: np.ndarray) -> float:
        return float(self.batch(indices[None, :])[0])

    def batch(self, index_matrix: np.ndarray) -> np.ndarray:
        ev = self._evaluator
        ev.estimate(ev._multiplicity(index_matrix))
        return ev._last_unclipped.copy()


def ht_estimated(
    panel: Panel,
    day: int,
    tests: TestCharacteristics,
    min_stratum_size: int = 10,
    weight_cap: Optional[float] = None,
) -> tuple[DayEstimate, WeightTable]:
    """Estimated-weight prevalence estimate for one day, with its weight table."""
    ev = DayEvaluator(panel, day, tests, min_stratum_size, weight_cap)
    table = WeightTable(day=day)
    clipped = ev.estimate(collect=table)
    est = DayEstimate(
        day=day,
        kind="ht-e",
        estimate=float(clipped[0]),
        unclipped=float(ev._last_unclipped[0]),
        n_tests=int(ev._n_tests_all.sum()),
        n_positive=int(ev._n_pos_all.sum()),
        n_fallback_strata=int(ev._last_fallback[0]),
    )
    return est, table


def ht_known(
    panel: Panel,
    day: int,
    tests: TestCharacteristics,
    weight_for: Callable[[int, int], float],
) -> tuple[DayEstimate, WeightTable, float]:
    """Known-weight prevalence estimate; also returns the variance of the well count.

    ``weight_for(c, t)`` supplies the reciprocal testing probability for
    stratum ``c`` on day ``t``.  Every stratum is weighted (no fallback):
    strata with no tests contribute zero to the well count, which is what
    keeps the estimator unbiased and occasionally high-variance.
    """
    tests.require_informative()
    t = day
    nonrem = ~panel.removed[:, t]
    assumed = panel.assumed_well[:, t] & nonrem
    member = nonrem & ~assumed
    strat = panel.last_clear[:, t]
    eta, youden = tests.sensitivity, tests.youden
    w_hat = float(assumed.sum())
    variance = 0.0
    table = WeightTable(day=day)
    for c in np.unique(strat[member]):
        in_c = member & (strat == c)
        weight = float(weight_for(int(c), t))
        table.add(int(c), weight, "known")
        tested_c = int((in_c & panel.tested[:, t]).sum())
        pos_c = int((in_c & panel.tested[:, t] & panel.positive[:, t]).sum())
        neg_c = tested_c - pos_c
        w_hat += weight * (neg_c - (1.0 - eta) * tested_c) / youden
        pi = 1.0 / weight
        variance += (
            ((eta - 1.0) ** 2 * pos_c + eta**2 * neg_c) * (1.0 - pi) / pi**2 / youden**2
        )
    clipped, unclipped = prevalence_from_w(w_hat, panel.n_individuals, int((~nonrem).sum()))
    est = DayEstimate(
        day=day,
        kind="ht-k",
        estimate=clipped,
        unclipped=unclipped,
        n_tests=int((panel.tested[:, t] & nonrem).sum()),
        n_positive=int((panel.positive[:, t] & nonrem).sum()),
    )
    return est, table, variance
