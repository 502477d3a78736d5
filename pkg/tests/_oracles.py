"""Independent reference implementations used as test oracles.

These deliberately avoid the package's vectorised code paths: the
compartment fold works on Python sets, day by day, straight from the
per-day event sets.
"""

from __future__ import annotations

import numpy as np


def events_from_histories(histories, horizon):
    """Per-day event sets (tested, positive, exposed, undetected, cleared)."""
    days = {
        t: {"D": set(), "Y": set(), "Q": set(), "U": set(), "S": set()}
        for t in range(horizon + 1)
    }
    day0_infectious = set()
    for i, h in enumerate(histories):
        positive_days = {z for z, y in zip(h.test_times, h.test_results) if y}
        for z in h.test_times:
            if z <= horizon:
                days[z]["D"].add(i)
                if z in positive_days:
                    days[z]["Y"].add(i)
        for x in h.exposure_times:
            if x < 0:
                day0_infectious.add(i)
            elif 0 < x <= horizon:
                days[x]["Q"].add(i)
        # a recovery on day 0 is possible for back-dated pre-baseline exposures
        for v in h.infectious_end_times:
            if 0 <= v <= horizon and v not in positive_days:
                days[v]["U"].add(i)
        for c in h.clearance_times:
            if c <= horizon:
                days[c]["S"].add(i)
    return day0_infectious, days


def fold_compartments(n, day0_infectious, days, horizon):
    """Iterate the daily set updates; returns per-day (well, infectious, removed) sets.

    well(t+1)      = (well | undetected | cleared) - (exposed | positive)
    infectious(t+1) = (infectious | exposed) - (undetected | positive)
    removed(t+1)   = (removed | positive) - cleared
    """
    well = set(range(n)) - set(day0_infectious)
    infectious = set(day0_infectious)
    removed = set()
    states = {0: (frozenset(well), frozenset(infectious), frozenset(removed))}
    for t in range(0, horizon):
        ev = days[t]
        y, q, u, s = ev["Y"], ev["Q"], ev["U"], ev["S"]
        well, infectious, removed = (
            (well | u | s) - (q | y),
            (infectious | q) - (u | y),
            (removed | y) - s,
        )
        states[t + 1] = (frozenset(well), frozenset(infectious), frozenset(removed))
    return states


def fold_states_from_simulation(sim):
    """Set-fold oracle applied to a simulation's recorded transitions."""
    n = sim.population_size
    horizon = sim.horizon
    days = {}
    for t in range(horizon + 1):
        days[t] = {
            "D": set(np.flatnonzero(sim.tested[t])),
            "Y": set(np.flatnonzero(sim.positive[t])),
            "Q": set(np.flatnonzero(sim.newly_exposed[t])),
            "U": set(np.flatnonzero(sim.undetected_recovered[t])),
            "S": set(np.flatnonzero(sim.cleared[t])),
        }
    day0 = set(np.flatnonzero(sim.infectious[0]))
    return fold_compartments(n, day0, days, horizon)


def state_sets(state):
    return (
        frozenset(np.flatnonzero(state.well)),
        frozenset(np.flatnonzero(state.infectious)),
        frozenset(np.flatnonzero(state.removed)),
    )


def testing_process_oracle(regimen, stratum, t_max, specificity, n_paths, seed,
                           removal_duration=5):
    """Zero-exposure-hazard forward simulation of one stratum's testing process.

    Simulates ``n_paths`` individuals cleared on day ``stratum`` (day-0 start
    when the stratum is 0) through day ``t_max`` under the regimen's daily
    hazards.  A false positive (probability 1 - specificity per test)
    removes the path from the stratum.  Returns, per day, the fraction of
    still-present paths tested that day, its binomial standard error, and
    the count of paths the fraction is based on.
    """
    from prevest.regimens import probability_vector

    rng = np.random.default_rng(seed)
    c = stratum
    if c > 0:
        last_test = np.full(n_paths, c - removal_duration, dtype=np.int64)
        has_tested = np.ones(n_paths, dtype=bool)  # the detection test before isolation
        last_clear = np.full(n_paths, c, dtype=np.int64)
    else:
        last_test = np.zeros(n_paths, dtype=np.int64)
        has_tested = np.zeros(n_paths, dtype=bool)
        last_clear = np.zeros(n_paths, dtype=np.int64)
    alive = np.ones(n_paths, dtype=bool)
    prob = np.full(t_max + 1, np.nan)
    se = np.full(t_max + 1, np.nan)
    n_alive = np.zeros(t_max + 1, dtype=np.int64)
    for t in range(c + 1, t_max + 1):
        p = probability_vector(regimen, t, last_test, has_tested, last_clear)
        tested_now = alive & (rng.random(n_paths) < p)
        n_alive[t] = int(alive.sum())
        if n_alive[t]:
            phat = tested_now.sum() / n_alive[t]
            prob[t] = phat
            se[t] = np.sqrt(max(phat * (1 - phat), 0.0) / n_alive[t])
        false_pos = tested_now & (rng.random(n_paths) < 1.0 - specificity)
        alive &= ~false_pos
        last_test[tested_now] = t
        has_tested |= tested_now
    return prob, se, n_alive


testing_process_oracle.__test__ = False  # helper, not a test
