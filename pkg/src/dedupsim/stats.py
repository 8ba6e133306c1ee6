"""Attacker-side statistics: box test, request-count estimation, tournaments."""

import math

import numpy as np

from .dedup_memory import DedupSimError

A_GREATER = "a_greater"
B_GREATER = "b_greater"
INDISTINCT = "indistinct"


class StatsError(DedupSimError):
    pass


class CapExceeded(StatsError):
    pass


class TournamentInconsistency(StatsError):
    pass


class SampleSet:
    def __init__(self, values, meta=""):
        self.values = np.asarray(values, dtype=float)
        self.meta = meta

    def __len__(self):
        return len(self.values)


class BoxParams:
    def __init__(self, low_quantile=0.05, high_quantile=0.45, min_gap_ns=0.0):
        if not (0.0 < low_quantile < high_quantile < 1.0):
            raise StatsError("quantiles must satisfy 0 < low < high < 1")
        self.low_quantile = float(low_quantile)
        self.high_quantile = float(high_quantile)
        self.min_gap_ns = float(min_gap_ns)


DEFAULT_BOX = BoxParams()


def _box(values, params):
    return (np.quantile(values, params.low_quantile),
            np.quantile(values, params.high_quantile))


def box_test(a, b, params=None):
    """Crosby-style quantile box comparison of two sample sets."""
    params = params or DEFAULT_BOX
    va = a.values if isinstance(a, SampleSet) else np.asarray(a, dtype=float)
    vb = b.values if isinstance(b, SampleSet) else np.asarray(b, dtype=float)
    if len(va) == 0 or len(vb) == 0:
        raise StatsError("box_test needs nonempty sample sets")
    a_low, a_high = _box(va, params)
    b_low, b_high = _box(vb, params)
    if a_low > b_high + params.min_gap_ns:
        return A_GREATER
    if b_low > a_high + params.min_gap_ns:
        return B_GREATER
    return INDISTINCT


def mean_gap(a, b):
    va = a.values if isinstance(a, SampleSet) else np.asarray(a, dtype=float)
    vb = b.values if isinstance(b, SampleSet) else np.asarray(b, dtype=float)
    if len(va) == 0 or len(vb) == 0:
        raise StatsError("mean_gap needs nonempty sample sets")
    return float(va.mean() - vb.mean())


def required_requests(cdf_a, cdf_b, target_accuracy, rng, params=None,
                      max_requests=256, resamples=400):
    """Smallest per-option request count reaching the target box-test success.

    Resamples n-request experiments from the two empirical CDFs (the slower
    option is ground truth by mean) for growing n.
    """
    va = cdf_a.values if isinstance(cdf_a, SampleSet) else np.asarray(cdf_a, dtype=float)
    vb = cdf_b.values if isinstance(cdf_b, SampleSet) else np.asarray(cdf_b, dtype=float)
    if len(va) < 100 or len(vb) < 100:
        raise StatsError("empirical CDFs need at least 100 samples")
    params = params or DEFAULT_BOX
    expected = A_GREATER if va.mean() > vb.mean() else B_GREATER
    qs = (params.low_quantile, params.high_quantile)
    for n in range(1, max_requests + 1):
        draws_a = rng.choice(va, size=(resamples, n), replace=True)
        draws_b = rng.choice(vb, size=(resamples, n), replace=True)
        qa = np.quantile(draws_a, qs, axis=1)
        qb = np.quantile(draws_b, qs, axis=1)
        if expected == A_GREATER:
            wins = qa[0] > qb[1] + params.min_gap_ns
        else:
            wins = qb[0] > qa[1] + params.min_gap_ns
        if wins.mean() >= target_accuracy:
            return n
    raise CapExceeded(f"target {target_accuracy} not reached within {max_requests} requests")


class PairTally:
    """First-responder counts for one candidate pair over a batch."""

    __slots__ = ("a", "b", "a_first", "b_first")

    def __init__(self, a, b, a_first, b_first):
        self.a = a
        self.b = b
        self.a_first = a_first
        self.b_first = b_first


class TournamentState:
    def __init__(self, survivors, round_no=0, history=None):
        self.survivors = list(survivors)
        self.round = round_no
        self.history = history if history is not None else []


def binomial_two_sided_p(k, n):
    """Two-sided exact p-value for k successes out of n fair coin flips."""
    if n == 0:
        return 1.0
    k = max(k, n - k)
    tail = sum(math.comb(n, i) for i in range(k, n + 1)) / 2.0 ** n
    return min(1.0, 2.0 * tail)


def tournament_round(state, outcomes, skew_threshold=0.01):
    """One elimination round over first-responder tallies.

    Pairs with a significantly skewed split keep only the slower responder
    (the likely deduplicated candidate); pairs that look uniform are both
    incorrect and are dropped.  Candidates without a pair this round get a
    bye.  An empty survivor set is an inconsistency: the caller restarts
    with fresh samples.
    """
    paired = set()
    survivors = []
    for tally in outcomes:
        paired.add(tally.a)
        paired.add(tally.b)
        n = tally.a_first + tally.b_first
        p = binomial_two_sided_p(tally.a_first, n)
        if p < skew_threshold:
            # the slower responder loses the race more often
            survivors.append(tally.b if tally.a_first > tally.b_first else tally.a)
    for cand in state.survivors:
        if cand not in paired:
            survivors.append(cand)
    if not survivors:
        raise TournamentInconsistency("all candidates eliminated; resample")
    if len(survivors) > len(state.survivors):
        raise StatsError("survivors must shrink monotonically")
    history = state.history + [[(t.a, t.b, t.a_first, t.b_first) for t in outcomes]]
    return TournamentState(survivors, state.round + 1, history)


def pair_up(candidates, rng):
    """Random re-pairing; the odd candidate out gets a bye."""
    order = list(candidates)
    idx = rng.permutation(len(order))
    shuffled = [order[i] for i in idx]
    pairs = [(shuffled[i], shuffled[i + 1]) for i in range(0, len(shuffled) - 1, 2)]
    bye = shuffled[-1] if len(shuffled) % 2 else None
    return pairs, bye
