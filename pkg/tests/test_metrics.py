import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buddies.engine import RoundRecord, simulate_nym
from buddies.metrics import (
    HistoryMeter,
    IndinymityReport,
    ideal_lowlatency,
    ideal_maxoffline,
    max_offline_gap,
    nearest_rank,
    partition_from_history,
    possinymity,
    round_series,
    usability_stats,
)
from buddies.policy import PolicySpec
from buddies.trace import _make_trace
from conftest import grid_from_sets, traces

F = frozenset


def rec(i, P, non_null, roster=F("abcdefgh")):
    return RoundRecord(i, roster, roster, F(P), "n", 1 if non_null else None, 0, None)


def brute_classes(history, roster):
    """O(n^2 * rounds) pairwise comparison of membership vectors."""
    vec = {u: tuple(u in r.filtered for r in history) for u in roster}
    classes = []
    for u in sorted(roster):
        for c in classes:
            if vec[next(iter(c))] == vec[u]:
                c.add(u)
                break
        else:
            classes.append({u})
    return sorted((F(c) for c in classes), key=lambda s: (-len(s), sorted(s)))


class TestPossinymity:
    def test_no_posts(self):
        assert possinymity([rec(0, "ab", False)], F("abcd")).members == F("abcd")

    def test_intersection(self):
        h = [rec(0, "abc", True), rec(1, "a", False), rec(2, "bcd", True)]
        p = possinymity(h, F("abcd"))
        assert p.members == F("bc") and p.as_of_round == 2 and len(p) == 2

    def test_random_against_fold(self):
        rnd = random.Random(5)
        roster = F("abcdef")
        for _ in range(50):
            h = [rec(i, {u for u in roster if rnd.random() < 0.7}, rnd.random() < 0.5) for i in range(30)]
            expect = set(roster)
            for r in h:
                if r.non_null:
                    expect &= r.filtered
            assert possinymity(h, roster).members == expect


class TestPartition:
    def test_single_round(self):
        rep = partition_from_history([rec(0, "ab", False)], F("abcd"))
        assert sorted(map(sorted, rep.partition)) == [["a", "b"], ["c", "d"]]
        assert rep.indinymity == 2

    def test_no_rounds(self):
        rep = partition_from_history([], F("abc"))
        assert rep.partition == [F("abc")] and rep.indinymity == 3

    def test_random_8_users_20_rounds(self):
        rnd = random.Random(11)
        roster = F("abcdefgh")
        for _ in range(200):
            h = [rec(i, {u for u in roster if rnd.random() < 0.8}, rnd.random() < 0.3) for i in range(20)]
            rep = partition_from_history(h, roster)
            expect = brute_classes(h, roster)
            assert rep.partition == expect
            assert rep.indinymity == min(len(c) for c in expect)

    def test_effective(self):
        rep = IndinymityReport([F("abcd")], 4)
        assert rep.effective_indinymity(1) == 3
        assert rep.effective_indinymity(9) == 0

    def test_series_matches_prefixes(self):
        rnd = random.Random(2)
        roster = F("abcdef")
        h = [rec(i, {u for u in roster if rnd.random() < 0.8}, rnd.random() < 0.4) for i in range(25)]
        for k, (r, poss, ind) in enumerate(round_series(h, roster)):
            assert r == k
            assert poss == len(possinymity(h[:k + 1], roster))
            assert ind == partition_from_history(h[:k + 1], roster).indinymity

    def test_meter_class_of(self):
        m = HistoryMeter(F("abcd"))
        m.observe(rec(0, "ab", True))
        assert m.class_of("a") == F("ab") and m.possible == F("ab")


def brute_lowlatency(tr, L):
    out = []
    for u in tr.users:
        for s, e in tr.timelines[u]:
            if e - s < max(L, 1):
                continue
            count = 0
            for v in tr.users:
                for a, b in tr.timelines[v]:
                    if (L == 0 and a <= s < b) or (L > 0 and a <= s and s + L <= b):
                        count += 1
                        break
            out.append(count)
    return sorted(out)


class TestIdeal:
    def test_all_online(self):
        tr = _make_trace({u: [(0, 100)] for u in "abcde"}, {}, 100)
        assert ideal_lowlatency(tr, 50) == [5] * 5

    def test_three_users(self):
        tr = _make_trace({"a": [(0, 100)], "b": [(0, 40)], "c": [(0, 100)]}, {}, 100)
        assert ideal_lowlatency(tr, 50) == [2, 2]

    def test_lifetime_zero_is_instantaneous(self):
        tr = _make_trace({"a": [(0, 10)], "b": [(5, 8)], "c": [(7, 9)]}, {}, 10)
        assert sorted(ideal_lowlatency(tr, 0)) == sorted(len(tr.online_at(s)) for s in (0, 5, 7))

    def test_negative(self):
        with pytest.raises(ValueError):
            ideal_lowlatency(_make_trace({}, {}, 1), -1)

    @given(traces(with_messages=False), st.integers(0, 30))
    @settings(max_examples=150, deadline=None)
    def test_against_brute(self, tr, L):
        assert sorted(ideal_lowlatency(tr, L)) == brute_lowlatency(tr, L)

    def test_maxoffline_examples(self):
        tr = _make_trace({"a": [(0, 100)], "b": [(10, 60)], "c": []}, {}, 100)
        assert ideal_maxoffline(tr, 100) == 3
        assert ideal_maxoffline(tr, 0) == 1
        assert ideal_maxoffline(tr, 40) == 2

    def test_gap_scan(self):
        tr = _make_trace({"u": [(0, 100), (130, 1000), (4600, 5000)]}, {}, 5000)
        assert max_offline_gap(tr, "u") == 3600
        assert ideal_maxoffline(tr, 3600) == 1
        assert ideal_maxoffline(tr, 60) == 0

    @given(traces(with_messages=False), st.integers(0, 60))
    @settings(max_examples=100, deadline=None)
    def test_maxoffline_against_second_by_second(self, tr, tol):
        def worst_gap(u):
            run = best = 0
            for t in range(tr.horizon):
                run = 0 if any(a <= t < b for a, b in tr.timelines[u]) else run + 1
                best = max(best, run)
            return best
        assert ideal_maxoffline(tr, tol) == sum(1 for u in tr.users if worst_gap(u) <= tol)


class TestNearestRank:
    def test_values(self):
        v = [15, 20, 35, 40, 50]
        assert [nearest_rank(v, p) for p in (0, 5, 30, 40, 50, 100)] == [15, 15, 20, 20, 35, 50]

    def test_empty(self):
        with pytest.raises(ValueError):
            nearest_rank([], 50)


class TestUsability:
    def test_all_on_time(self):
        g = grid_from_sets([{"a", "b"}] * 4, {0: {"a": 1}, 2: {"a": 2}})
        s = usability_stats(simulate_nym(g, "a", PolicySpec()))
        assert s.delays == [0, 0, 1] and s.nominal_lifetime == 2 and not s.squelched

    def test_delay_four(self):
        sets = [{"a", "b", "c"}] * 3 + [{"a", "b"}] * 4 + [{"a", "b", "c"}]
        g = grid_from_sets(sets, {2: {"a": 1}, 3: {"a": 1}})
        s = usability_stats(simulate_nym(g, "a", PolicySpec(strawman=True)))
        assert s.delays == [0, 4]

    def test_squelched_leaves_infinite_delays(self):
        sets = [{"a", "b", "c"}] * 2 + [{"a", "c"}] * 5
        g = grid_from_sets(sets, {r: {"a": 1} for r in range(5)})
        run = simulate_nym(g, "a", PolicySpec(possinymity_floor=3, offline_tolerance=2))
        s = usability_stats(run)
        assert run.nym.squelched_round == 3
        assert s.delays == [0, 0, math.inf, math.inf, math.inf]
        assert s.useful_lifetime == 3 and s.squelched and s.nominal_lifetime == 4


@st.composite
def runs(draw):
    n = draw(st.integers(2, 8))
    users = [f"u{i}" for i in range(n)]
    rounds = draw(st.integers(2, 40))
    sets = [{u for u in users if draw(st.integers(0, 4)) > 0} | {"u1"} for _ in range(rounds)]
    sets[0].add("u0")
    msgs = {r: {"u0": 1} for r in set(draw(st.lists(st.integers(0, rounds - 1), min_size=1, max_size=8)))}
    for r in msgs:
        sets[r].add("u0")
    K = draw(st.integers(1, 4))
    spec = PolicySpec(buddy_min=K, offline_tolerance=draw(st.integers(0, 3)),
                      formation=draw(st.sampled_from(["static", "lazy"])), seed=draw(st.integers(0, 99)))
    return simulate_nym(grid_from_sets(sets, msgs, users=users), "u0", spec), K


@given(runs())
@settings(max_examples=200, deadline=None)
def test_history_properties(case):
    run, K = case
    roster, owner = run.nym.roster, run.nym.owner
    meter = HistoryMeter(roster)
    prev = roster
    for r in run.history:
        meter.observe(r)
        assert meter.possible <= prev
        prev = meter.possible
        assert owner in meter.possible and owner in meter.class_of(owner)
    rep = partition_from_history(run.history, roster)
    assert set().union(*rep.partition) == roster
    # Policy sets never straddle history classes.
    if run.oracle.state.partition is not None:
        for s in run.oracle.state.partition.sets:
            assert any(s <= c for c in rep.partition)
    appeared = set().union(*(r.filtered for r in run.history))
    for c in rep.partition:
        if c & appeared:
            assert len(c) >= K or K == 1


def test_always_unfiltered_user_stays():
    rnd = random.Random(3)
    roster = F("abcdef")
    for _ in range(100):
        h = [rec(i, ({u for u in roster if rnd.random() < 0.6} | {"a"}), rnd.random() < 0.5, roster)
             for i in range(20)]
        assert "a" in possinymity(h, roster).members
