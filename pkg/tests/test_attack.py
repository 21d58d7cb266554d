import io
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buddies.attack import (
    ATTACK_HEADER,
    AttackConfig,
    AttackError,
    AttackState,
    best_guess,
    evaluate_attack,
    evaluate_attack_sweep,
    observe_round,
    write_attack,
)
from buddies.engine import RoundRecord, simulate_nym
from buddies.metrics import partition_from_history
from buddies.policy import PolicySpec
from conftest import grid_from_sets

F = frozenset


def rec(i, P, non_null, roster):
    return RoundRecord(i, F(roster), F(roster), F(P), "n", 1 if non_null else None, 0, None)


def exact_weights(history, roster, p: Fraction):
    """Literal update rule in exact arithmetic: scale by p on null, zero outside P on non-null, renormalize."""
    w = {u: Fraction(1, len(roster)) for u in roster}
    for r in history:
        if r.non_null:
            w = {u: (x if u in r.filtered else Fraction(0)) for u, x in w.items()}
        else:
            w = {u: (x * p if u in r.filtered else x) for u, x in w.items()}
        total = sum(w.values())
        if total == 0:
            return None
        w = {u: x / total for u, x in w.items()}
    return w


class TestPosterior:
    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_two_user_formula(self, p):
        cfg = AttackConfig(p)
        state = AttackState.uniform("AB")
        for k in range(1, 21):
            observe_round(state, rec(k, "A", False, "AB"), cfg)
            assert abs(state.weights(p)["A"] - p**k / (p**k + 1)) <= 1e-12

    def test_first_step_value(self):
        # (p/2) / (p/2 + 1/2) at p = 1/2 is 1/3.
        state = observe_round(AttackState.uniform("AB"), rec(0, "A", False, "AB"))
        assert state.weights(0.5)["A"] == pytest.approx(1 / 3, abs=1e-15)

    def test_non_null_eliminates(self):
        state = observe_round(AttackState.uniform("ABC"), rec(0, "AB", True, "ABC"))
        w = state.weights(0.3)
        assert w["C"] == 0 and w["A"] == w["B"] == 0.5

    def test_non_null_without_candidates(self):
        state = observe_round(AttackState.uniform("ABC"), rec(0, "A", True, "ABC"))
        with pytest.raises(AttackError):
            observe_round(state, rec(1, "B", True, "ABC"))

    def test_p_zero_is_possibilistic(self):
        state = observe_round(AttackState.uniform("AB"), rec(0, "A", False, "AB"))
        assert state.weights(0.0) == {"A": 0.0, "B": 1.0}

    def test_p_zero_everyone_hit_keeps_uniform(self):
        state = observe_round(AttackState.uniform("AB"), rec(0, "AB", False, "AB"))
        assert state.weights(0.0) == {"A": 0.5, "B": 0.5}

    def test_p_one_null_carries_nothing(self):
        state = AttackState.uniform("ABC")
        for i in range(5):
            observe_round(state, rec(i, "A", False, "ABC"))
        assert state.weights(1.0) == {u: 1 / 3 for u in "ABC"}

    def test_no_underflow(self):
        state = AttackState.uniform("AB")
        for i in range(5000):
            observe_round(state, rec(i, "A", False, "AB"))
        w = state.weights(0.1)
        assert w["B"] == 1.0 and w["A"] == 0.0
        top, prob = best_guess(state, AttackConfig(0.1))
        assert top == F("B") and prob == 1.0

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            AttackConfig(1.5)


class TestBestGuess:
    def test_uniform(self):
        top, prob = best_guess(AttackState.uniform("abcde"), AttackConfig(0.5))
        assert top == F("abcde") and prob == 0.2

    def test_single_leader(self):
        # Weights (1/2, 1/4, 1/4) from one null round hitting b and c at p = 1/2.
        state = observe_round(AttackState.uniform("abc"), rec(0, "bc", False, "abc"))
        w = state.weights(0.5)
        assert (w["a"], w["b"], w["c"]) == (0.5, 0.25, 0.25)
        top, prob = best_guess(state, AttackConfig(0.5))
        assert top == F("a") and prob == 1.0

    def test_tolerance_groups_near_ties(self):
        state = AttackState.uniform("ab")
        observe_round(state, rec(0, "a", False, "ab"))
        top, _ = best_guess(state, AttackConfig(1 - 1e-12, weight_tolerance=1e-9))
        assert top == F("ab")
        top, _ = best_guess(state, AttackConfig(1 - 1e-12, weight_tolerance=0))
        assert top == F("b")


def naive_sequence(run, cfg):
    state = AttackState.uniform(run.nym.roster)
    out = []
    for r in run.history:
        observe_round(state, r, cfg)
        top, prob = best_guess(state, cfg)
        out.append(prob if run.nym.owner in top else 0.0)
    return out


@st.composite
def small_runs(draw):
    n = draw(st.integers(2, 8))
    users = [f"u{i}" for i in range(n)]
    rounds = draw(st.integers(2, 40))
    sets = [{u for u in users if draw(st.integers(0, 3)) > 0} for _ in range(rounds)]
    # Repeat sets so blocks of identical rounds occur.
    sets = [s for s in sets for _ in range(draw(st.integers(1, 3)))]
    msgs = {r: {"u0": 1} for r in set(draw(st.lists(st.integers(0, len(sets) - 1), min_size=1, max_size=10)))}
    for r in msgs:
        sets[r].add("u0")
    spec = PolicySpec(buddy_min=draw(st.integers(1, 3)), offline_tolerance=draw(st.integers(0, 2)),
                      seed=draw(st.integers(0, 50)))
    return simulate_nym(grid_from_sets(sets, msgs, users=users), "u0", spec)


@given(small_runs(), st.sampled_from([0.0, 0.1, 0.5, 0.9, 1.0, 0.999]))
@settings(max_examples=250, deadline=None)
def test_block_evaluation_matches_stepwise(run, p):
    cfg = AttackConfig(p)
    fast = [pt.expected_success for pt in evaluate_attack(run, cfg)]
    assert fast == naive_sequence(run, cfg)


@given(small_runs(), st.sampled_from([Fraction(1, 10), Fraction(1, 2), Fraction(9, 10)]))
@settings(max_examples=150, deadline=None)
def test_float_classes_match_exact(run, p):
    roster = run.nym.roster
    cfg = AttackConfig(float(p))
    state = AttackState.uniform(roster)
    for k, r in enumerate(run.history):
        observe_round(state, r, cfg)
        exact = exact_weights(run.history[:k + 1], roster, p)
        top_exact = F(u for u, x in exact.items() if x == max(exact.values()) and x > 0)
        top, _ = best_guess(state, cfg)
        assert top == top_exact


@given(small_runs(), st.sampled_from([0.0, 0.1, 0.5, 0.9, 1.0]))
@settings(max_examples=150, deadline=None)
def test_same_class_equal_weight_and_bound(run, p):
    cfg = AttackConfig(p)
    state = AttackState.uniform(run.nym.roster)
    for k, r in enumerate(run.history):
        observe_round(state, r, cfg)
        w = state.weights(p)
        rep = partition_from_history(run.history[:k + 1], run.nym.roster)
        for c in rep.partition:
            assert len({w[u] for u in c}) == 1
        own = next(c for c in rep.partition if run.nym.owner in c)
        top, prob = best_guess(state, cfg)
        success = prob if run.nym.owner in top else 0.0
        assert success <= 1 / len(own)


def test_strawman_uniform():
    sets = [set("abcd"), set("abc"), set("abcd"), set("bcd"), set("abcd")]
    g = grid_from_sets(sets, {0: {"a": 1}, 1: {"a": 1}, 3: {"a": 1}})
    run = simulate_nym(g, "a", PolicySpec(strawman=True))
    for p in (0.0, 0.1, 0.5, 0.9, 1.0):
        assert all(pt.expected_success == 0.25 for pt in evaluate_attack(run, AttackConfig(p)))


def test_k1_churn_reaches_certainty():
    sets = [set("abcd"), set("abc"), set("ab"), set("a"), set("a")]
    g = grid_from_sets(sets, {r: {"a": 1} for r in range(5)})
    run = simulate_nym(g, "a", PolicySpec())
    pts = evaluate_attack(run, AttackConfig(0.5))
    assert pts[-1].expected_success == 1.0 and pts[-1].possinymity == 1


def test_sweep_shares_work_and_reports_metrics():
    sets = [set("abcd")] * 3
    g = grid_from_sets(sets, {0: {"a": 1}, 2: {"a": 1}})
    run = simulate_nym(g, "a", PolicySpec())
    sweep = evaluate_attack_sweep(run, [0.0, 0.5])
    assert set(sweep) == {0.0, 0.5}
    assert [(pt.round, pt.possinymity, pt.indinymity) for pt in sweep[0.5]] == [(0, 4, 4), (1, 4, 4), (2, 4, 4)]


def test_attack_csv():
    g = grid_from_sets([set("ab")], {0: {"a": 1}})
    run = simulate_nym(g, "a", PolicySpec())
    buf = io.StringIO()
    write_attack(evaluate_attack(run, AttackConfig(0.5)), buf)
    assert buf.getvalue() == ",".join(ATTACK_HEADER) + "\n0,0.5,0.5,2,2\n"
