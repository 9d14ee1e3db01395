from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import analyze_text
from raceweaver.fields import FieldAccess, FieldChain, Step
from raceweaver.kir import InstrRef
from raceweaver.locks import LockRef
from raceweaver.rules import (
    AccessRecord,
    ThresholdError,
    candidate_locks,
    detect_violations,
    infer_rules,
    minimal_detection_threshold,
    parse_threshold,
)

T8 = FieldChain((Step("T", 8),))
T_LOCK = LockRef((Step("T", 0),))
T_LOCK2 = LockRef((Step("T", 16),))


def chain(*steps):
    return FieldChain(tuple(Step(t, o) for t, o in steps))


def lock(*steps):
    return LockRef(tuple(Step(t, o) for t, o in steps))


def record(i, ch=T8, locks=(), kind="write", weight=1, fn="f"):
    return AccessRecord(FieldAccess(InstrRef(fn, "b0", i), ch, kind, weight), frozenset(locks))


def counted(locked, unlocked, ch=T8, lk=T_LOCK):
    recs = [record(i, ch, [lk]) for i in range(locked)]
    recs += [record(locked + i, ch) for i in range(unlocked)]
    return recs


def test_candidate_locks_same_struct():
    assert candidate_locks(T8, [T_LOCK]) == {T_LOCK}


def test_candidate_locks_common_ancestor():
    field = chain(("P", 16), ("T", 8))
    assert candidate_locks(field, [lock(("P", 24))]) == {lock(("P", 24))}


def test_candidate_locks_unrelated_or_global():
    assert candidate_locks(T8, [lock(("U", 0)), LockRef(global_name="g")]) == frozenset()


def test_tallies_and_fraction():
    rules = infer_rules(counted(4, 1))
    rule = rules[(T8, T_LOCK)]
    assert (rule.locked_tally, rule.unlocked_tally) == (4, 1)
    assert rule.fraction == Fraction(1, 5)


def test_lock_fields_get_no_rules():
    outer = lock(("T", 16))
    recs = [record(i, chain(("T", 0)), [outer]) for i in range(3)]
    rules = infer_rules(recs, is_lock_field=lambda c: c.terminal == Step("T", 0))
    assert rules == {}


def test_two_locks_give_two_independent_rules():
    recs = [record(i, T8, [T_LOCK, T_LOCK2]) for i in range(4)]
    rules = infer_rules(recs)
    assert set(rules) == {(T8, T_LOCK), (T8, T_LOCK2)}
    assert all(r.fraction == 0 for r in rules.values())


def test_suffix_chains_also_get_rules():
    long = chain(("P", 8), ("T", 8))
    recs = [record(0, long, [T_LOCK])]
    assert (T8, T_LOCK) in infer_rules(recs)


def test_load_weights_enter_the_fraction():
    recs = [record(0, T8, [T_LOCK], "read", 3), record(1, T8, [], "read", 1)]
    rule = infer_rules(recs)[(T8, T_LOCK)]
    assert (rule.locked_weight, rule.unlocked_weight) == (3, 1)
    assert rule.ratio() == Fraction(1, 4)
    assert rule.ratio(raw_counts=True) == Fraction(1, 2)


@pytest.mark.parametrize("locked, unlocked, threshold, reported", [
    (18, 1, Fraction(1, 6), True),
    (1, 1, Fraction(1, 6), False),
    (1, 1, Fraction(1, 2), True),
    (5, 1, Fraction(1, 6), True),
    (5, 1, Fraction(1666, 10000), False),
    (3, 0, Fraction(1), False),
])
def test_detection_threshold_is_inclusive(locked, unlocked, threshold, reported):
    recs = counted(locked, unlocked)
    rules = infer_rules(recs)
    got = detect_violations(rules, recs, threshold)
    assert bool(got) == reported
    if reported:
        assert len(got) == unlocked
        assert all(T_LOCK not in r.locks for r in recs if r.instr in {v.access.instr for v in got})


@pytest.mark.parametrize("locked, unlocked, expected", [
    (5, 1, Fraction(1, 6)), (13, 7, Fraction(7, 20)), (4, 0, Fraction(0)), (18, 1, Fraction(1, 19)),
])
def test_minimal_detection_threshold(locked, unlocked, expected):
    rule = infer_rules(counted(locked, unlocked))[(T8, T_LOCK)]
    assert minimal_detection_threshold(rule) == expected


def test_partial_accesses_feed_type_tallies_only():
    partial = FieldChain((Step("T", None),), partial=True)
    recs = counted(4, 1) + [record(10, partial, [T_LOCK]), record(11, partial, [])]
    rules = infer_rules(recs)
    rule = rules[(T8, T_LOCK)]
    assert (rule.type_locked_weight, rule.type_unlocked_weight) == (1, 1)
    assert (rule.locked_weight, rule.unlocked_weight) == (4, 1)
    assert all(not v.access.partial for v in detect_violations(rules, recs, Fraction(1)))
    assert infer_rules(recs[-2:]) == {}


def test_threshold_validation():
    assert parse_threshold("1/6") == Fraction(1, 6)
    assert parse_threshold("16.67%") == Fraction(1667, 10000)
    assert parse_threshold("0.5") == Fraction(1, 2)
    for bad in ("2", "-1/3", "abc", "1/0", "150%"):
        with pytest.raises(ValueError):
            parse_threshold(bad)
    with pytest.raises(ThresholdError):
        detect_violations({}, [], Fraction(3, 2))


def test_violations_are_sorted_deterministically():
    recs = counted(9, 1) + counted(5, 1, chain(("T", 24)))
    rules = infer_rules(recs)
    vs = detect_violations(rules, recs, Fraction(1, 4))
    fractions = [v.fraction for v in vs]
    assert fractions == sorted(fractions)


record_lists = st.lists(
    st.tuples(st.sampled_from([8, 16, 24]), st.booleans(), st.booleans(), st.integers(1, 3)),
    min_size=1, max_size=25,
)


def _records(spec):
    out = []
    for i, (off, l1, l2, w) in enumerate(spec):
        locks = [lk for lk, on in ((T_LOCK, l1), (lock(("T", 32)), l2)) if on]
        out.append(record(i, chain(("T", off)), locks, "read", w))
    return out


@settings(max_examples=200, deadline=None)
@given(record_lists, st.fractions(0, 1), st.fractions(0, 1))
def test_reports_are_monotone_in_threshold(spec, a, b):
    t1, t2 = min(a, b), max(a, b)
    recs = _records(spec)
    rules = infer_rules(recs)
    low = {(v.rule_key, v.access.instr) for v in detect_violations(rules, recs, t1)}
    high = {(v.rule_key, v.access.instr) for v in detect_violations(rules, recs, t2)}
    assert low <= high


@settings(max_examples=200, deadline=None)
@given(record_lists, st.data())
def test_dropping_a_locked_access_never_raises_locked_tallies(spec, data):
    recs = _records(spec)
    locked = [i for i, r in enumerate(recs) if r.locks]
    if not locked:
        return
    drop = data.draw(st.sampled_from(locked))
    before = infer_rules(recs)
    after = infer_rules(recs[:drop] + recs[drop + 1:])
    for key, rule in after.items():
        assert rule.locked_tally <= before[key].locked_tally


def test_end_to_end_rule_from_kir():
    text = ("type T size 16 { field 0 8 lock; field 8 8 scalar }\n"
            "func f(%p: *T) {\nblock b0:\n  %l = addr %p : T [0]\n  acquire %l\n  %a = addr %p : T [8]\n"
            + "".join(f"  store {i}, %a\n" for i in range(5))
            + "  release %l\n  store 9, %a\n  ret\n}\n")
    analysis = analyze_text(text, context=False, heuristics=frozenset())
    (rule,) = analysis.rules.values()
    assert (str(rule.field), str(rule.lock), rule.locked_tally, rule.unlocked_tally) == ("T.8", "T.0", 5, 1)
    assert [v.location for v in analysis.reported] == ["f:b0:9"]
