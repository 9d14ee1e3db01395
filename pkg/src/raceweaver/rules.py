"""Potential locking rules and threshold-filtered violations.

A rule pairs a field chain with a lock.  It is created when an access to
the field (or to a chain implying it) happens while the lock is definitely
held, and its tallies then count every access to the field as locked or
unlocked with respect to that lock.  A rule's unlocked accesses are
reported when the rule's unlocked fraction is at or below the threshold.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable

from raceweaver.fields import FieldAccess, FieldChain
from raceweaver.kir import InstrRef
from raceweaver.locks import CoverageMap, LockRef

log = logging.getLogger(__name__)

SUPPRESSION_FLAGS = ("context", "init-cleanup", "recheck", "safe-fn", "write-escape")


class ThresholdError(ValueError):
    pass


def check_threshold(threshold: Fraction) -> Fraction:
    threshold = Fraction(threshold)
    if not 0 <= threshold <= 1:
        raise ThresholdError(f"threshold {threshold} outside [0, 1]")
    return threshold


def parse_threshold(text) -> Fraction:
    """``p/q``, a percentage such as ``16.67%``, or a plain number in [0, 1]."""
    if isinstance(text, (int, Fraction)):
        value = Fraction(text)
    else:
        s = str(text).strip()
        try:
            if s.endswith("%"):
                value = Fraction(s[:-1].strip()) / 100
            else:
                value = Fraction(s)
        except (ValueError, ZeroDivisionError):
            raise ValueError(f"cannot read threshold {text!r}") from None
    if not 0 <= value <= 1:
        raise ValueError(f"threshold {text!r} lies outside [0, 1]")
    return value


@dataclass(frozen=True)
class AccessRecord:
    """A field access together with the locks definitely held at it."""

    access: FieldAccess
    locks: frozenset[LockRef]

    @property
    def instr(self) -> InstrRef:
        return self.access.instr

    @property
    def chain(self) -> FieldChain:
        return self.access.chain


def implication_closed(locks: Iterable[LockRef]) -> frozenset[LockRef]:
    return frozenset(s for lock in locks for s in lock.suffixes())


def access_records(accesses: Iterable[FieldAccess], coverage: CoverageMap) -> list[AccessRecord]:
    """Pair each access in reachable code with its implication-closed lockset."""
    out = []
    for a in accesses:
        if coverage.reachable(a.instr):
            out.append(AccessRecord(a, implication_closed(coverage.locks_at(a.instr))))
    return sorted(out, key=lambda r: r.access)


def candidate_locks(chain: FieldChain, locks: Iterable[LockRef]) -> frozenset[LockRef]:
    """Locks living in a struct that also appears in ``chain``."""
    types = chain.type_ids
    return frozenset(lk for lk in locks if lk.global_name is None and lk.type_ids & types)


@dataclass
class PotentialRule:
    field: FieldChain
    lock: LockRef
    locked_tally: int = 0
    unlocked_tally: int = 0
    locked_weight: int = 0
    unlocked_weight: int = 0
    type_locked_weight: int = 0
    type_unlocked_weight: int = 0

    @property
    def key(self) -> tuple[FieldChain, LockRef]:
        return (self.field, self.lock)

    def ratio(self, raw_counts: bool = False) -> Fraction:
        if raw_counts:
            locked, unlocked = self.locked_tally, self.unlocked_tally
        else:
            locked, unlocked = self.locked_weight, self.unlocked_weight
        total = locked + unlocked
        return Fraction(unlocked, total) if total else Fraction(0)

    @property
    def fraction(self) -> Fraction:
        return self.ratio()

    def __str__(self) -> str:
        return f"{self.field} protected by {self.lock}"


def minimal_detection_threshold(rule: PotentialRule, raw_counts: bool = False) -> Fraction:
    """Smallest threshold at which ``rule``'s violations get reported."""
    return rule.ratio(raw_counts)


@dataclass(frozen=True)
class Violation:
    rule: PotentialRule = field(compare=False)
    access: FieldAccess
    fraction: Fraction
    rule_key: tuple = ()
    suppressed_by: frozenset[str] = frozenset()

    @property
    def function(self) -> str:
        return self.access.instr.function

    @property
    def location(self) -> str:
        return str(self.access.instr)

    @property
    def chain(self) -> str:
        return str(self.access.chain)

    @property
    def reported(self) -> bool:
        return not self.suppressed_by

    def flag(self, *names: str) -> "Violation":
        return replace(self, suppressed_by=self.suppressed_by | frozenset(names))

    def sort_key(self):
        return (self.fraction, str(self.rule.field), str(self.rule.lock), self.access.instr, self.access.kind)


class _ChainIndex:
    """Records grouped by every chain they imply, one record per instruction."""

    def __init__(self, records: Iterable[AccessRecord]):
        self.by_chain: dict[FieldChain, dict[InstrRef, AccessRecord]] = defaultdict(dict)
        self.partial_by_type: dict[str, dict[InstrRef, AccessRecord]] = defaultdict(dict)
        for r in records:
            if r.chain.partial:
                self.partial_by_type[r.chain.terminal.type_id].setdefault(r.instr, r)
                continue
            for c in r.chain.suffixes():
                self.by_chain[c].setdefault(r.instr, r)

    def records(self, chain: FieldChain) -> list[AccessRecord]:
        return list(self.by_chain.get(chain, {}).values())


def infer_rules(records: Iterable[AccessRecord], is_lock_field=None) -> dict[tuple, PotentialRule]:
    """Two passes: create rules from locked accesses, then tally every access.

    ``is_lock_field`` is a predicate on a chain; rules whose field is itself
    a lock are dropped.  Partial chains never create rules and only feed the
    type-level tallies of rules whose field lives in their type.
    """
    records = list(records)
    index = _ChainIndex(records)
    rules: dict[tuple, PotentialRule] = {}
    for r in records:
        if r.chain.partial:
            continue
        for c in r.chain.suffixes():
            if is_lock_field is not None and is_lock_field(c):
                continue
            for lock in candidate_locks(c, r.locks):
                rules.setdefault((c, lock), PotentialRule(c, lock))
    for (c, lock), rule in rules.items():
        for r in index.records(c):
            w = r.access.weight
            if lock in r.locks:
                rule.locked_tally += 1
                rule.locked_weight += w
            else:
                rule.unlocked_tally += 1
                rule.unlocked_weight += w
        for r in index.partial_by_type.get(c.terminal.type_id, {}).values():
            if lock in r.locks:
                rule.type_locked_weight += r.access.weight
            else:
                rule.type_unlocked_weight += r.access.weight
    return dict(sorted(rules.items(), key=lambda kv: (str(kv[0][0]), str(kv[0][1]))))


def detect_violations(rules: dict[tuple, PotentialRule] | Iterable[PotentialRule], records: Iterable[AccessRecord],
                      threshold: Fraction, raw_counts: bool = False) -> list[Violation]:
    threshold = check_threshold(threshold)
    rule_list = list(rules.values()) if isinstance(rules, dict) else list(rules)
    records = list(records)
    index = _ChainIndex(records)
    out = []
    for rule in rule_list:
        frac = rule.ratio(raw_counts)
        if frac > threshold or rule.unlocked_tally == 0:
            continue
        seen = set()
        for r in sorted(index.records(rule.field), key=lambda r: r.access):
            if rule.lock in r.locks or r.instr in seen:
                continue
            seen.add(r.instr)
            out.append(Violation(rule, r.access, frac, rule.key))
    return sorted(out, key=Violation.sort_key)
