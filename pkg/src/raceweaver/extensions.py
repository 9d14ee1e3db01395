"""Checks layered on the lock coverage: lock-held assertions and writes
performed while a reader-writer lock is only held for reading."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable

from raceweaver.kir import InstrRef
from raceweaver.kir.model import LOCK_MODES
from raceweaver.locks import CoverageMap, LockRef, SymLock, ctx_key
from raceweaver.rules import AccessRecord, PotentialRule

log = logging.getLogger(__name__)

MAX_WITNESS_LENGTH = 8


@dataclass(frozen=True)
class AssertionViolation:
    site: InstrRef
    lock: object  # LockRef, or SymLock for a lock reached from a root's parameter
    witness: tuple[InstrRef, ...] | None  # call sites from an entry point down to the assertion

    @property
    def function(self) -> str:
        return self.site.function


@dataclass(frozen=True)
class RwViolation:
    access: object  # FieldAccess
    lock: LockRef
    rule_field: str
    held_mode: str = "read"


def _held(lock, held) -> bool:
    return any(e[0] == lock for e in held)


def _missing(transfer, entry, lock) -> tuple[bool, bool]:
    """(lock missing after ``transfer`` from ``entry``, missing regardless of entry)."""
    missing = not _held(lock, transfer.apply(entry))
    forced = not _held(lock, transfer.apply(entry | {(lock, m) for m in LOCK_MODES}))
    return missing, forced


def _witness(coverage: CoverageMap, start_key, constrained: bool, lock) -> tuple[InstrRef, ...] | None:
    """Shortest caller chain from an analysis root into ``start_key`` along
    which ``lock`` can be missing on entry (when ``constrained``)."""
    start = (start_key, constrained)
    parent: dict = {start: None}
    queue = deque([(start, 0)])
    while queue:
        state, depth = queue.popleft()
        key, need = state
        if key in coverage.root_contexts:
            path = []
            while parent[state] is not None:
                state, site = parent[state]
                path.append(site)
            return tuple(path)
        if depth >= MAX_WITNESS_LENGTH:
            continue
        for caller, site in sorted(coverage.context_sites.get(key, ()), key=lambda cs: (cs[1], ctx_key(cs[0]))):
            t = coverage.transfers.get(caller, {}).get(site)
            if t is None:
                continue
            if need:
                missing, forced = _missing(t, coverage.contexts[caller], lock)
                if not missing:
                    continue
                nxt = (caller, not forced)
            else:
                nxt = (caller, False)
            if nxt not in parent:
                parent[nxt] = (state, site)
                queue.append((nxt, depth + 1))
    return None


def expected_lock(lock):
    """The asserted lock as a program-wide name: the field chain of a lock
    reached from a parameter, or the lock itself."""
    if isinstance(lock, SymLock) and lock.chain:
        return LockRef(lock.chain)
    return lock


def check_assertions(coverage: CoverageMap, cg=None) -> list[AssertionViolation]:
    """One violation per assertion whose lock is missing in some context,
    carrying the shortest witness found."""
    analysis = coverage.analysis
    out = []
    for ref, operand in analysis.assertion_sites():
        fi = analysis.program.index[ref.function]
        keys = sorted((k for k in coverage.transfers if k[0] == ref.function), key=ctx_key)
        best = None
        for key in keys:
            t = coverage.transfers[key].get(ref)
            if t is None:
                continue
            for lock in analysis.lock_candidates(fi, key[1], operand) or ():
                missing, forced = _missing(t, coverage.contexts[key], lock)
                if not missing:
                    continue
                w = _witness(coverage, key, not forced, lock)
                cand = AssertionViolation(ref, expected_lock(lock), w)
                if best is None or (w is not None and (best.witness is None or len(w) < len(best.witness))):
                    best = cand
        if best is not None:
            out.append(best)
    return out


def check_rw_violations(rules: Iterable[PotentialRule], records: Iterable[AccessRecord],
                        coverage: CoverageMap) -> list[RwViolation]:
    """Writes to a ruled field while the rule's lock is held in read mode only."""
    rules = list(rules.values()) if isinstance(rules, dict) else list(rules)
    out = []
    seen = set()
    for r in records:
        if r.access.kind != "write" or r.chain.partial:
            continue
        for rule in rules:
            if (r.instr, rule.lock) in seen or rule.lock not in r.locks or not r.chain.implies(rule.field):
                continue
            if coverage.modes_at(r.instr, rule.lock) == {"read"}:
                seen.add((r.instr, rule.lock))
                out.append(RwViolation(r.access, rule.lock, str(rule.field)))
    return sorted(out, key=lambda v: (v.access.instr, str(v.lock)))
