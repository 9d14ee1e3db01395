"""Field-chain extraction for loads, stores and escaping addresses.

Addresses are traced backwards inside one function through ``addr``,
``phi``, ``select``, ``cast`` and ``load``.  Each ``load`` on the path to the
base object adds one more level to the chain.  Address computations that
point outside their base type are re-targeted onto a type the base pointer
is cast to (``container_of`` and neighbouring-struct arithmetic).
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

from raceweaver.kir import Instr, InstrRef, is_local, is_symbol
from raceweaver.program import FunctionIndex, Program

log = logging.getLogger(__name__)

MAX_TRACE_STEPS = 32


@dataclass(frozen=True, order=True)
class Step:
    type_id: str
    offset: int | None

    def __str__(self) -> str:
        return f"{self.type_id}.{'?' if self.offset is None else self.offset}"


@dataclass(frozen=True, order=True)
class FieldChain:
    steps: tuple[Step, ...]
    partial: bool = False

    def __str__(self) -> str:
        return "→".join(str(s) for s in self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def terminal(self) -> Step:
        return self.steps[-1]

    @property
    def type_ids(self) -> frozenset[str]:
        return frozenset(s.type_id for s in self.steps)

    def suffixes(self) -> list["FieldChain"]:
        """Every chain implied by this one, longest first (itself included)."""
        if self.partial:
            return [self]
        return [FieldChain(self.steps[i:]) for i in range(len(self.steps))]

    def implies(self, other: "FieldChain") -> bool:
        n = len(other.steps)
        return not self.partial and not other.partial and self.steps[-n:] == other.steps


@dataclass(frozen=True)
class Trace:
    steps: tuple[Step, ...]
    root: str | None
    origin: InstrRef | None = None
    casts: tuple[str, ...] = ()
    recovered: bool = False


@dataclass(frozen=True, order=True)
class FieldAccess:
    instr: InstrRef
    chain: FieldChain
    kind: str  # "read" | "write" | "escape"
    weight: int = 1
    arg_index: int | None = None
    callee: str | None = None
    root: str | None = field(default=None, compare=False)
    origin: InstrRef | None = field(default=None, compare=False)
    address: str | None = field(default=None, compare=False)

    @property
    def function(self) -> str:
        return self.instr.function

    @property
    def partial(self) -> bool:
        return self.chain.partial


class _BudgetExceeded(Exception):
    pass


class FieldExtractor:
    """Extracts :class:`FieldAccess` records; keeps diagnostic counters."""

    def __init__(self, program: Program):
        self.program = program
        self.types = program.types
        self.diagnostics: Counter[str] = Counter()
        self.messages: list[str] = []

    # -- layout helpers ---------------------------------------------------
    def _typed_steps(self, type_id: str, path) -> tuple[Step, ...] | None:
        layout = self.types.get(type_id)
        steps = []
        for kind, off in path:
            if kind == "byte" or layout is None:
                return None
            f = layout.field_at(off)
            if f is None:
                return None
            steps.append(Step(self.program.canonical(layout.type_id), off))
            layout = self.types.get(f.inline_type) if f.inline_type else None
        return tuple(steps)

    def resolve_offset(self, type_id: str, offset: int) -> tuple[Step, ...] | None:
        """Chain naming the field of ``type_id`` that starts at ``offset``,
        descending into inline aggregates when needed."""
        layout = self.types.get(type_id)
        if layout is None or offset < 0:
            return None
        here = Step(self.program.canonical(type_id), offset)
        if layout.field_at(offset) is not None:
            return (here,)
        f = layout.field_containing(offset)
        if f is not None and f.inline_type is not None:
            sub = self.resolve_offset(f.inline_type, offset - f.offset)
            if sub:
                return (Step(here.type_id, f.offset),) + sub
        return None

    def field_decl(self, step: Step):
        layout = self.types.get(step.type_id)
        return layout.field_at(step.offset) if layout and step.offset is not None else None

    def is_lock_chain(self, steps: tuple[Step, ...]) -> bool:
        f = self.field_decl(steps[-1]) if steps else None
        return f is not None and f.is_lock

    @staticmethod
    def _path_bytes(ins: Instr) -> int:
        return sum(v for _, v in ins.path)

    def is_out_of_bounds(self, ins: Instr) -> bool:
        return ins.opcode == "addr" and (
            ins.type_id is None or self._typed_steps(ins.type_id, ins.path) is None
        )

    # -- backwards tracing ------------------------------------------------
    def _tick(self, budget: list[int]) -> None:
        budget[0] -= 1
        if budget[0] < 0:
            raise _BudgetExceeded

    def _addr_traces(self, fi: FunctionIndex, v: str, budget: list[int], casts=()) -> list[Trace]:
        self._tick(budget)
        ins = fi.defs.get(v) if is_local(v) else None
        if ins is None:
            return []
        op = ins.opcode
        if op == "addr":
            steps = self._typed_steps(ins.type_id, ins.path) if ins.type_id else None
            ref = fi.def_ref[v]
            if steps is None:
                return [Trace(s, root, ref, casts, True) for s, root in self._recover(fi, ins, budget)]
            return [Trace(prefix + steps, root, ref, casts)
                    for prefix, root in self._object_traces(fi, ins.operands[0], budget)]
        if op == "phi":
            return [t for o in ins.operands for t in self._addr_traces(fi, o, budget, casts)]
        if op == "select":
            return [t for o in ins.operands[1:] for t in self._addr_traces(fi, o, budget, casts)]
        if op == "cast":
            return self._addr_traces(fi, ins.operands[0], budget, casts + (ins.type_id,))
        return []

    def _object_traces(self, fi: FunctionIndex, v: str, budget: list[int]) -> list[tuple[tuple[Step, ...], str]]:
        """(chain prefix, root value) pairs for the object a pointer refers to."""
        self._tick(budget)
        if is_symbol(v):
            return [((), v)]
        if not is_local(v):
            return []
        ins = fi.defs.get(v)
        if ins is None:
            return [((), v)]
        op = ins.opcode
        if op == "load":
            inner = self._addr_traces(fi, ins.operands[0], budget)
            return [(t.steps, t.root) for t in inner] or [((), v)]
        if op == "addr":
            if self.is_out_of_bounds(ins):
                return [((), self._root_pointer(fi, v)[0])]
            return [(t.steps, t.root) for t in self._addr_traces(fi, v, budget)]
        if op == "cast":
            return self._object_traces(fi, ins.operands[0], budget)
        if op == "phi":
            return [p for o in ins.operands for p in self._object_traces(fi, o, budget)]
        if op == "select":
            return [p for o in ins.operands[1:] for p in self._object_traces(fi, o, budget)]
        return [((), v)]

    def _root_pointer(self, fi: FunctionIndex, v: str) -> tuple[str, int]:
        """Follow addr/cast links back to the base pointer; returns it with
        the accumulated byte offset of ``v`` from it."""
        total = 0
        seen = set()
        while is_local(v) and v not in seen:
            seen.add(v)
            ins = fi.defs.get(v)
            if ins is None or ins.opcode not in ("addr", "cast"):
                break
            if ins.opcode == "addr":
                total += self._path_bytes(ins)
            v = ins.operands[0]
        return v, total

    def _recover(self, fi: FunctionIndex, ins: Instr, budget: list[int]):
        base, b_s = self._root_pointer(fi, ins.operands[0])
        b_s += self._path_bytes(ins)
        found: dict[tuple[Step, ...], None] = {}
        for _, c in fi.instrs:
            if c.opcode != "cast" or c.type_id not in self.types:
                continue
            src_base, b_c = self._root_pointer(fi, c.operands[0])
            if src_base != base:
                continue
            steps = self.resolve_offset(c.type_id, b_s - b_c) if b_s - b_c >= 0 else None
            if steps:
                found.setdefault(steps)
        if len(found) > 1:
            self.diagnostics["ambiguous_recoveries"] += 1
            self.messages.append(
                f"{fi.name}: out-of-bounds address {ins.result} has {len(found)} candidate fields")
        roots = {root for _, root in self._object_traces(fi, base, budget)} or {base}
        return [(steps, root) for steps in found for root in sorted(roots)]

    def address_traces(self, fi: FunctionIndex, value: str) -> list[Trace]:
        budget = [MAX_TRACE_STEPS]
        try:
            traces = self._addr_traces(fi, value, budget)
        except _BudgetExceeded:
            self.diagnostics["trace_depth_exceeded"] += 1
            return []
        unique: dict[tuple, Trace] = {}
        for t in traces:
            unique.setdefault((t.steps, t.root), t)
        return list(unique.values())

    def object_traces(self, fi: FunctionIndex, value: str) -> list[tuple[tuple[Step, ...], str]]:
        """(chain, root) pairs naming the object pointer ``value`` refers to."""
        try:
            found = self._object_traces(fi, value, [MAX_TRACE_STEPS])
        except _BudgetExceeded:
            self.diagnostics["trace_depth_exceeded"] += 1
            return []
        return list(dict.fromkeys(found))

    # -- public operations -------------------------------------------------
    def recover_out_of_bounds_field(self, fi: FunctionIndex, addr_value: str) -> list[FieldChain]:
        ins = fi.defs.get(addr_value)
        if ins is None or not self.is_out_of_bounds(ins):
            return []
        try:
            return [FieldChain(steps) for steps, _ in self._recover(fi, ins, [MAX_TRACE_STEPS])]
        except _BudgetExceeded:
            return []

    def fallback_containing_type(self, ins: Instr) -> FieldChain | None:
        if ins.annot is None:
            return None
        return FieldChain((Step(self.program.canonical(ins.annot), None),), partial=True)

    def extract_field_access(self, fi: FunctionIndex, ref: InstrRef, ins: Instr) -> list[FieldAccess]:
        if ins.opcode in ("load", "store"):
            if ins.opcode == "load":
                addr, kind, weight = ins.operands[0], "read", max(1, fi.use_count(ins.result))
            else:
                addr, kind, weight = ins.operands[1], "write", 1
            traces = self.address_traces(fi, addr)
            if not traces:
                chain = self.fallback_containing_type(ins)
                if chain is None:
                    self.diagnostics["untraceable_operands"] += 1
                    return []
                return [FieldAccess(ref, chain, kind, weight, address=addr)]
            return sorted(
                FieldAccess(ref, FieldChain(t.steps), kind, weight, root=t.root, origin=t.origin, address=addr)
                for t in traces
            )
        if ins.is_call:
            callee = ins.callee if ins.opcode == "call" else "<indirect>"
            out = []
            for idx, arg in enumerate(ins.call_args):
                for t in self.address_traces(fi, arg):
                    out.append(FieldAccess(ref, FieldChain(t.steps), "escape", 1, idx, callee,
                                           root=t.root, origin=t.origin, address=arg))
            return sorted(out)
        return []

    def extract_function(self, fi: FunctionIndex) -> list[FieldAccess]:
        out = []
        for ref, ins in fi.instrs:
            out.extend(self.extract_field_access(fi, ref, ins))
        return out
