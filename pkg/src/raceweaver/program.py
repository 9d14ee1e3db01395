"""Derived per-function indexes shared by every analysis pass."""

from __future__ import annotations

from collections import defaultdict
from functools import cached_property

from raceweaver.kir import Cfg, Function, Instr, InstrRef, Module, build_cfg, is_local, is_symbol
from raceweaver.kir.model import SCALAR_KINDS


class FunctionIndex:
    """Definitions, uses and value types of one function."""

    def __init__(self, fn: Function, module: Module):
        self.fn = fn
        self.module = module
        self.cfg: Cfg = build_cfg(fn)
        self.instrs: list[tuple[InstrRef, Instr]] = []
        self.defs: dict[str, Instr] = {}
        self.def_ref: dict[str, InstrRef] = {}
        self.uses: dict[str, list[tuple[InstrRef, Instr]]] = defaultdict(list)
        self.by_ref: dict[InstrRef, Instr] = {}
        for label, i, ins in fn.instructions():
            ref = InstrRef(fn.name, label, i)
            self.instrs.append((ref, ins))
            self.by_ref[ref] = ins
            if ins.result is not None:
                self.defs[ins.result] = ins
                self.def_ref[ins.result] = ref
            for op in ins.operands:
                if is_local(op):
                    self.uses[op].append((ref, ins))

    @property
    def name(self) -> str:
        return self.fn.name

    def use_count(self, value: str) -> int:
        return len(self.uses.get(value, ()))

    def param_index(self, value: str) -> int | None:
        return self.fn.param_index(value)

    def returns(self) -> list[tuple[InstrRef, Instr]]:
        return [(r, i) for r, i in self.instrs if i.opcode == "ret"]

    @cached_property
    def vtypes(self) -> dict[str, str | None]:
        """Best-effort value types: ``*T``, ``**T``, ``*scalar``, ``scalar``,
        ``ptr``, ``fnptr``; ``None`` when unknown."""
        out: dict[str, str | None] = {p.name: p.elem for p in self.fn.params}

        def of(op: str) -> str | None:
            if is_local(op):
                return out.get(op)
            if is_symbol(op):
                name = op[1:]
                if name in self.module.functions:
                    return "fnptr"
                g = self.module.globals.get(name)
                return "*" + g.elem if g else None
            return "scalar"

        for _ in range(2):  # second pass settles phis referring forward
            for _, ins in self.instrs:
                if ins.result is None:
                    continue
                op = ins.opcode
                t: str | None = None
                if op == "load":
                    src = of(ins.operands[0])
                    t = src[1:] if src and src.startswith("*") else None
                elif op == "addr":
                    t = self._addr_type(ins)
                elif op == "cast":
                    t = ins.type_id if ins.type_id in SCALAR_KINDS else "*" + ins.type_id
                elif op == "alloc":
                    t = "*" + ins.type_id
                elif op in ("phi",):
                    t = next((of(o) for o in ins.operands if of(o)), None)
                elif op == "select":
                    t = of(ins.operands[1]) or of(ins.operands[2])
                elif op == "cmp":
                    t = "scalar"
                elif op == "call":
                    callee = self.module.functions.get(ins.callee)
                    t = callee.ret if callee else None
                out[ins.result] = t
        return out

    def _addr_type(self, ins: Instr) -> str | None:
        if ins.type_id is None or ins.is_byte_path:
            return "ptr"
        layout = self.module.types.get(ins.type_id)
        elem = None
        for _, off in ins.path:
            if layout is None:
                return "ptr"
            f = layout.field_at(off)
            if f is None:
                return "ptr"
            elem = f.elem
            layout = self.module.types.get(f.inline_type) if f.inline_type else None
        return "*" + elem if elem else None


class Program:
    """A parsed module plus lazily built per-function indexes."""

    def __init__(self, module: Module):
        from raceweaver.callgraph import canonical_type_names

        self.module = module
        self.types = module.types
        self.canon: dict[str, str] = canonical_type_names(module.types)
        self.index: dict[str, FunctionIndex] = {
            name: FunctionIndex(fn, module) for name, fn in sorted(module.functions.items())
        }

    def functions(self) -> list[FunctionIndex]:
        return list(self.index.values())

    def instr(self, ref: InstrRef) -> Instr:
        return self.index[ref.function].by_ref[ref]

    def canonical(self, type_id: str) -> str:
        return self.canon.get(type_id, type_id)
