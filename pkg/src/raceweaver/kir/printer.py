"""Canonical KIR text emitter; ``parse_module(print_module(m)) == m``."""

from __future__ import annotations

from raceweaver.kir.model import Function, Instr, Module

_LOCK_SPELLING = {"exclusive": "acquire", "read": "acquire_read", "write": "acquire_write"}


def format_path(path) -> str:
    return " ".join(f"[{v}]" if kind == "field" else f"byte {v}" for kind, v in path)


def format_instr(ins: Instr) -> str:
    op = ins.opcode
    lhs = f"{ins.result} = " if ins.result else ""
    annot = f" !type {ins.annot}" if ins.annot else ""
    if op == "load":
        return f"{lhs}load {ins.operands[0]}{annot}"
    if op == "store":
        atomic = " atomic" if ins.atomic else ""
        return f"store {ins.operands[0]}, {ins.operands[1]}{atomic}{annot}"
    if op == "addr":
        ty = f"{ins.type_id} " if ins.type_id else ""
        return f"{lhs}addr {ins.operands[0]} : {ty}{format_path(ins.path)}"
    if op == "cast":
        return f"{lhs}cast {ins.operands[0]} to {ins.type_id}"
    if op in ("phi", "select"):
        return f"{lhs}{op} {', '.join(ins.operands)}"
    if op == "cmp":
        return f"{lhs}cmp {ins.pred} {ins.operands[0]}, {ins.operands[1]}"
    if op == "call":
        return f"{lhs}call {ins.callee}({', '.join(ins.operands)})"
    if op == "icall":
        return f"{lhs}icall {ins.operands[0]}({', '.join(ins.operands[1:])})"
    if op == "ret":
        return f"ret {ins.operands[0]}" if ins.operands else "ret"
    if op == "br":
        if ins.operands:
            return f"br {ins.operands[0]}, {ins.targets[0]}, {ins.targets[1]}"
        return f"br {ins.targets[0]}"
    if op == "alloc":
        return f"{lhs}alloc {ins.type_id}"
    if op == "free":
        return f"free {ins.operands[0]}"
    if op == "acquire":
        return f"{_LOCK_SPELLING[ins.mode or 'exclusive']} {ins.operands[0]}"
    if op == "release":
        return f"release {ins.operands[0]}"
    if op == "assert_held":
        return f"assert_held {ins.operands[0]}"
    if op == "data_race":
        return f"data_race {ins.marker}"
    raise ValueError(f"cannot print opcode {op!r}")


def format_function(fn: Function) -> str:
    params = ", ".join(f"{p.name}: {p.elem}" for p in fn.params)
    ret = f" -> {fn.ret}" if fn.ret else ""
    lines = [f"func {fn.name}({params}){ret} {{"]
    for b in fn.blocks:
        lines.append(f"block {b.label}:")
        lines.extend("  " + format_instr(i) for i in b.instrs)
    lines.append("}")
    return "\n".join(lines)


def print_module(m: Module) -> str:
    out: list[str] = []
    for layout in m.types.structs.values():
        lock = " lock" if layout.is_lock_type else ""
        out.append(f"type {layout.type_id} size {layout.total_size}{lock} {{")
        out.extend(f"  field {f.offset} {f.size} {f.elem}" for f in layout.fields)
        out.append("}")
    for g in m.globals.values():
        out.append(f"global {g.name} : {g.elem}")
    for fn in m.functions.values():
        out.append(format_function(fn))
    return "\n".join(out) + ("\n" if out else "")
