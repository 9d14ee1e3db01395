"""Random KIR program generators shared by the property and acceptance tests."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

LOCK_TYPES = """\
type T size 16 { field 0 8 lock; field 8 8 scalar }
type U size 16 { field 0 8 lock; field 8 8 lock }
type P size 48 { field 0 8 lock; field 8 16 T; field 24 8 *U; field 32 8 scalar; field 40 8 scalar }
global g : lock
global h : lock
"""

# parameter list per function kind
KINDS = {
    "P": "%p: *P, %c: scalar",
    "T": "%t: *T, %c: scalar",
    "L": "%l: *lock, %c: scalar",
}


@dataclass
class _Fn:
    name: str
    kind: str
    lines: list[str] = field(default_factory=list)
    n: int = 0

    def fresh(self) -> str:
        self.n += 1
        return f"%v{self.n}"


def _lock_operand(fn: _Fn, rng: random.Random, out: list[str]) -> str:
    choices = ["@g", "@h"]
    if fn.kind == "P":
        choices += ["P0", "PT", "PU0", "PU8"]
    elif fn.kind == "T":
        choices += ["T0"]
    else:
        choices += ["L"]
    c = rng.choice(choices)
    if c.startswith("@"):
        return c
    if c == "L":
        return "%l"
    v = fn.fresh()
    if c == "P0":
        out.append(f"  {v} = addr %p : P [0]")
    elif c == "PT":
        out.append(f"  {v} = addr %p : P [8] [0]")
    elif c == "T0":
        out.append(f"  {v} = addr %t : T [0]")
    else:
        slot = fn.fresh()
        u = fn.fresh()
        out.append(f"  {slot} = addr %p : P [24]")
        out.append(f"  {u} = load {slot}")
        out.append(f"  {v} = addr {u} : U [{0 if c == 'PU0' else 8}]")
    return v


def _call(fn: _Fn, callee: _Fn, rng: random.Random, out: list[str]) -> None:
    if callee.kind == "P":
        arg = "%p"
    elif callee.kind == "T":
        if fn.kind == "T":
            arg = "%t"
        else:
            arg = fn.fresh()
            out.append(f"  {arg} = addr %p : P [8]")
    else:
        arg = _lock_operand(fn, rng, out)
    out.append(f"  call {callee.name}({arg}, %c)")


def _compatible(caller: _Fn, callee: _Fn) -> bool:
    allowed = {"P": "P", "T": "PT", "L": "PTL"}
    return caller.kind in allowed[callee.kind]


def random_lock_module(rng: random.Random, max_functions: int = 8, max_blocks: int = 10,
                       loops: bool = True) -> str:
    """A module with an acyclic call graph where every block can return."""
    n = rng.randint(1, max_functions)
    fns = [_Fn(f"f{i}", rng.choice("PPTL")) for i in range(n)]
    text = [LOCK_TYPES]
    for i, fn in enumerate(fns):
        callees = [c for c in fns[i + 1:] if _compatible(fn, c)]
        nblocks = rng.randint(1, max_blocks)
        body = []
        for b in range(nblocks):
            body.append(f"block b{b}:")
            for _ in range(rng.randint(0, 4)):
                r = rng.random()
                if r < 0.45:
                    op = rng.choice(["acquire", "acquire", "acquire_read", "acquire_write", "release", "release"])
                    lk = _lock_operand(fn, rng, body)
                    body.append(f"  {op} {lk}")
                elif r < 0.75 and callees:
                    _call(fn, rng.choice(callees), rng, body)
                else:
                    v = fn.fresh()
                    body.append(f"  {v} = cmp eq %c, 0")
            if b == nblocks - 1:
                body.append("  ret")
                continue
            r = rng.random()
            fwd = rng.randint(b + 1, nblocks - 1)
            if loops and r < 0.15:
                body.append(f"  br %c, b{rng.randint(0, b)}, b{fwd}")
            elif r < 0.6:
                body.append(f"  br %c, b{fwd}, b{rng.randint(b + 1, nblocks - 1)}")
            elif r < 0.75:
                body.append("  ret")
            else:
                body.append(f"  br b{fwd}")
        text.append(f"func {fn.name}({KINDS[fn.kind]}) {{")
        text.extend(body)
        text.append("}")
    return "\n".join(text) + "\n"


# -- whole-module generator for parser round trips ------------------------------------

ROUND_TRIP_TYPES = """\
type Inner size 16 { field 0 8 lock; field 8 8 scalar }
type Outer size 40 { field 0 8 scalar; field 8 16 Inner; field 24 8 *Inner; field 32 8 fnptr }
type Mutex size 8 lock { field 0 8 scalar }
global gl : lock
global gp : *Outer
"""


def random_kir_module(rng: random.Random, n_functions: int = 50) -> str:
    """A well-formed module exercising every opcode, for printer/parser checks."""
    text = [ROUND_TRIP_TYPES]
    names = [f"fn{i}" for i in range(n_functions)]
    for i, name in enumerate(names):
        ret = rng.choice([None, "scalar", "*Outer"])
        header = f"func {name}(%o: *Outer, %n: scalar)" + (f" -> {ret}" if ret else "") + " {"
        text.append(header)
        nblocks = rng.randint(1, 4)
        k = 0

        def fresh() -> str:
            nonlocal k
            k += 1
            return f"%x{k}"

        for b in range(nblocks):
            text.append(f"block b{b}:")
            for _ in range(rng.randint(0, 6)):
                r = rng.randrange(14)
                if r == 0:
                    v = fresh()
                    text.append(f"  {v} = addr %o : Outer [8] [8]")
                    text.append(f"  {fresh()} = load {v}" + rng.choice(["", " !type Inner"]))
                elif r == 1:
                    v = fresh()
                    text.append(f"  {v} = addr %o : Outer [0]")
                    text.append(f"  store %n, {v}" + rng.choice(["", " atomic", " !type Outer"]))
                elif r == 2:
                    v = fresh()
                    text.append(f"  {v} = addr %o : byte {rng.randint(-8, 48)}")
                    text.append(f"  {fresh()} = cast {v} to {rng.choice(['Inner', 'Outer', 'ptr'])}")
                elif r == 3:
                    v = fresh()
                    text.append(f"  {v} = addr %o : Outer [8] [0]")
                    text.append(f"  {rng.choice(['acquire', 'acquire_read', 'acquire_write'])} {v}")
                    text.append(f"  assert_held {v}")
                    text.append(f"  {rng.choice(['release', 'release_read', 'release_write'])} {v}")
                elif r == 4:
                    text.append(f"  {fresh()} = cmp {rng.choice(['eq', 'ne', 'lt', 'le', 'gt', 'ge'])} %n, {rng.randint(-3, 3)}")
                elif r == 5:
                    c = fresh()
                    text.append(f"  {c} = cmp eq %n, 0")
                    text.append(f"  {fresh()} = select {c}, %o, null")
                elif r == 6 and i + 1 < n_functions:
                    callee = rng.choice(names[i + 1:])
                    res = f"{fresh()} = " if rng.random() < 0.5 else ""
                    text.append(f"  {res}call {callee}(%o, %n)")
                elif r == 7:
                    slot = fresh()
                    fp = fresh()
                    text.append(f"  {slot} = addr %o : Outer [32]")
                    text.append(f"  store @{rng.choice(names)}, {slot}")
                    text.append(f"  {fp} = load {slot}")
                    text.append(f"  icall {fp}(%o, %n)")
                elif r == 8:
                    text.append(f"  {fresh()} = alloc Outer")
                elif r == 9:
                    text.append("  free %o")
                elif r == 10:
                    text.append(f"  data_race m{rng.randint(0, 9)}")
                elif r == 11:
                    text.append("  acquire @gl")
                    text.append("  release @gl")
                elif r == 12:
                    text.append(f"  {fresh()} = load @gp")
                else:
                    text.append(f"  call ext_{rng.randint(0, 3)}(%n)")
            if b == nblocks - 1:
                text.append("  ret" + {None: "", "scalar": " %n", "*Outer": " %o"}[ret])
            elif rng.random() < 0.5:
                c = fresh()
                text.append(f"  {c} = cmp ne %n, 0")
                text.append(f"  br {c}, b{rng.randint(b + 1, nblocks - 1)}, b{rng.randint(0, nblocks - 1)}")
            else:
                text.append(f"  br b{rng.randint(b + 1, nblocks - 1)}")
        text.append("}")
    return "\n".join(text) + "\n"


def random_cfg_function(rng: random.Random, max_blocks: int = 12) -> str:
    """A single function with an arbitrary CFG (loops, dead ends, several returns)."""
    n = rng.randint(1, max_blocks)
    lines = ["func f(%c: scalar) {"]
    for b in range(n):
        lines.append(f"block b{b}:")
        r = rng.random()
        if b == n - 1 or r < 0.15:
            lines.append("  ret")
        elif r < 0.6:
            lines.append(f"  br %c, b{rng.randrange(n)}, b{rng.randrange(n)}")
        else:
            lines.append(f"  br b{rng.randrange(n)}")
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- random access corpora for report-set properties ------------------------------------

ACCESS_TYPES = """\
type A size 32 { field 0 8 lock; field 8 8 scalar; field 16 8 scalar; field 24 8 lock }
type B size 24 { field 0 8 lock; field 8 8 scalar; field 16 8 *A }
"""


def random_access_module(rng: random.Random, n_functions: int = 8) -> str:
    """Functions touching fields of A and B under varied lock states, through
    direct addresses, getters and nested pointers, called from a few roots."""
    lines = [ACCESS_TYPES,
             "func get_a(%x: *A) -> *A {\nblock b0:\n  ret %x\n}",
             "func get_b(%x: *B) -> *B {\nblock b0:\n  ret %x\n}"]
    fields = [("A", 8), ("A", 16), ("B", 8)]
    names = []
    for i in range(n_functions):
        name = f"w{i}"
        names.append(name)
        body = ["block b0:", "  %la = addr %a : A [0]", "  %la2 = addr %a : A [24]", "  %lb = addr %b : B [0]",
                "  %ap = addr %b : B [16]", "  %a2 = load %ap", "  %l2 = addr %a2 : A [0]"]
        k = 0
        held: list[str] = []
        if rng.random() < 0.6:
            held.append(rng.choice(["%la", "%lb", "%l2"]))
            body.append(f"  acquire {held[0]}")
        for _ in range(rng.randint(1, 10)):
            r = rng.random()
            if r < 0.15:
                lk = rng.choice(["%la", "%la2", "%lb", "%l2"])
                if lk in held:
                    body.append(f"  release {lk}")
                    held.remove(lk)
                else:
                    body.append(f"  acquire {lk}")
                    held.append(lk)
                continue
            k += 1
            ty, off = rng.choice(fields)
            base = "%a" if ty == "A" else "%b"
            if ty == "A" and rng.random() < 0.3:
                base = "%a2"
            if rng.random() < 0.3:
                body.append(f"  %g{k} = call get_{ty.lower()}({base})")
                base = f"%g{k}"
            body.append(f"  %f{k} = addr {base} : {ty} [{off}]")
            if rng.random() < 0.5:
                body.append(f"  store {k}, %f{k}")
            else:
                body.append(f"  %v{k} = load %f{k}")
        for lk in reversed(held):
            body.append(f"  release {lk}")
        body.append("  ret")
        lines.append(f"func {name}(%a: *A, %b: *B) {{\n" + "\n".join(body) + "\n}")
    roots = rng.randint(1, 3)
    for r in range(roots):
        calls = []
        for _ in range(rng.randint(1, 6)):
            callee = rng.choice(names)
            if rng.random() < 0.3:
                calls += ["  %rl = addr %a : A [0]" if "%rl" not in "".join(calls) else "",
                          "  acquire %rl", f"  call {callee}(%a, %b)", "  release %rl"]
            else:
                calls.append(f"  call {callee}(%a, %b)")
        calls = [c for c in calls if c]
        lines.append(f"func root{r}(%a: *A, %b: *B) {{\nblock b0:\n" + "\n".join(calls) + "\n  ret\n}")
    return "\n".join(lines) + "\n"
