from __future__ import annotations

import random

from generators import random_kir_module
from oracles import structurally_equal
from raceweaver.callgraph import build_call_graph, structural_type_id
from raceweaver.kir import parse_module
from raceweaver.program import Program


def _cg(text):
    program = Program(parse_module(text))
    return program, build_call_graph(program)


def _icall_sites(program, cg, fn):
    return [s for s in cg.sites_in(fn) if program.instr(s).opcode == "icall"]


def test_suffixed_duplicate_types_share_an_id():
    m = parse_module("type foo size 16 { field 0 8 lock; field 8 8 *foo }\n"
                     "type foo.123 size 16 { field 0 8 lock; field 8 8 *foo.123 }\n")
    assert structural_type_id(m.types.get("foo"), m.types) == structural_type_id(m.types.get("foo.123"), m.types)


def test_empty_structs_share_an_id():
    m = parse_module("type a size 0 { }\ntype b size 0 { }\n")
    assert structural_type_id(m.types.get("a"), m.types) == structural_type_id(m.types.get("b"), m.types)


def _random_layout(rng, others):
    fields = []
    for _ in range(rng.randint(0, 4)):
        kind = rng.choice(["scalar", "ptr", "lock", "*X", "inline"] if others else ["scalar", "ptr", "lock", "*X"])
        fsize = rng.choice([4, 8])
        elem = kind
        if kind == "inline":
            elem = rng.choice(others)
            fsize = None
        fields.append((elem, fsize))
    return fields


def _layout_text(rng, name, fields, sizes):
    off = 0
    parts = []
    for elem, fsize in fields:
        off += rng.choice([0, 0, 8])
        if fsize is None:
            fsize = sizes[elem]
        parts.append(f"field {off} {fsize} {elem}")
        off += fsize
    sizes[name] = max(off + rng.choice([0, 0, 8]), 8)
    return f"type {name} size {sizes[name]} {{ {'; '.join(parts)} }}"


def test_ids_agree_with_structural_equality_on_500_pairs():
    checked = equal = 0
    for seed in range(500):
        rng = random.Random(seed)
        sizes = {}
        lines = ["type X size 8 { field 0 8 scalar }"]
        sizes["X"] = 8
        base = ["X"]
        for i in range(2):
            name = f"N{i}"
            lines.append(_layout_text(random.Random(seed * 7 + i), name, _random_layout(rng, base), sizes))
            base.append(name)
        spec_a = _random_layout(rng, base)
        # half of the pairs reuse A's field list, often with the same offsets
        spec_b = spec_a if rng.random() < 0.5 else _random_layout(rng, base)
        layout_seed = rng.randrange(10**6)
        lines.append(_layout_text(random.Random(layout_seed), "A", spec_a, sizes))
        other_seed = layout_seed if rng.random() < 0.7 else rng.randrange(10**6)
        lines.append(_layout_text(random.Random(other_seed), "B", spec_b, sizes))
        table = parse_module("\n".join(lines) + "\n").types
        same = structurally_equal("A", "B", table)
        ids_equal = structural_type_id(table.get("A"), table) == structural_type_id(table.get("B"), table)
        assert ids_equal == same, "\n".join(lines)
        checked += 1
        equal += same
    assert checked == 500 and 50 < equal < 450


PHI_MODULE = """\
func f(%x: scalar) {
block b0:
  ret
}
func g(%x: scalar) {
block b0:
  ret
}
func h(%x: scalar) {
block b0:
  ret
}
func user(%c: scalar) {
block b0:
  br %c, b1, b2
block b1:
  br b3
block b2:
  br b3
block b3:
  %fp = phi @f, @g
  icall %fp(%c)
  ret
}
func keep(%s: *fnptr) {
block b0:
  store @h, %s
  ret
}
"""


def test_phi_of_constants_resolves_exactly():
    program, cg = _cg(PHI_MODULE)
    (site,) = _icall_sites(program, cg, "user")
    assert cg.callees(site) == frozenset({"f", "g"})


FIELD_MODULE = """\
type T size 8 { field 0 8 fnptr }
func f(%x: *T) {
block b0:
  ret
}
func h(%x: *T) {
block b0:
  ret
}
func other(%x: scalar, %y: scalar) {
block b0:
  ret
}
func install(%t: *T) {
block b0:
  %s = addr %t : T [0]
  store @f, %s
  ret
}
func install_h(%t: *T) {
block b0:
  %s = addr %t : T [0]
  store @h, %s
  %u = addr %t : T [0]
  store @other, %u
  ret
}
func dispatch(%t: *T) {
block b0:
  %s = addr %t : T [0]
  %fp = load %s
  icall %fp(%t)
  ret
}
"""


def test_field_store_in_another_function_falls_back_to_signature():
    program, cg = _cg(FIELD_MODULE)
    (site,) = _icall_sites(program, cg, "dispatch")
    assert cg.callees(site) == frozenset({"f", "h"})


def test_field_store_in_same_function_is_exact():
    text = FIELD_MODULE.replace("""  %fp = load %s
  icall %fp(%t)""", """  store @h, %s
  %fp = load %s
  icall %fp(%t)""")
    program, cg = _cg(text)
    (site,) = _icall_sites(program, cg, "dispatch")
    assert cg.callees(site) == frozenset({"h"})


CAST_MODULE = """\
type T size 8 { field 0 8 scalar }
func g(%x: *T) {
block b0:
  ret
}
func k(%x: *T) {
block b0:
  ret
}
func direct(%t: *T) {
block b0:
  %c = cast @g to fnptr
  icall %c(%t)
  ret
}
func generic(%t: *T, %fp: fnptr) {
block b0:
  icall %fp(%t)
  ret
}
func take_k(%s: *fnptr) {
block b0:
  store @k, %s
  ret
}
"""


def test_cast_only_call_does_not_make_function_address_taken():
    program, cg = _cg(CAST_MODULE)
    assert "g" not in cg.address_taken
    assert "g" in cg.naive_address_taken
    (gen,) = _icall_sites(program, cg, "generic")
    assert cg.callees(gen) == frozenset({"k"})
    (d,) = _icall_sites(program, cg, "direct")
    assert cg.callees(d) == frozenset({"g"})


def test_removing_the_cast_call_readds_to_naive_set_only():
    text = CAST_MODULE.replace("  %c = cast @g to fnptr\n  icall %c(%t)\n", "  %c = cast @g to fnptr\n  call take_k(%c)\n")
    program, cg = _cg(text)
    assert "g" in cg.address_taken
    (gen,) = _icall_sites(program, cg, "generic")
    assert "g" in cg.callees(gen)


def test_direct_calls_resolve_by_name_and_externals_are_stubs():
    program, cg = _cg("func a() {\nblock b0:\n  call b()\n  call printk(1)\n  ret\n}\n"
                      "func b() {\nblock b0:\n  ret\n}\n")
    s0, s1 = cg.sites_in("a")
    assert cg.callees(s0) == frozenset({"b"})
    assert len(cg.callees(s1)) == 1 and cg.is_external("printk")


def test_random_modules_keep_graph_invariants():
    for seed in range(20):
        text = random_kir_module(random.Random(seed), n_functions=12)
        program, cg = _cg(text)
        for site, targets in cg.edges.items():
            for t in targets:
                if not cg.is_external(t):
                    assert site in cg.callers[t]
            if program.instr(site).opcode == "icall":
                assert targets <= cg.naive_targets[site]
                if site not in cg.exact_sites:
                    assert targets <= cg.address_taken
        for fn, sites in cg.callers.items():
            for s in sites:
                assert fn in cg.edges[s]


def test_call_graph_ignores_function_order():
    text = random_kir_module(random.Random(3), n_functions=15)
    chunks = text.split("\nfunc ")
    head, funcs = chunks[0], chunks[1:]
    rng = random.Random(0)
    rng.shuffle(funcs)
    shuffled = head + "".join("\nfunc " + f for f in funcs)
    assert _cg(text)[1].dump() == _cg(shuffled)[1].dump()
