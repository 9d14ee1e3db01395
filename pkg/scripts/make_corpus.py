"""Generate the shipped corpus: KIR programs plus ``.expect.json`` side-cars.

Run ``python3 scripts/make_corpus.py [outdir]`` (default ``corpus/``).  The
output is deterministic so the shipped files can be checked for drift.
"""

from __future__ import annotations

import argparse
import json
from fractions import Fraction
from pathlib import Path

# (case, locked accesses, unlocked accesses)
CVE_CASES = [
    ("cve-2017-15649", 18, 1),
    ("cve-2017-1000380", 12, 1),
    ("cve-2017-2636", 8, 1),
    ("cve-2016-2544", 5, 1),
    ("cve-2016-8655", 25, 5),
    ("cve-2017-7533", 15, 3),
    ("cve-2017-1000111", 25, 5),
    ("cve-2017-15265", 3, 1),
    ("cve-2016-7911", 13, 7),
    ("cve-2016-9806", 1, 1),
    ("cve-2017-12146", 3, 3),
]

DEFAULT_THRESHOLD = Fraction(1, 6)

ALL_CELLS = (
    "context=on,heuristics=on",
    "context=on,heuristics=off",
    "context=off,heuristics=on",
    "context=off,heuristics=off",
)


def frac(x: Fraction) -> str:
    return f"{x.numerator}/{x.denominator}"


def _accesses(n: int, ptr: str, prefix: str) -> list[str]:
    """``n`` distinct accesses through ``ptr``: a store first, then
    alternating loads and stores so every access is its own instruction."""
    out = []
    for i in range(n):
        if i % 2 == 0:
            out.append(f"  store {i}, {ptr}")
        else:
            out.append(f"  %{prefix}{i} = load {ptr}")
    return out


def cve_case(locked: int, unlocked: int) -> tuple[str, dict]:
    lines = [
        "# One object type whose field 8 is guarded by the lock at offset 0.",
        "# Locked accesses go through the object directly; the unlocked ones",
        "# reach it through a lookup helper.",
        "type obj size 16 { field 0 8 lock; field 8 8 scalar }",
        "",
        "func lookup(%x: *obj) -> *obj {",
        "block b0:",
        "  ret %x",
        "}",
        "",
        "func locked_ops(%s: *obj) {",
        "block b0:",
        "  %l = addr %s : obj [0]",
        "  acquire %l",
        "  %f = addr %s : obj [8]",
        *_accesses(locked, "%f", "v"),
        "  release %l",
        "  ret",
        "}",
        "",
        "func racy_ops(%s: *obj) {",
        "block b0:",
        "  %t = call lookup(%s)",
        "  %f = addr %t : obj [8]",
        *_accesses(unlocked, "%f", "u"),
        "  ret",
        "}",
        "",
        "func entry(%s: *obj) {",
        "block b0:",
        "  call locked_ops(%s)",
        "  call racy_ops(%s)",
        "  ret",
        "}",
    ]
    minimal = Fraction(unlocked, locked + unlocked)
    detected = minimal <= DEFAULT_THRESHOLD
    rule = {
        "field": "obj.8", "lock": "obj.0",
        "locked_tally": locked, "unlocked_tally": unlocked,
        "locked_weight": locked, "unlocked_weight": unlocked,
        "min_threshold": frac(minimal),
    }
    cells = {}
    for cell in ALL_CELLS:
        want = {"rules": [rule], "reported": [["obj.8", "obj.0", "racy_ops"]] if detected else []}
        if detected and cell.startswith("context=on"):
            want["context"] = [{"field": "obj.8", "lock": "obj.0", "source": "entry#arg0",
                                "locked_avg": "1", "unlocked_avg": "2", "verdict": "report"}]
        cells[cell] = want
    return "\n".join(lines) + "\n", {"config": {"threshold": frac(DEFAULT_THRESHOLD)}, "cells": cells}


def vfs_context_case() -> tuple[str, dict]:
    text = """\
# Two file system types reached from the first argument of vfs_write.
# ext4: field 2 is written under the lock directly (distance 1) and without
# it through an intermediate source (distance 2).
# btrfs: field 2 is written under the lock at distances 1, 2 and 3 and
# without it at distance 1.
type inode size 8 { field 0 8 scalar }
type ext4 size 24 { field 0 8 lock; field 8 8 scalar; field 16 8 scalar }
type btrfs size 32 { field 0 8 lock; field 8 8 scalar; field 16 8 scalar; field 24 8 scalar }

func ext4_source(%x: *ext4) -> *ext4 {
block b0:
  ret %x
}

func btrfs_source(%x: *btrfs) -> *btrfs {
block b0:
  ret %x
}

func ext4_locked(%i: *inode) {
block b0:
  %e = cast %i to ext4
  %l = addr %e : ext4 [0]
  acquire %l
  %f1 = addr %e : ext4 [8]
  store 1, %f1
  %f2 = addr %e : ext4 [16]
  store 1, %f2
  release %l
  ret
}

func ext4_unlocked(%i: *inode) {
block b0:
  %e = cast %i to ext4
  %s = call ext4_source(%e)
  %f2 = addr %s : ext4 [16]
  store 2, %f2
  ret
}

func btrfs_locked(%i: *inode) {
block b0:
  %b = cast %i to btrfs
  %l = addr %b : btrfs [0]
  acquire %l
  %d1 = addr %b : btrfs [16]
  store 1, %d1
  %s1 = call btrfs_source(%b)
  %d2 = addr %s1 : btrfs [16]
  store 2, %d2
  %s2 = call btrfs_source(%s1)
  %d3 = addr %s2 : btrfs [16]
  store 3, %d3
  release %l
  ret
}

func btrfs_unlocked(%i: *inode) {
block b0:
  %b = cast %i to btrfs
  %d = addr %b : btrfs [16]
  store 4, %d
  ret
}

func vfs_write(%i: *inode) {
block b0:
  call ext4_locked(%i)
  call ext4_unlocked(%i)
  call btrfs_locked(%i)
  call btrfs_unlocked(%i)
  ret
}
"""
    rules = [
        {"field": "ext4.16", "lock": "ext4.0", "locked_tally": 1, "unlocked_tally": 1, "min_threshold": "1/2"},
        {"field": "btrfs.16", "lock": "btrfs.0", "locked_tally": 3, "unlocked_tally": 1, "min_threshold": "1/4"},
    ]
    context = [
        {"field": "ext4.16", "lock": "ext4.0", "source": "vfs_write#arg0",
         "locked_avg": "1", "unlocked_avg": "2", "verdict": "report"},
        {"field": "btrfs.16", "lock": "btrfs.0", "source": "vfs_write#arg0",
         "locked_avg": "2", "unlocked_avg": "1", "verdict": "suppress"},
    ]
    on = [["ext4.16", "ext4.0", "ext4_unlocked"]]
    off = on + [["btrfs.16", "btrfs.0", "btrfs_unlocked"]]
    cells = {}
    for cell in ALL_CELLS:
        if cell.startswith("context=on"):
            cells[cell] = {"rules": rules, "reported": on, "context": context}
        else:
            cells[cell] = {"rules": rules, "reported": off}
    return text, {"config": {"threshold": "1/2"}, "cells": cells}


def ratio_shift_case() -> tuple[str, dict]:
    locked = "\n".join(_accesses(8, "%c", "v"))
    text = f"""\
# Eight locked accesses and one racy access to dev.count, plus one more
# unlocked access inside an initialiser that also sets up the lock.
type dev size 16 {{ field 0 8 lock; field 8 8 scalar }}

func lookup(%x: *dev) -> *dev {{
block b0:
  ret %x
}}

func dev_init(%d: *dev) {{
block b0:
  %l = addr %d : dev [0]
  store 0, %l
  %c = addr %d : dev [8]
  store 0, %c
  ret
}}

func dev_update(%d: *dev) {{
block b0:
  %l = addr %d : dev [0]
  acquire %l
  %c = addr %d : dev [8]
{locked}
  release %l
  ret
}}

func dev_peek(%d: *dev) {{
block b0:
  %t = call lookup(%d)
  %c = addr %t : dev [8]
  store 9, %c
  ret
}}

func entry(%d: *dev) {{
block b0:
  call dev_init(%d)
  call dev_update(%d)
  call dev_peek(%d)
  ret
}}
"""
    cells = {}
    for cell in ALL_CELLS:
        if cell.endswith("heuristics=on"):
            cells[cell] = {
                "rules": [{"field": "dev.8", "lock": "dev.0", "locked_tally": 8, "unlocked_tally": 1,
                           "min_threshold": "1/9"}],
                "reported": [["dev.8", "dev.0", "dev_peek"]],
            }
        else:
            cells[cell] = {
                "rules": [{"field": "dev.8", "lock": "dev.0", "locked_tally": 8, "unlocked_tally": 2,
                           "min_threshold": "1/5"}],
                "reported": [],
            }
    return text, {"config": {"threshold": frac(DEFAULT_THRESHOLD)}, "cells": cells}


def safe_fn_case() -> tuple[str, dict]:
    checks = []
    for i in range(16):
        checks.append(f"  %r{i} = call flag_test(%f)")
    checks_text = "\n".join(checks)
    text = f"""\
# A flags field written twice under the lock and tested sixteen times
# through a helper that is never called with the lock held.
type sk size 16 {{ field 0 8 lock; field 8 8 scalar }}

func lookup(%x: *sk) -> *sk {{
block b0:
  ret %x
}}

func flag_test(%p: ptr) -> scalar {{
block b0:
  %v = load %p
  ret %v
}}

func sk_set(%s: *sk) {{
block b0:
  %l = addr %s : sk [0]
  acquire %l
  %f = addr %s : sk [8]
  store 1, %f
  store 2, %f
  release %l
  ret
}}

func sk_check(%s: *sk) {{
block b0:
  %t = call lookup(%s)
  %f = addr %t : sk [8]
{checks_text}
  ret
}}

func entry(%s: *sk) {{
block b0:
  call sk_set(%s)
  call sk_check(%s)
  ret
}}
"""
    rule = {"field": "sk.8", "lock": "sk.0", "locked_tally": 2, "unlocked_tally": 16, "min_threshold": "8/9"}
    cells = {}
    for cell in ALL_CELLS:
        reported = [] if cell.endswith("heuristics=on") else [["sk.8", "sk.0", "sk_check"]]
        cells[cell] = {"rules": [rule], "reported": reported}
    return text, {"config": {"threshold": "1"}, "cells": cells}


def rwlock_case() -> tuple[str, dict]:
    text = """\
# A field written under the reader side of a reader-writer lock.
type tipc size 16 { field 0 8 lock; field 8 8 scalar }

func tipc_update(%t: *tipc) {
block b0:
  %l = addr %t : tipc [0]
  acquire_write %l
  %f = addr %t : tipc [8]
  store 1, %f
  %v = load %f
  release_write %l
  ret
}

func tipc_lookup(%t: *tipc) {
block b0:
  %l = addr %t : tipc [0]
  acquire_read %l
  %f = addr %t : tipc [8]
  %v = load %f
  store 2, %f
  release_read %l
  ret
}

func entry(%t: *tipc) {
block b0:
  call tipc_update(%t)
  call tipc_lookup(%t)
  ret
}
"""
    rule = {"field": "tipc.8", "lock": "tipc.0", "locked_tally": 4, "unlocked_tally": 0}
    cells = {cell: {"rules": [rule], "reported": [], "rw_violations": 1} for cell in ALL_CELLS}
    return text, {"config": {"threshold": frac(DEFAULT_THRESHOLD)}, "cells": cells}


def lockdep_case() -> tuple[str, dict]:
    text = """\
# A helper asserting that the lock is held, called by one caller that
# holds it and by one that does not.
type m size 16 { field 0 8 lock; field 8 8 scalar }

func must_hold(%s: *m) {
block b0:
  %l = addr %s : m [0]
  assert_held %l
  ret
}

func good_caller(%s: *m) {
block b0:
  %l = addr %s : m [0]
  acquire %l
  call must_hold(%s)
  release %l
  ret
}

func bad_caller(%s: *m) {
block b0:
  call must_hold(%s)
  ret
}
"""
    cells = {cell: {"reported": [], "assertion_violations": 1} for cell in ALL_CELLS}
    return text, {"config": {"threshold": frac(DEFAULT_THRESHOLD)}, "cells": cells}


def all_cases() -> dict[str, tuple[str, dict]]:
    cases = {name: cve_case(locked, unlocked) for name, locked, unlocked in CVE_CASES}
    cases["vfs-context"] = vfs_context_case()
    cases["ratio-shift"] = ratio_shift_case()
    cases["cve-2016-10200"] = safe_fn_case()
    cases["tipc-rwlock"] = rwlock_case()
    cases["lockdep-two-callers"] = lockdep_case()
    return cases


def write_corpus(outdir: Path) -> list[Path]:
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (kir, expect) in sorted(all_cases().items()):
        kir_path = outdir / f"{name}.kir"
        kir_path.write_text(kir)
        (outdir / f"{name}.expect.json").write_text(json.dumps(expect, indent=2) + "\n")
        written.append(kir_path)
    return written


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("outdir", nargs="?", default=str(Path(__file__).resolve().parent.parent / "corpus"))
    args = ap.parse_args()
    for p in write_corpus(Path(args.outdir)):
        print(p)


if __name__ == "__main__":
    main()
