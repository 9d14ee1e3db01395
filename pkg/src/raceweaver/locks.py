"""Lock identification, wrapper discovery and definite lock coverage.

Every function gets a summary describing its effect on the set of held
locks.  A summary maps each lock element to one of three statuses: always
held on return (``GEN``), never held on return (``KILL``), or unchanged
(``PASS``).  Elements not mentioned explicitly default to ``KILL`` when a
lock with the same terminal field was released on some path
(``killed_keys``), and to ``PASS`` otherwise.  Meet is the
element-wise minimum (``KILL < PASS < GEN``), which keeps path intersection
exact.

Locks reached through a parameter are kept symbolic inside the summary and
rebound to the caller's argument at each call site, which is how wrapper
functions are discovered.  Summaries are recomputed in rounds, each round
reading the previous round's summaries, so a two-level wrapper appears one
round after the wrapper it calls.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from raceweaver.fields import FieldExtractor, Step
from raceweaver.kir import InstrRef, is_local, is_symbol
from raceweaver.kir.model import LOCK_MODES

log = logging.getLogger(__name__)

MAX_LOCK_CHAIN = 8
KILL, PASS, GEN = 0, 1, 2


class LockConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class LockRef:
    """A lock named by a field chain ending in a lock field, or a global."""

    chain: tuple[Step, ...] = ()
    global_name: str | None = None

    def __str__(self) -> str:
        if self.global_name is not None:
            return "@" + self.global_name
        return "→".join(str(s) for s in self.chain)

    @property
    def key(self):
        return ("@", self.global_name) if self.global_name is not None else self.chain[-1]

    @property
    def type_ids(self) -> frozenset[str]:
        return frozenset(s.type_id for s in self.chain)

    def suffixes(self) -> list["LockRef"]:
        if self.global_name is not None:
            return [self]
        return [LockRef(self.chain[i:]) for i in range(len(self.chain))]

    def implies(self, other: "LockRef") -> bool:
        if self.global_name is not None or other.global_name is not None:
            return self == other
        return self.chain[-len(other.chain):] == other.chain


@dataclass(frozen=True, order=True)
class SymLock:
    """A lock reached from parameter ``param`` of ``function`` through ``chain``."""

    function: str
    param: int
    chain: tuple[Step, ...] = ()

    @property
    def key(self):
        return self.chain[-1] if self.chain else ("param", self.function, self.param)

    def __str__(self) -> str:
        return f"{self.function}#arg{self.param}" + "".join("→" + str(s) for s in self.chain)


def closure(ref, mode: str) -> frozenset:
    """The element plus every element it implies."""
    out = {(ref, mode)}
    out.update((LockRef(ref.chain[i:]), mode) for i in range(len(ref.chain)))
    return frozenset(out)


def element_key(e):
    return e[0].key


# -- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class LockPrimitive:
    name: str
    mode: str = "exclusive"
    arg: int = 0


@dataclass(frozen=True)
class LockConfig:
    acquire: tuple[LockPrimitive, ...] = (
        LockPrimitive("acquire"), LockPrimitive("acquire_read", "read"), LockPrimitive("acquire_write", "write"),
    )
    release: tuple[LockPrimitive, ...] = (
        LockPrimitive("release"), LockPrimitive("release_read", "read"), LockPrimitive("release_write", "write"),
    )
    asserts: frozenset[str] = frozenset({"assert_held"})

    def __post_init__(self):
        clash = {p.name for p in self.acquire} & {p.name for p in self.release}
        if clash:
            raise LockConfigError(f"functions listed as both acquire and release: {sorted(clash)}")
        for p in self.acquire + self.release:
            if p.mode not in LOCK_MODES:
                raise LockConfigError(f"unknown lock mode {p.mode!r} for {p.name!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "LockConfig":
        if not isinstance(data, dict):
            raise LockConfigError("lock config must be a JSON object")
        default = cls()

        def prims(key, fallback):
            if key not in data:
                return fallback
            try:
                return tuple(
                    LockPrimitive(str(d["name"]), str(d.get("mode", "exclusive")), int(d.get("arg", 0)))
                    for d in data[key]
                )
            except (TypeError, KeyError, ValueError) as exc:
                raise LockConfigError(f"malformed {key!r} entry: {exc}") from None

        asserts = data.get("asserts", sorted(default.asserts))
        if not isinstance(asserts, list):
            raise LockConfigError("'asserts' must be a list of names")
        return cls(prims("acquire", default.acquire), prims("release", default.release), frozenset(map(str, asserts)))

    @classmethod
    def load(cls, path: str | Path) -> "LockConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise LockConfigError(f"cannot read lock config {path}: {exc}") from None
        return cls.from_dict(data)

    def primitive(self, name: str) -> tuple[str, LockPrimitive] | None:
        for p in self.acquire:
            if p.name == name:
                return "acquire", p
        for p in self.release:
            if p.name == name:
                return "release", p
        return None


# -- transfer functions -------------------------------------------------------------

@dataclass(frozen=True)
class Transfer:
    killed_keys: frozenset = frozenset()
    explicit: frozenset = frozenset()  # (element, status) pairs, one per element
    released: frozenset = frozenset()  # parameter locks released on every path

    @property
    def table(self) -> dict:
        return dict(self.explicit)

    def default(self, e) -> int:
        return KILL if element_key(e) in self.killed_keys else PASS

    def status(self, e, table=None) -> int:
        table = self.table if table is None else table
        return table.get(e, self.default(e))

    @classmethod
    def make(cls, killed_keys, table: dict, released=frozenset()) -> "Transfer":
        kk = frozenset(killed_keys)
        probe = cls(kk)
        kept = frozenset((e, s) for e, s in table.items() if s != probe.default(e))
        return cls(kk, kept, frozenset(released))

    def gens(self) -> frozenset:
        return frozenset(e for e, s in self.explicit if s == GEN)

    def then(self, nxt: "Transfer") -> "Transfer":
        a, b = self.table, nxt.table
        table = {}
        for e in set(a) | set(b):
            s = nxt.status(e, b)
            table[e] = self.status(e, a) if s == PASS else s
        regen = {e[0] for e in nxt.gens() if isinstance(e[0], SymLock)}
        own = {e[0] for e in self.gens() if isinstance(e[0], SymLock)}
        released = (self.released - regen) | (nxt.released - own)
        return Transfer.make(self.killed_keys | nxt.killed_keys, table, released)

    def meet(self, other: "Transfer") -> "Transfer":
        a, b = self.table, other.table
        table = {e: min(self.status(e, a), other.status(e, b)) for e in set(a) | set(b)}
        return Transfer.make(self.killed_keys | other.killed_keys, table, self.released & other.released)

    def apply(self, held) -> frozenset:
        table = self.table
        out = {e for e in held if self.status(e, table) != KILL}
        out.update(e for e, s in table.items() if s == GEN)
        return frozenset(out)


IDENTITY = Transfer()


def meet_all(transfers):
    out = None
    for t in transfers:
        out = t if out is None else out.meet(t)
    return out


def concrete(held) -> frozenset:
    return frozenset(e for e in held if isinstance(e[0], LockRef))


# -- lock operand resolution ----------------------------------------------------

@dataclass(frozen=True, order=True)
class Binding:
    """What a pointer denotes: a chain below a root.

    ``root`` is ``("param", function, index)`` when the object is only known
    as a parameter of an analysis root, ``None`` for concrete objects.
    """

    root: tuple | None
    chain: tuple[Step, ...]
    global_name: str | None = None

    def extend(self, steps: tuple[Step, ...]) -> "Binding":
        chain = (self.chain + steps)[-MAX_LOCK_CHAIN:]
        return Binding(self.root, chain, self.global_name if not chain else None)


Context = tuple  # tuple[Binding | None, ...], one entry per parameter


@dataclass(frozen=True)
class WrapperRole:
    kind: str  # "acquire" | "release"
    mode: str
    arg_index: int
    chain: tuple[Step, ...] = ()
    round: int = 0

    def __str__(self) -> str:
        return f"{self.kind}({self.mode}) arg{self.arg_index}"


def ctx_key(key: tuple) -> str:
    return repr(key)


class LockAnalysis:
    """Context-sensitive summaries of every function's lock effect.

    A function is analysed once per distinct tuple of argument bindings it
    is called with (its *context*).  Because bindings carry the caller's full
    chain, lock elements are absolute and summaries compose without
    rebinding.  Every function is also analysed in its *generic* context,
    where each pointer parameter is an opaque root; wrapper roles are read
    off those summaries.
    """

    MAX_CONTEXTS = 256

    def __init__(self, program, cg, config: LockConfig | None = None, extractor: FieldExtractor | None = None,
                 workers: int = 1, max_rounds: int | None = None):
        self.program = program
        self.cg = cg
        self.config = config or LockConfig()
        self.extractor = extractor or FieldExtractor(program)
        self.workers = max(1, workers)
        self.max_rounds = max_rounds or 2 * len(program.index) + 8
        self.diagnostics: list[str] = []
        self.unresolved: list[InstrRef] = []
        self.roles: dict[str, list[WrapperRole]] = {}
        self.summaries: dict[tuple[str, Context], Transfer] = {}
        self.call_contexts: dict[tuple[str, Context], dict[InstrRef, tuple]] = {}
        self.rounds = 0
        self._lock_sites: dict[InstrRef, tuple[str, str, str]] = {}
        self.generic: dict[str, Context] = {}
        for name, fi in program.index.items():
            self.generic[name] = tuple(
                Binding(("param", name, i), ()) if not p.elem or p.elem[0] == "*" or p.elem == "ptr" else None
                for i, p in enumerate(fi.fn.params)
            )
        self._prepare()

    # operand resolution ------------------------------------------------------
    def bindings(self, fi, ctx: Context, v: str) -> list[Binding] | None:
        """Bindings of pointer ``v`` inside ``fi`` analysed under ``ctx``."""
        if is_symbol(v):
            return [Binding(None, (), v[1:])]
        if not is_local(v):
            return None
        out = []
        for steps, root in self.extractor.object_traces(fi, v):
            idx = fi.param_index(root) if root else None
            if idx is not None:
                base = ctx[idx] if idx < len(ctx) else None
                if base is None:
                    return None
                out.append(base.extend(steps))
            elif root and is_symbol(root):
                out.append(Binding(None, steps[-MAX_LOCK_CHAIN:], None if steps else root[1:]))
            else:
                out.append(Binding(None, steps[-MAX_LOCK_CHAIN:]))
        return sorted(set(out)) or None

    def _element_ref(self, b: Binding):
        if b.chain:
            if not self.extractor.is_lock_chain(b.chain):
                return None
            if b.root is not None:
                return SymLock(b.root[1], b.root[2], b.chain)
            return LockRef(b.chain)
        if b.root is not None:
            return SymLock(b.root[1], b.root[2], ())
        if b.global_name is not None:
            g = self.program.module.globals.get(b.global_name)
            if g is not None and self.program.types.is_lock_elem(g.elem):
                return LockRef(global_name=b.global_name)
        return None

    def lock_candidates(self, fi, ctx: Context, v: str) -> list | None:
        """Locks operand ``v`` may denote; ``None`` when any reading fails."""
        bs = self.bindings(fi, ctx, v)
        if bs is None:
            return None
        out = []
        for b in bs:
            ref = self._element_ref(b)
            if ref is None:
                return None
            out.append(ref)
        return sorted(set(out), key=repr)

    def _prepare(self) -> None:
        for fi in self.program.functions():
            for ref, ins in fi.instrs:
                site = None
                if ins.opcode in ("acquire", "release"):
                    site = (ins.opcode, ins.mode or "exclusive", ins.operands[0])
                elif ins.opcode == "assert_held":
                    site = ("assert", "exclusive", ins.operands[0])
                elif ins.opcode == "call":
                    prim = self.config.primitive(ins.callee)
                    if prim is not None and prim[1].arg < len(ins.operands):
                        site = (prim[0], prim[1].mode, ins.operands[prim[1].arg])
                    elif ins.callee in self.config.asserts and ins.operands:
                        site = ("assert", "exclusive", ins.operands[0])
                if site is None:
                    continue
                if self.lock_candidates(fi, self.generic[fi.name], site[2]) is None:
                    self.unresolved.append(ref)
                    self.diagnostics.append(f"{ref}: unresolved lock operand {site[2]}")
                self._lock_sites[ref] = site

    def lock_site(self, ref: InstrRef):
        return self._lock_sites.get(ref)

    def assertion_sites(self) -> list[tuple[InstrRef, str]]:
        return sorted((r, s[2]) for r, s in self._lock_sites.items() if s[0] == "assert")

    def callee_context(self, fi, ctx: Context, callee: str, args) -> Context:
        params = self.program.index[callee].fn.params
        out = []
        for i in range(len(params)):
            bs = self.bindings(fi, ctx, args[i]) if i < len(args) else None
            out.append(bs[0] if bs is not None and len(bs) == 1 else None)
        return tuple(out)

    # transfer construction ---------------------------------------------------
    @staticmethod
    def _acquire(cands, mode: str) -> Transfer:
        if not cands:
            return IDENTITY
        gens = frozenset.intersection(*(closure(c, mode) for c in cands))
        return Transfer.make((), {e: GEN for e in gens})

    @staticmethod
    def _release(cands) -> Transfer:
        if not cands:
            return IDENTITY
        released = {c for c in cands if isinstance(c, SymLock)} if len(cands) == 1 else set()
        return Transfer.make({c.key for c in cands}, {}, released)

    def instr_transfer(self, fi, ctx: Context, ref: InstrRef, ins, summaries, calls: dict) -> Transfer:
        site = self._lock_sites.get(ref)
        if site is not None and site[0] in ("acquire", "release"):
            cands = self.lock_candidates(fi, ctx, site[2])
            return self._acquire(cands, site[1]) if site[0] == "acquire" else self._release(cands)
        if not ins.is_call:
            return IDENTITY
        parts = []
        targets = []
        for t in sorted(self.cg.callees(ref)):
            if t in self.program.index:
                cctx = self.callee_context(fi, ctx, t, ins.call_args)
                targets.append((t, cctx))
                parts.append(summaries.get((t, cctx), IDENTITY))
            else:
                parts.append(IDENTITY)
        calls[ref] = tuple(targets)
        return meet_all(parts) or IDENTITY

    # intra-procedural pass ---------------------------------------------------
    def function_transfers(self, fi, ctx: Context, summaries):
        """Per-instruction transfer from entry, the exit summary (or None when
        no return is reachable) and the contexts of every call site."""
        cfg = fi.cfg
        blocks = {b.label: b for b in fi.fn.blocks}
        calls: dict[InstrRef, tuple] = {}
        instr_t = {}
        for label in cfg.reachable:
            for i, ins in enumerate(blocks[label].instrs):
                r = InstrRef(fi.name, label, i)
                instr_t[r] = self.instr_transfer(fi, ctx, r, ins, summaries, calls)
        out_t: dict[str, Transfer | None] = {lb: None for lb in cfg.blocks}
        in_t: dict[str, Transfer | None] = {lb: None for lb in cfg.blocks}
        order = [lb for lb in cfg.blocks if lb in cfg.reachable]
        changed = True
        while changed:
            changed = False
            for lb in order:
                preds_in = [out_t[p] for p in cfg.pred[lb] if out_t[p] is not None]
                if lb == cfg.entry:
                    preds_in.append(IDENTITY)
                cur = meet_all(preds_in)
                if cur is None:
                    continue
                in_t[lb] = cur
                for i in range(len(blocks[lb].instrs)):
                    cur = cur.then(instr_t[InstrRef(fi.name, lb, i)])
                if cur != out_t[lb]:
                    out_t[lb] = cur
                    changed = True
        per_instr = {}
        for lb in order:
            cur = in_t[lb]
            for i in range(len(blocks[lb].instrs)):
                r = InstrRef(fi.name, lb, i)
                per_instr[r] = cur
                cur = cur.then(instr_t[r])
        rets = [per_instr[r] for r, ins in fi.instrs if ins.opcode == "ret" and r in per_instr]
        return per_instr, meet_all(rets), calls

    def _analyse(self, keys, summaries):
        def one(key):
            name, ctx = key
            _, summary, calls = self.function_transfers(self.program.index[name], ctx, summaries)
            return summary if summary is not None else IDENTITY, calls

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(one, keys))

    def solve_summaries(self) -> dict[tuple[str, Context], Transfer]:
        summaries: dict[tuple[str, Context], Transfer] = {
            (name, self.generic[name]): IDENTITY for name in self.program.index
        }
        first_seen: dict[tuple, int] = {}
        per_fn: dict[str, int] = {}
        for rnd in range(1, self.max_rounds + 1):
            nxt: dict = {}
            pending = sorted(summaries, key=ctx_key)
            while pending:
                results = self._analyse(pending, summaries)
                fresh = []
                for key, (summary, calls) in zip(pending, results):
                    nxt[key] = summary
                    self.call_contexts[key] = calls
                    for targets in calls.values():
                        for t in targets:
                            if t in nxt or t in summaries or t in fresh:
                                continue
                            if per_fn.get(t[0], 0) >= self.MAX_CONTEXTS:
                                continue
                            per_fn[t[0]] = per_fn.get(t[0], 0) + 1
                            fresh.append(t)
                pending = sorted(fresh, key=ctx_key)
            for name in self.program.index:
                for role in self._roles_of(name, nxt[(name, self.generic[name])]):
                    first_seen.setdefault((name, role), rnd)
            self.rounds = rnd
            if nxt == summaries:
                break
            summaries = nxt
        else:
            self.diagnostics.append(f"lock summaries did not stabilise after {self.max_rounds} rounds")
        if any(n >= self.MAX_CONTEXTS for n in per_fn.values()):
            self.diagnostics.append("context limit reached; some call sites use identity effects")
        for name, fi in self.program.index.items():
            if not ret_reachable(fi):
                self.diagnostics.append(f"{name}: no reachable return; call effects ignored")
        self.summaries = self._break_cycles(summaries)
        self.roles = {}
        for name in sorted(self.program.index):
            s = self.summaries[(name, self.generic[name])]
            roles = [WrapperRole(k, m, p, c, first_seen.get((name, (k, m, p, c)), 0))
                     for k, m, p, c in sorted(self._roles_of(name, s))]
            if roles:
                self.roles[name] = roles
        return self.summaries

    @staticmethod
    def _roles_of(name: str, s: Transfer) -> set[tuple]:
        roles = set()
        for (ref, mode), st in s.explicit:
            if st == GEN and isinstance(ref, SymLock) and ref.function == name:
                roles.add(("acquire", mode, ref.param, ref.chain))
        for ref in s.released:
            if ref.function == name:
                roles.add(("release", "exclusive", ref.param, ref.chain))
        return roles

    def _break_cycles(self, summaries):
        cyclic = recursive_functions(self.program, self.cg)
        out = dict(summaries)
        for name in sorted(cyclic):
            key = (name, self.generic[name])
            s = summaries[key]
            if not self._roles_of(name, s):
                continue
            self.diagnostics.append(f"{name}: wrapper role depends on a recursive call cycle; ignored")
            for k in [k for k in summaries if k[0] == name]:
                t = summaries[k]
                table = {e: st for e, st in t.explicit if not isinstance(e[0], SymLock)}
                out[k] = Transfer.make(t.killed_keys, table)
        return out


def ret_reachable(fi) -> bool:
    return any(ins.opcode == "ret" and r.block in fi.cfg.reachable for r, ins in fi.instrs)


def recursive_functions(program, cg) -> set[str]:
    """Functions on a call-graph cycle (including self recursion)."""
    succ: dict[str, set[str]] = {n: set() for n in program.index}
    for site, targets in cg.edges.items():
        succ[site.function].update(t for t in targets if t in succ)
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    out: set[str] = set()
    counter = [0]

    def strong(v: str) -> None:
        # iterative Tarjan to avoid recursion limits on long call chains
        work = [(v, iter(sorted(succ[v])))]
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        while work:
            node, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(succ[w]))))
                    advanced = True
                    break
                if w in on_stack:
                    low[node] = min(low[node], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                if len(comp) > 1 or node in succ[node]:
                    out.update(comp)

    for v in sorted(succ):
        if v not in index:
            strong(v)
    return out


# -- public operations --------------------------------------------------------------

@dataclass
class WrapperInfo:
    roles: dict[str, list[WrapperRole]]
    analysis: LockAnalysis

    def __getitem__(self, name: str) -> list[WrapperRole]:
        return self.roles[name]

    def __contains__(self, name: str) -> bool:
        return name in self.roles


def detect_lock_wrappers(program, cg, config: LockConfig | None = None, workers: int = 1) -> WrapperInfo:
    analysis = LockAnalysis(program, cg, config, workers=workers)
    analysis.solve_summaries()
    return WrapperInfo(analysis.roles, analysis)


@dataclass
class CoverageMap:
    """Definite locksets per instruction (concrete locks only)."""

    held: dict[InstrRef, frozenset] = field(default_factory=dict)
    entry: dict[str, frozenset] = field(default_factory=dict)
    rounds: int = 0
    analysis: LockAnalysis | None = field(default=None, repr=False)
    contexts: dict[tuple, frozenset] = field(default_factory=dict, repr=False)
    context_sites: dict[tuple, list] = field(default_factory=dict, repr=False)
    transfers: dict[tuple, dict] = field(default_factory=dict, repr=False)
    root_contexts: frozenset = frozenset()

    def elements_at(self, ref: InstrRef) -> frozenset:
        return self.held.get(ref, frozenset())

    def locks_at(self, ref: InstrRef) -> frozenset[LockRef]:
        return frozenset(r for r, _ in self.elements_at(ref))

    def modes_at(self, ref: InstrRef, lock: LockRef) -> frozenset[str]:
        return frozenset(m for r, m in self.elements_at(ref) if r == lock)

    def holds(self, ref: InstrRef, lock: LockRef) -> bool:
        return any(r == lock for r, _ in self.elements_at(ref))

    def reachable(self, ref: InstrRef) -> bool:
        return ref in self.held


def compute_lock_coverage(program, cg, wrappers: WrapperInfo | None = None, config: LockConfig | None = None,
                          workers: int = 1) -> CoverageMap:
    if wrappers is None:
        wrappers = detect_lock_wrappers(program, cg, config, workers)
    analysis = wrappers.analysis
    summaries = analysis.summaries

    # contexts reachable from the analysis roots
    roots = [n for n in sorted(program.index) if not cg.call_sites_of(n)]
    live: list[tuple] = []
    seen: set = set()
    per_key: dict[tuple, dict] = {}
    callers_of: dict[tuple, list[tuple[tuple, InstrRef]]] = {}

    def expand(start):
        todo = [start]
        while todo:
            key = todo.pop()
            if key in seen:
                continue
            seen.add(key)
            live.append(key)
            for site, targets in sorted(analysis.call_contexts.get(key, {}).items()):
                for t in targets:
                    if t in summaries:
                        callers_of.setdefault(t, []).append((key, site))
                        todo.append(t)

    for name in roots:
        expand((name, analysis.generic[name]))
    for name in sorted(program.index):
        if not any(k[0] == name for k in seen):
            roots.append(name)
            expand((name, analysis.generic[name]))
    root_keys = {(n, analysis.generic[n]) for n in roots}
    live.sort(key=ctx_key)

    def transfers(key):
        name, ctx = key
        return analysis.function_transfers(program.index[name], ctx, summaries)[0]

    with ThreadPoolExecutor(max_workers=analysis.workers) as pool:
        per_key = dict(zip(live, pool.map(transfers, live)))

    # entry facts: least solution of entry = ⋂ caller locksets, starting from ∅
    entry: dict[tuple, frozenset] = {k: frozenset() for k in live}
    rounds = 0
    limit = len(live) * 64 + 2
    while True:
        rounds += 1
        nxt = {}
        for key in live:
            if key in root_keys:
                nxt[key] = frozenset()
                continue
            facts = [per_key[c][s].apply(entry[c]) for c, s in callers_of.get(key, ()) if s in per_key[c]]
            nxt[key] = frozenset.intersection(*facts) if facts else frozenset()
        if nxt == entry:
            break
        entry = nxt
        if rounds > limit:
            analysis.diagnostics.append("entry-fact iteration hit its round limit")
            break

    held: dict[InstrRef, frozenset] = {}
    fn_entry: dict[str, frozenset] = {}
    for key in live:
        name = key[0]
        e = concrete(entry[key])
        fn_entry[name] = e if name not in fn_entry else fn_entry[name] & e
        for ref, t in per_key[key].items():
            h = concrete(t.apply(entry[key]))
            held[ref] = h if ref not in held else held[ref] & h
    for name in program.index:
        fn_entry.setdefault(name, frozenset())
    return CoverageMap(held, fn_entry, rounds, analysis,
                       contexts={k: entry[k] for k in live},
                       context_sites={k: callers_of.get(k, []) for k in live},
                       transfers=per_key, root_contexts=frozenset(root_keys))
