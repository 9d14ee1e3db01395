"""Per-function control flow graph with dominator and postdominator trees."""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

from raceweaver.kir.model import Function

EXIT = "<exit>"


@dataclass(frozen=True)
class Cfg:
    entry: str
    blocks: tuple[str, ...]
    succ: dict[str, tuple[str, ...]]
    pred: dict[str, tuple[str, ...]]
    reachable: frozenset[str]
    dom: dict[str, frozenset[str]]
    idom: dict[str, str | None]
    pdom: dict[str, frozenset[str]]
    ipdom: dict[str, str | None]

    def dominates(self, a: str, b: str) -> bool:
        return a in self.dom.get(b, ())

    def postdominates(self, a: str, b: str) -> bool:
        """True iff every path from ``b`` to the exit passes through ``a``."""
        return a in self.pdom.get(b, ())

    def dominated_by(self, a: str) -> list[str]:
        return [b for b in self.blocks if self.dominates(a, b)]

    def reachable_from(self, start: str) -> set[str]:
        seen = {start}
        todo = [start]
        while todo:
            for s in self.succ[todo.pop()]:
                if s not in seen:
                    seen.add(s)
                    todo.append(s)
        return seen

    def postdom_tree_nodes(self) -> set[str]:
        return set(self.ipdom) | {EXIT}


def _fixpoint_sets(order, start, edges_in, universe):
    sets = {b: set(universe) for b in order}
    sets[start] = {start}
    changed = True
    while changed:
        changed = False
        for b in order:
            if b == start:
                continue
            ins = [sets[p] for p in edges_in(b)]
            new = {b} | (reduce(set.intersection, ins) if ins else set())
            if new != sets[b]:
                sets[b] = new
                changed = True
    return sets


def _immediate(sets: dict[str, set[str]], node: str) -> str | None:
    strict = sets[node] - {node}
    for cand in strict:
        # the immediate (post)dominator is the strict one dominated by all others
        if all(other in sets[cand] for other in strict):
            return cand
    return None


def build_cfg(fn: Function) -> Cfg:
    labels = tuple(b.label for b in fn.blocks)
    succ = {b.label: tuple(dict.fromkeys(b.successors)) for b in fn.blocks}
    pred: dict[str, list[str]] = {lb: [] for lb in labels}
    for b, ss in succ.items():
        for s in ss:
            pred[s].append(b)

    entry = fn.entry
    reach = {entry}
    todo = [entry]
    while todo:
        for s in succ[todo.pop()]:
            if s not in reach:
                reach.add(s)
                todo.append(s)
    order = [lb for lb in labels if lb in reach]
    dom_sets = _fixpoint_sets(order, entry, lambda b: [p for p in pred[b] if p in reach], order)
    dom = {lb: frozenset(dom_sets.get(lb, {lb})) for lb in labels}
    idom = {lb: (_immediate(dom_sets, lb) if lb in reach else None) for lb in labels}

    # reverse graph rooted at a virtual exit joining all return blocks
    exits = [b.label for b in fn.blocks if b.terminator is not None and b.terminator.opcode == "ret"]
    to_exit = set(exits)
    todo = list(exits)
    while todo:
        for p in pred[todo.pop()]:
            if p not in to_exit:
                to_exit.add(p)
                todo.append(p)
    rorder = [EXIT] + [lb for lb in labels if lb in to_exit]

    def rev_in(b: str) -> list[str]:
        out = [s for s in succ[b] if s in to_exit]
        if b in exits:
            out.append(EXIT)
        return out

    pdom_sets = _fixpoint_sets(rorder, EXIT, rev_in, rorder)
    pdom: dict[str, frozenset[str]] = {}
    ipdom: dict[str, str | None] = {}
    for lb in labels:
        if lb in to_exit:
            pdom[lb] = frozenset(pdom_sets[lb])
            ipdom[lb] = _immediate(pdom_sets, lb)
        else:
            # no path to exit: postdominated only by the virtual exit
            pdom[lb] = frozenset({lb, EXIT})
            ipdom[lb] = EXIT
    return Cfg(entry, labels, succ, {k: tuple(v) for k, v in pred.items()},
               frozenset(reach), dom, idom, pdom, ipdom)


def compute_postdominators(fn: Function) -> Cfg:
    """Build the CFG of ``fn``; its ``pdom``/``ipdom`` maps carry the
    postdominator tree rooted at :data:`EXIT`."""
    return build_cfg(fn)
