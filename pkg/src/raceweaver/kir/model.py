"""In-memory representation of KIR modules.

Operands are kept as plain strings: ``%name`` for local values, ``@name``
for globals and function references, decimal integers, and ``null``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

SCALAR_KINDS = frozenset({"scalar", "ptr", "fnptr", "lock"})
LOCK_OPS = frozenset({"acquire", "release"})
LOCK_MODES = ("exclusive", "read", "write")
CMP_PREDICATES = frozenset({"eq", "ne", "lt", "le", "gt", "ge"})


class KirError(Exception):
    """Base class for every error raised while reading KIR."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        where = f"{line}:{col}: " if line else ""
        super().__init__(f"{where}{message}")


class KirSyntaxError(KirError):
    pass


class KirSemanticError(KirError):
    pass


def is_local(op: str) -> bool:
    return op.startswith("%")


def is_symbol(op: str) -> bool:
    return op.startswith("@")


def is_constant(op: str) -> bool:
    return op == "null" or op.lstrip("-").isdigit()


@dataclass(frozen=True)
class FieldDecl:
    offset: int
    size: int
    elem: str
    is_lock: bool = False

    @property
    def end(self) -> int:
        return self.offset + self.size

    @property
    def inline_type(self) -> str | None:
        """Type id of an inline nested aggregate, if this field is one."""
        if self.elem in SCALAR_KINDS or self.elem.startswith("*"):
            return None
        return self.elem


@dataclass(frozen=True)
class StructLayout:
    type_id: str
    fields: tuple[FieldDecl, ...]
    total_size: int
    is_lock_type: bool = False

    def field_at(self, offset: int) -> FieldDecl | None:
        for f in self.fields:
            if f.offset == offset:
                return f
        return None

    def field_containing(self, offset: int) -> FieldDecl | None:
        for f in self.fields:
            if f.offset <= offset < f.end:
                return f
        return None


@dataclass
class TypeTable:
    structs: dict[str, StructLayout] = field(default_factory=dict)
    lock_types: frozenset[str] = frozenset()

    def __contains__(self, type_id: str) -> bool:
        return type_id in self.structs

    def get(self, type_id: str) -> StructLayout | None:
        return self.structs.get(type_id)

    def is_lock_elem(self, elem: str) -> bool:
        return elem == "lock" or elem in self.lock_types

    def lock_ranges(self, type_id: str, base: int = 0) -> list[tuple[int, int]]:
        """Byte ranges ``[start, end)`` occupied by locks inside ``type_id``,
        including locks of inline nested aggregates."""
        layout = self.structs.get(type_id)
        if layout is None:
            return []
        out: list[tuple[int, int]] = []
        for f in layout.fields:
            if f.is_lock:
                out.append((base + f.offset, base + f.end))
            elif f.inline_type is not None:
                out.extend(self.lock_ranges(f.inline_type, base + f.offset))
        return out


@dataclass(frozen=True)
class Instr:
    opcode: str
    result: str | None = None
    operands: tuple[str, ...] = ()
    callee: str | None = None
    type_id: str | None = None
    path: tuple[tuple[str, int], ...] = ()
    targets: tuple[str, ...] = ()
    pred: str | None = None
    mode: str | None = None
    atomic: bool = False
    annot: str | None = None
    marker: str | None = None
    line: int = field(default=0, compare=False)

    @property
    def value_operands(self) -> tuple[str, ...]:
        return tuple(op for op in self.operands if is_local(op) or is_symbol(op))

    @property
    def is_call(self) -> bool:
        return self.opcode in ("call", "icall")

    @property
    def call_args(self) -> tuple[str, ...]:
        if self.opcode == "icall":
            return self.operands[1:]
        if self.opcode == "call":
            return self.operands
        return ()

    @property
    def is_byte_path(self) -> bool:
        return any(kind == "byte" for kind, _ in self.path)


@dataclass(frozen=True)
class Block:
    label: str
    instrs: tuple[Instr, ...]

    @property
    def terminator(self) -> Instr | None:
        if self.instrs and self.instrs[-1].opcode in ("br", "ret"):
            return self.instrs[-1]
        return None

    @property
    def successors(self) -> tuple[str, ...]:
        term = self.terminator
        if term is None or term.opcode == "ret":
            return ()
        return term.targets


@dataclass(frozen=True)
class Param:
    name: str
    elem: str


@dataclass
class Function:
    name: str
    params: tuple[Param, ...]
    blocks: tuple[Block, ...]
    ret: str | None = None
    is_address_taken: bool = False
    line: int = field(default=0, compare=False)

    @property
    def entry(self) -> str:
        return self.blocks[0].label

    def block(self, label: str) -> Block:
        for b in self.blocks:
            if b.label == label:
                return b
        raise KeyError(label)

    def param_index(self, value: str) -> int | None:
        for i, p in enumerate(self.params):
            if p.name == value:
                return i
        return None

    def instructions(self) -> Iterator[tuple[str, int, Instr]]:
        for b in self.blocks:
            for i, ins in enumerate(b.instrs):
                yield b.label, i, ins


@dataclass(frozen=True)
class Global:
    name: str
    elem: str


@dataclass
class Module:
    types: TypeTable = field(default_factory=TypeTable)
    globals: dict[str, Global] = field(default_factory=dict)
    functions: dict[str, Function] = field(default_factory=dict)

    def function(self, name: str) -> Function | None:
        return self.functions.get(name)


@dataclass(frozen=True, order=True)
class InstrRef:
    """Stable location of an instruction: function, block label, index."""

    function: str
    block: str
    index: int

    def __str__(self) -> str:
        return f"{self.function}:{self.block}:{self.index}"
