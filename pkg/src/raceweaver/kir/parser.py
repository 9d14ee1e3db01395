"""Parser for the textual KIR format (see docs/kir.md)."""

from __future__ import annotations

import re
from dataclasses import dataclass

from raceweaver.kir.model import (
    CMP_PREDICATES,
    SCALAR_KINDS,
    Block,
    FieldDecl,
    Function,
    Global,
    Instr,
    KirError,
    KirSemanticError,
    KirSyntaxError,
    Module,
    Param,
    StructLayout,
    TypeTable,
    is_local,
    is_symbol,
)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<nl>\n)
  | (?P<arrow>->)
  | (?P<local>%[A-Za-z0-9_.$]+)
  | (?P<sym>@[A-Za-z_][A-Za-z0-9_.$]*)
  | (?P<annot>![A-Za-z_]+)
  | (?P<int>-?[0-9]+)
  | (?P<ident>\*?[A-Za-z_][A-Za-z0-9_.$]*)
  | (?P<punct>[{}()\[\],:=;*])
    """,
    re.VERBOSE,
)

_LOCK_OPCODES = {
    "acquire": ("acquire", "exclusive"),
    "acquire_read": ("acquire", "read"),
    "acquire_write": ("acquire", "write"),
    "release": ("release", None),
    "release_read": ("release", None),
    "release_write": ("release", None),
}

_KEYWORDS = {"type", "global", "func", "block", "byte", "null"}


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise KirSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            tokens.append(Token("nl", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token]):
        self.toks = tokens
        self.pos = 0

    # -- token helpers --------------------------------------------------
    def peek(self, skip_nl: bool = False) -> Token:
        if skip_nl:
            self.skip_nl()
        return self.toks[self.pos]

    def next(self) -> Token:
        tok = self.toks[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def skip_nl(self) -> None:
        while self.toks[self.pos].kind == "nl" or self.toks[self.pos].text == ";":
            self.pos += 1

    def error(self, msg: str, tok: Token | None = None) -> KirSyntaxError:
        tok = tok or self.toks[self.pos]
        return KirSyntaxError(msg, tok.line, tok.col)

    def expect(self, text: str) -> Token:
        tok = self.next()
        if tok.text != text:
            raise self.error(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok)
        return tok

    def accept(self, text: str) -> bool:
        if self.toks[self.pos].text == text:
            self.pos += 1
            return True
        return False

    def expect_kind(self, kind: str, what: str) -> Token:
        tok = self.next()
        if tok.kind != kind:
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}", tok)
        return tok

    def expect_int(self, what: str = "integer") -> int:
        return int(self.expect_kind("int", what).text)

    def expect_ident(self, what: str = "identifier") -> Token:
        tok = self.next()
        if tok.kind != "ident" or tok.text.startswith("*"):
            raise self.error(f"expected {what}, found {tok.text or 'end of input'!r}", tok)
        return tok

    def end_of_line(self) -> None:
        tok = self.peek()
        if tok.kind not in ("nl", "eof") and tok.text not in (";", "}"):
            raise self.error(f"unexpected {tok.text!r} at end of instruction", tok)

    # -- grammar ----------------------------------------------------------
    def parse_elem(self) -> str:
        tok = self.next()
        if tok.text == "*":
            inner = self.expect_ident("type name after '*'")
            return "*" + inner.text
        if tok.kind != "ident":
            raise self.error(f"expected element type, found {tok.text or 'end of input'!r}", tok)
        return tok.text

    def parse_module(self) -> tuple[list, list, list]:
        types, globals_, funcs = [], [], []
        while True:
            tok = self.peek(skip_nl=True)
            if tok.kind == "eof":
                return types, globals_, funcs
            if tok.text == "type":
                types.append(self.parse_type())
            elif tok.text == "global":
                globals_.append(self.parse_global())
            elif tok.text == "func":
                funcs.append(self.parse_func())
            else:
                raise self.error(f"expected 'type', 'global' or 'func', found {tok.text!r}", tok)

    def parse_type(self):
        start = self.expect("type")
        name = self.expect_ident("type name")
        self.expect("size")
        size_tok = self.peek()
        size = self.expect_int("type size")
        if size < 0:
            raise KirSemanticError("negative type size", size_tok.line, size_tok.col)
        is_lock = self.accept("lock")
        self.peek(skip_nl=True)
        self.expect("{")
        fields = []
        while True:
            tok = self.peek(skip_nl=True)
            if tok.text == "}":
                self.next()
                break
            ftok = self.expect("field")
            off = self.expect_int("field offset")
            fsize = self.expect_int("field size")
            elem = self.parse_elem()
            if off < 0 or fsize <= 0:
                raise KirSemanticError("ill-formed field offset or size", ftok.line, ftok.col)
            fields.append((off, fsize, elem, ftok))
            nxt = self.peek()
            if nxt.kind not in ("nl",) and nxt.text not in (";", "}"):
                raise self.error(f"unexpected {nxt.text!r} after field", nxt)
        return name, size, is_lock, fields, start

    def parse_global(self):
        start = self.expect("global")
        name = self.expect_ident("global name")
        self.expect(":")
        elem = self.parse_elem()
        self.end_of_line()
        return name.text, elem, start

    def parse_func(self):
        start = self.expect("func")
        name = self.expect_ident("function name")
        self.expect("(")
        params = []
        if not self.accept(")"):
            while True:
                p = self.expect_kind("local", "parameter name")
                self.expect(":")
                params.append(Param(p.text, self.parse_elem()))
                if self.accept(")"):
                    break
                self.expect(",")
        ret = None
        if self.accept("->"):
            ret = self.parse_elem()
        self.peek(skip_nl=True)
        self.expect("{")
        blocks: list[tuple[str, list[Instr], Token]] = []
        while True:
            tok = self.peek(skip_nl=True)
            if tok.text == "}":
                self.next()
                break
            if tok.text == "block":
                self.next()
                label = self.expect_ident("block label")
                self.expect(":")
                blocks.append((label.text, [], label))
                continue
            if not blocks:
                raise self.error("instruction outside of a block", tok)
            blocks[-1][1].append(self.parse_instr())
            self.end_of_line()
        return name, params, ret, blocks, start

    def parse_operand(self) -> str:
        tok = self.next()
        if tok.kind in ("local", "sym", "int"):
            return tok.text
        if tok.text == "null":
            return "null"
        raise self.error(f"expected operand, found {tok.text or 'end of input'!r}", tok)

    def parse_args(self) -> tuple[str, ...]:
        self.expect("(")
        args: list[str] = []
        if self.accept(")"):
            return ()
        while True:
            args.append(self.parse_operand())
            if self.accept(")"):
                return tuple(args)
            self.expect(",")

    def parse_annotations(self) -> str | None:
        annot = None
        while self.peek().kind == "annot":
            tok = self.next()
            if tok.text != "!type":
                raise self.error(f"unknown annotation {tok.text!r}", tok)
            annot = self.expect_ident("type name").text
        return annot

    def parse_instr(self) -> Instr:
        first = self.peek()
        line = first.line
        result = None
        if first.kind == "local":
            result = self.next().text
            self.expect("=")
        tok = self.next()
        op = tok.text
        if tok.kind != "ident":
            raise self.error(f"expected opcode, found {op or 'end of input'!r}", tok)

        def no_result():
            if result is not None:
                raise self.error(f"'{op}' does not produce a value", tok)

        def needs_result():
            if result is None:
                raise self.error(f"'{op}' must assign its result", tok)

        if op == "load":
            needs_result()
            addr = self.parse_operand()
            return Instr("load", result, (addr,), annot=self.parse_annotations(), line=line)
        if op == "store":
            no_result()
            val = self.parse_operand()
            self.expect(",")
            addr = self.parse_operand()
            atomic = self.accept("atomic")
            return Instr("store", None, (val, addr), atomic=atomic,
                         annot=self.parse_annotations(), line=line)
        if op == "addr":
            needs_result()
            base = self.parse_operand()
            self.expect(":")
            type_id = None
            if self.peek().text != "byte":
                type_id = self.expect_ident("type name").text
            path = []
            while True:
                if self.accept("["):
                    path.append(("field", self.expect_int("offset")))
                    self.expect("]")
                elif self.accept("byte"):
                    path.append(("byte", self.expect_int("byte delta")))
                else:
                    break
            if not path:
                raise self.error("address computation needs at least one index")
            return Instr("addr", result, (base,), type_id=type_id, path=tuple(path), line=line)
        if op == "cast":
            needs_result()
            src = self.parse_operand()
            self.expect("to")
            target = self.expect_ident("cast target type").text
            return Instr("cast", result, (src,), type_id=target, line=line)
        if op == "phi":
            needs_result()
            ops = [self.parse_operand()]
            while self.accept(","):
                ops.append(self.parse_operand())
            return Instr("phi", result, tuple(ops), line=line)
        if op == "select":
            needs_result()
            c = self.parse_operand()
            self.expect(",")
            a = self.parse_operand()
            self.expect(",")
            b = self.parse_operand()
            return Instr("select", result, (c, a, b), line=line)
        if op == "cmp":
            needs_result()
            pred = self.expect_ident("comparison predicate")
            if pred.text not in CMP_PREDICATES:
                raise self.error(f"unknown predicate {pred.text!r}", pred)
            a = self.parse_operand()
            self.expect(",")
            b = self.parse_operand()
            return Instr("cmp", result, (a, b), pred=pred.text, line=line)
        if op == "call":
            name = self.expect_ident("callee name").text
            return Instr("call", result, self.parse_args(), callee=name, line=line)
        if op == "icall":
            fp = self.parse_operand()
            return Instr("icall", result, (fp,) + self.parse_args(), line=line)
        if op == "ret":
            no_result()
            if self.peek().kind in ("nl", "eof") or self.peek().text in (";", "}"):
                return Instr("ret", line=line)
            return Instr("ret", None, (self.parse_operand(),), line=line)
        if op == "br":
            no_result()
            nxt = self.peek()
            if nxt.kind == "ident":
                return Instr("br", targets=(self.next().text,), line=line)
            cond = self.parse_operand()
            self.expect(",")
            t1 = self.expect_ident("block label").text
            self.expect(",")
            t2 = self.expect_ident("block label").text
            return Instr("br", None, (cond,), targets=(t1, t2), line=line)
        if op == "alloc":
            needs_result()
            return Instr("alloc", result, (), type_id=self.expect_ident("type name").text, line=line)
        if op == "free":
            no_result()
            return Instr("free", None, (self.parse_operand(),), line=line)
        if op in _LOCK_OPCODES:
            no_result()
            kind, mode = _LOCK_OPCODES[op]
            return Instr(kind, None, (self.parse_operand(),), mode=mode, line=line)
        if op == "assert_held":
            no_result()
            return Instr("assert_held", None, (self.parse_operand(),), line=line)
        if op == "data_race":
            no_result()
            marker = self.expect_ident("marker").text
            return Instr("data_race", marker=marker, line=line)
        raise self.error(f"unknown opcode {op!r}", tok)


def _build_types(raw_types) -> TypeTable:
    names: dict[str, tuple] = {}
    for name_tok, size, is_lock, fields, start in raw_types:
        if name_tok.text in SCALAR_KINDS or name_tok.text in _KEYWORDS:
            raise KirSemanticError(f"reserved type name {name_tok.text!r}", name_tok.line, name_tok.col)
        if name_tok.text in names:
            raise KirSemanticError(f"duplicate type {name_tok.text!r}", name_tok.line, name_tok.col)
        names[name_tok.text] = (size, is_lock, fields, name_tok)
    lock_types = frozenset(n for n, (_, is_lock, _, _) in names.items() if is_lock)
    structs: dict[str, StructLayout] = {}
    for name, (size, is_lock, fields, name_tok) in names.items():
        decls = []
        prev_end = 0
        for off, fsize, elem, ftok in sorted(fields, key=lambda f: f[0]):
            base = elem[1:] if elem.startswith("*") else elem
            if base not in SCALAR_KINDS and base not in names:
                raise KirSemanticError(f"undefined type {base!r}", ftok.line, ftok.col)
            if off < prev_end:
                raise KirSemanticError(f"field at offset {off} overlaps previous field", ftok.line, ftok.col)
            if off + fsize > size:
                raise KirSemanticError(f"field at offset {off} exceeds type size {size}", ftok.line, ftok.col)
            prev_end = off + fsize
            decls.append(FieldDecl(off, fsize, elem, elem == "lock" or elem in lock_types))
        structs[name] = StructLayout(name, tuple(decls), size, is_lock)
    _check_inline_acyclic(structs)
    return TypeTable(structs, lock_types)


def _check_inline_acyclic(structs: dict[str, StructLayout]) -> None:
    state: dict[str, int] = {}

    def visit(name: str) -> None:
        if state.get(name) == 2:
            return
        if state.get(name) == 1:
            raise KirSemanticError(f"type {name!r} contains itself inline")
        state[name] = 1
        for f in structs[name].fields:
            if f.inline_type is not None:
                visit(f.inline_type)
        state[name] = 2

    for name in structs:
        visit(name)


def _check_elem(elem: str, types: TypeTable, tok_line: int) -> None:
    base = elem[1:] if elem.startswith("*") else elem
    if base not in SCALAR_KINDS and base not in types:
        raise KirSemanticError(f"undefined type {base!r}", tok_line)


def _validate_function(fn: Function, types: TypeTable, symbols: set[str], arity: dict[str, int]) -> None:
    from raceweaver.kir.cfg import build_cfg

    labels = [b.label for b in fn.blocks]
    if not labels:
        raise KirSemanticError(f"function {fn.name!r} has no blocks", fn.line)
    if len(set(labels)) != len(labels):
        dup = next(lb for lb in labels if labels.count(lb) > 1)
        raise KirSemanticError(f"duplicate block {dup!r} in {fn.name!r}", fn.line)
    label_set = set(labels)
    for b in fn.blocks:
        if b.terminator is None:
            raise KirSemanticError(f"block {b.label!r} in {fn.name!r} does not end with br or ret", fn.line)
    defs: dict[str, tuple[str, int]] = {}
    for p in fn.params:
        if p.name in defs:
            raise KirSemanticError(f"duplicate parameter {p.name!r}", fn.line)
        _check_elem(p.elem, types, fn.line)
        defs[p.name] = (fn.entry, -1)
    for b in fn.blocks:
        for i, ins in enumerate(b.instrs):
            if ins.opcode in ("br", "ret") and i != len(b.instrs) - 1:
                raise KirSemanticError("terminator must end its block", ins.line)
            for t in ins.targets:
                if t not in label_set:
                    raise KirSemanticError(f"branch to undefined block {t!r}", ins.line)
            if ins.opcode == "call" and ins.callee in arity and arity[ins.callee] != len(ins.operands):
                raise KirSemanticError(f"call to {ins.callee!r} passes {len(ins.operands)} arguments, "
                                       f"expected {arity[ins.callee]}", ins.line)
            for op in ins.operands:
                if is_symbol(op) and op[1:] not in symbols:
                    raise KirSemanticError(f"undefined symbol {op!r}", ins.line)
            if ins.type_id is not None and ins.opcode in ("addr", "alloc") and ins.type_id not in types:
                raise KirSemanticError(f"undefined type {ins.type_id!r}", ins.line)
            if ins.opcode == "cast" and ins.type_id not in SCALAR_KINDS and ins.type_id not in types:
                raise KirSemanticError(f"undefined type {ins.type_id!r}", ins.line)
            if ins.annot is not None and ins.annot not in types:
                raise KirSemanticError(f"undefined type {ins.annot!r}", ins.line)
            if ins.opcode == "addr" and ins.type_id is None and ins.path[0][0] != "byte":
                raise KirSemanticError("typed index needs a base type", ins.line)
            if ins.result is not None:
                if ins.result in defs:
                    raise KirSemanticError(f"value {ins.result!r} defined twice", ins.line)
                defs[ins.result] = (b.label, i)
    cfg = build_cfg(fn)
    for b in fn.blocks:
        for i, ins in enumerate(b.instrs):
            for op in ins.operands:
                if not is_local(op):
                    continue
                if op not in defs:
                    raise KirSemanticError(f"use of undefined value {op!r}", ins.line)
                if ins.opcode == "phi" or b.label not in cfg.reachable:
                    continue
                dblock, didx = defs[op]
                if dblock == b.label:
                    if didx >= i:
                        raise KirSemanticError(f"value {op!r} used before definition", ins.line)
                elif not cfg.dominates(dblock, b.label):
                    raise KirSemanticError(f"definition of {op!r} does not dominate its use", ins.line)


def _address_taken(functions: dict[str, Function]) -> set[str]:
    taken: set[str] = set()
    for fn in functions.values():
        for _, _, ins in fn.instructions():
            for op in ins.operands:
                if is_symbol(op) and op[1:] in functions:
                    taken.add(op[1:])
    return taken


def parse_module(text: str | bytes) -> Module:
    """Parse KIR source into a :class:`Module`.

    Raises :class:`KirError` (with line/column where known) on any malformed
    input; no other exception escapes.
    """
    try:
        if isinstance(text, bytes):
            try:
                text = text.decode("utf-8")
            except UnicodeDecodeError as exc:
                raise KirSyntaxError(f"input is not UTF-8: {exc.reason}") from None
        parser = _Parser(tokenize(text))
        raw_types, raw_globals, raw_funcs = parser.parse_module()
        types = _build_types(raw_types)
        globals_: dict[str, Global] = {}
        for name, elem, tok in raw_globals:
            if name in globals_:
                raise KirSemanticError(f"duplicate global {name!r}", tok.line, tok.col)
            _check_elem(elem, types, tok.line)
            globals_[name] = Global(name, elem)
        functions: dict[str, Function] = {}
        for name_tok, params, ret, blocks, start in raw_funcs:
            if name_tok.text in functions or name_tok.text in globals_:
                raise KirSemanticError(f"duplicate symbol {name_tok.text!r}", name_tok.line, name_tok.col)
            if ret is not None:
                _check_elem(ret, types, name_tok.line)
            functions[name_tok.text] = Function(
                name_tok.text,
                tuple(params),
                tuple(Block(label, tuple(instrs)) for label, instrs, _ in blocks),
                ret,
                line=start.line,
            )
        symbols = set(globals_) | set(functions)
        arity = {name: len(fn.params) for name, fn in functions.items()}
        for fn in functions.values():
            _validate_function(fn, types, symbols, arity)
        for name in _address_taken(functions):
            functions[name].is_address_taken = True
        return Module(types, globals_, functions)
    except KirError:
        raise
    except RecursionError:
        raise KirSyntaxError("input nests too deeply") from None
