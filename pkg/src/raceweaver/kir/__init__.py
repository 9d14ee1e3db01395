"""KIR: a small line-oriented mid-level IR with explicit struct layouts."""

from raceweaver.kir.cfg import EXIT, Cfg, build_cfg, compute_postdominators
from raceweaver.kir.model import (
    Block,
    FieldDecl,
    Function,
    Global,
    Instr,
    InstrRef,
    KirError,
    KirSemanticError,
    KirSyntaxError,
    Module,
    Param,
    StructLayout,
    TypeTable,
    is_constant,
    is_local,
    is_symbol,
)
from raceweaver.kir.parser import parse_module
from raceweaver.kir.printer import format_instr, print_module

__all__ = [
    "EXIT",
    "Block",
    "Cfg",
    "FieldDecl",
    "Function",
    "Global",
    "Instr",
    "InstrRef",
    "KirError",
    "KirSemanticError",
    "KirSyntaxError",
    "Module",
    "Param",
    "StructLayout",
    "TypeTable",
    "build_cfg",
    "compute_postdominators",
    "format_instr",
    "is_constant",
    "is_local",
    "is_symbol",
    "parse_module",
    "print_module",
]
