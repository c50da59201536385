"""Text assembler for the subset.

Syntax: one statement per line, destination operand first, ``name:`` labels,
``.global name`` and ``.quad value`` directives, ``#`` or ``;`` comments.
Labels starting with ``.`` are local; every other label names a function.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .codec import IsaError, OperandMismatch, encode
from .model import (
    ARITY,
    BRANCH_OPS,
    JCC_OPS,
    MNEMONICS,
    REGISTERS,
    Imm,
    Instruction,
    Mem,
    Operand,
    Reg,
    Sym,
    reg_width,
)


class UnknownMnemonic(IsaError):
    pass


class UndefinedLabel(IsaError):
    pass


class DuplicateLabel(IsaError):
    pass


@dataclass(frozen=True)
class Label:
    name: str


@dataclass(frozen=True)
class Global:
    name: str


@dataclass(frozen=True)
class Quad:
    value: Operand


ABS64 = "Abs64"
REL32 = "Rel32"


@dataclass(frozen=True)
class AsmReloc:
    offset: int
    symbol: str
    kind: str
    addend: int


@dataclass
class AsmResult:
    code: bytes
    labels: dict[str, int]
    globals: list[str]
    relocations: list[AsmReloc]
    externs: list[str]
    # (offset, instruction) for every assembled instruction, in order
    placed: list[tuple[int, Instruction]] = field(default_factory=list)

    def address_of(self, name: str) -> int:
        return self.labels[name]


_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):")
_NAME_RE = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_SIZE_WORDS = re.compile(r"^(qword)(\s+ptr)?\s+", re.IGNORECASE)


def is_local(name: str) -> bool:
    return name.startswith(".")


def _parse_int(text: str) -> int | None:
    text = text.strip()
    try:
        return int(text, 0)
    except ValueError:
        return None


def _parse_mem(text: str, line_no: int) -> Operand:
    inner = text.strip()[1:-1].replace(" ", "")
    if not inner:
        raise OperandMismatch(f"line {line_no}: empty memory operand")
    terms = re.findall(r"[+-]?[^+-]+", inner)
    base = index = None
    scale = 1
    disp = 0
    for term in terms:
        sign = -1 if term.startswith("-") else 1
        body = term.lstrip("+-")
        if "*" in body:
            reg, _, factor = body.partition("*")
            if reg not in REGISTERS or sign < 0 or index is not None:
                raise OperandMismatch(f"line {line_no}: bad index term {term!r}")
            index, scale = reg, _parse_int(factor) or 0
        elif body in REGISTERS:
            if sign < 0:
                raise OperandMismatch(f"line {line_no}: negated register {term!r}")
            if base is None:
                base = body
            elif index is None:
                index = body
            else:
                raise OperandMismatch(f"line {line_no}: too many registers in {text!r}")
        else:
            value = _parse_int(body)
            if value is None:
                raise OperandMismatch(f"line {line_no}: bad displacement {term!r}")
            disp += sign * value
    if base is None:
        raise OperandMismatch(f"line {line_no}: memory operand needs a base register")
    try:
        return Mem(base, index, scale, disp)
    except ValueError as exc:
        raise OperandMismatch(f"line {line_no}: {exc}") from exc


def parse_operand(text: str, line_no: int = 0) -> Operand:
    text = _SIZE_WORDS.sub("", text.strip())
    if text.startswith("[") and text.endswith("]"):
        return _parse_mem(text, line_no)
    if text in REGISTERS:
        return Reg(text)
    value = _parse_int(text)
    if value is not None:
        return Imm(value)
    if _NAME_RE.match(text):
        return Sym(text)
    raise OperandMismatch(f"line {line_no}: cannot parse operand {text!r}")


def _normalize(insn: Instruction, line_no: int) -> Instruction:
    """Bring immediates to the form the decoder reports."""
    m, ops = insn.mnemonic, insn.operands
    if m == "movabs" and ops[1].is_imm and ops[1].sym is None:
        return insn.with_operands(ops[0], Imm(ops[1].imm & 0xFFFFFFFFFFFFFFFF))
    if m == "mov" and ops[0].is_reg and ops[1].is_imm and ops[1].sym is None and reg_width(ops[0].reg) == 32:
        return insn.with_operands(ops[0], Imm(ops[1].imm & 0xFFFFFFFF))
    return insn


def parse_instruction(text: str, line_no: int = 0) -> Instruction:
    parts = text.strip().split(None, 1)
    mnemonic = parts[0].lower()
    if mnemonic not in MNEMONICS:
        raise UnknownMnemonic(f"line {line_no}: unknown mnemonic {parts[0]!r}")
    operands: tuple[Operand, ...] = ()
    if len(parts) > 1:
        operands = tuple(parse_operand(p, line_no) for p in parts[1].split(","))
    if len(operands) != ARITY[mnemonic]:
        raise OperandMismatch(f"line {line_no}: {mnemonic} takes {ARITY[mnemonic]} operand(s)")
    return _normalize(Instruction(mnemonic, operands), line_no)


def parse(source: str) -> list:
    """Parse assembly text into a list of statements."""
    out: list = []
    for line_no, raw in enumerate(source.splitlines(), 1):
        line = re.split(r"[#;]", raw, maxsplit=1)[0].strip()
        while line:
            m = _LABEL_RE.match(line)
            if not m:
                break
            out.append(Label(m.group(1)))
            line = line[m.end():].strip()
        if not line:
            continue
        if line.startswith("."):
            directive, _, rest = line.partition(" ")
            rest = rest.strip()
            if directive in (".global", ".globl"):
                for name in rest.split(","):
                    out.append(Global(name.strip()))
            elif directive == ".quad":
                out.append(Quad(parse_operand(rest, line_no)))
            else:
                raise UnknownMnemonic(f"line {line_no}: unknown directive {directive!r}")
            continue
        out.append(parse_instruction(line, line_no))
    return out


def format_statements(statements: list) -> str:
    lines = []
    for st in statements:
        if isinstance(st, Label):
            lines.append(f"{st.name}:")
        elif isinstance(st, Global):
            lines.append(f".global {st.name}")
        elif isinstance(st, Quad):
            lines.append(f"    .quad {st.value}")
        else:
            lines.append(f"    {st}")
    return "\n".join(lines) + "\n"


def _size_of(st) -> int:
    if isinstance(st, Quad):
        return 8
    if isinstance(st, Instruction):
        return len(encode(_placeholder_resolve(st), 0))
    return 0


def _placeholder_resolve(insn: Instruction) -> Instruction:
    if not any(op.sym is not None for op in insn.operands):
        return insn
    # symbolic operands are always encoded in fixed-width slots
    return insn.with_operands(*(Imm(0) if op.sym is not None else op for op in insn.operands))


def assemble(source) -> AsmResult:
    """Assemble text or a parsed statement list.

    Direct branches to defined labels are resolved to rel32 displacements;
    calls and jumps to undefined non-local names, ``movabs reg, name`` and
    ``.quad name`` become relocations.
    """
    statements = parse(source) if isinstance(source, str) else list(source)
    labels: dict[str, int] = {}
    globals_: list[str] = []
    pos = 0
    for st in statements:
        if isinstance(st, Label):
            if st.name in labels:
                raise DuplicateLabel(f"label {st.name!r} defined twice")
            labels[st.name] = pos
        elif isinstance(st, Global):
            globals_.append(st.name)
        else:
            if isinstance(st, Instruction):
                _check_symbolic(st)
            pos += _size_of(st)

    code = bytearray()
    relocs: list[AsmReloc] = []
    externs: list[str] = []
    placed: list[tuple[int, Instruction]] = []

    def extern(name: str) -> None:
        if is_local(name):
            raise UndefinedLabel(f"undefined local label {name!r}")
        if name not in externs:
            externs.append(name)

    for st in statements:
        if isinstance(st, Quad):
            if st.value.sym is not None:
                if st.value.sym not in labels:
                    extern(st.value.sym)
                relocs.append(AsmReloc(len(code), st.value.sym, ABS64, 0))
                code += bytes(8)
            elif st.value.is_imm:
                code += (st.value.imm & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
            else:
                raise OperandMismatch(".quad takes an integer or a label")
            continue
        if not isinstance(st, Instruction):
            continue
        here = len(code)
        resolved = st
        if st.mnemonic in BRANCH_OPS and st.operands[0].sym is not None:
            name = st.operands[0].sym
            if name in labels:
                resolved = st.with_operands(Imm(labels[name]))
            elif st.mnemonic in JCC_OPS:
                raise UndefinedLabel(f"undefined label {name!r}")
            else:
                extern(name)
                resolved = st.with_operands(Imm(here + 5))
                relocs.append(AsmReloc(here + 1, name, REL32, -4))
        elif st.mnemonic == "movabs" and st.operands[1].sym is not None:
            name = st.operands[1].sym
            if name not in labels:
                extern(name)
            resolved = st.with_operands(st.operands[0], Imm(0))
            relocs.append(AsmReloc(here + 2, name, ABS64, 0))
        raw = encode(resolved, here)
        code += raw
        placed.append((here, Instruction(resolved.mnemonic, resolved.operands, len(raw), here)))
    return AsmResult(bytes(code), labels, globals_, relocs, externs, placed)


def _check_symbolic(insn: Instruction) -> None:
    for i, op in enumerate(insn.operands):
        if op.sym is None:
            continue
        if insn.mnemonic in BRANCH_OPS and i == 0:
            continue
        if insn.mnemonic == "movabs" and i == 1:
            continue
        raise OperandMismatch(f"{insn.mnemonic} cannot take symbol {op.sym!r} there")
