"""Restricted x86-64 subset shared by the producer, verifier and emulator."""
from .asm import (
    ABS64,
    REL32,
    AsmReloc,
    AsmResult,
    DuplicateLabel,
    Global,
    Label,
    Quad,
    UndefinedLabel,
    UnknownMnemonic,
    assemble,
    format_statements,
    is_local,
    parse,
    parse_instruction,
    parse_operand,
)
from .codec import (
    DecodeError,
    IsaError,
    OperandMismatch,
    Truncated,
    UndecodableByte,
    decode_all,
    decode_instruction,
    encode,
)
from .model import (
    JCC_OPS,
    MNEMONICS,
    REGS32,
    REGS64,
    Imm,
    Instruction,
    Mem,
    Operand,
    Reg,
    Sym,
    ins,
    reg64,
)
