"""Instruction and operand model for the supported x86-64 subset."""
from __future__ import annotations

from dataclasses import dataclass

REGS64 = (
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)
REGS32 = (
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
    "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d",
)

# name -> (hardware number, width in bits)
REGISTERS: dict[str, tuple[int, int]] = {}
for _i, _r in enumerate(REGS64):
    REGISTERS[_r] = (_i, 64)
for _i, _r in enumerate(REGS32):
    REGISTERS[_r] = (_i, 32)

ALU_OPS = ("add", "sub", "and", "xor", "cmp")
SHIFT_OPS = ("shl", "shr")
JCC_OPS = ("ja", "jae", "jb", "jbe", "je", "jne", "jg", "jl")
BRANCH_OPS = ("call", "jmp") + JCC_OPS

MNEMONICS = frozenset(
    ("mov", "movabs", "lea", "push", "pop", "pushfq", "popfq", "ret", "nop", "hlt")
    + ALU_OPS + SHIFT_OPS + BRANCH_OPS
)

ARITY = {m: 2 for m in ("mov", "movabs", "lea") + ALU_OPS + SHIFT_OPS}
ARITY.update({m: 1 for m in ("push", "pop") + BRANCH_OPS})
ARITY.update({m: 0 for m in ("pushfq", "popfq", "ret", "nop", "hlt")})


def reg_num(name: str) -> int:
    return REGISTERS[name][0]


def reg_width(name: str) -> int:
    return REGISTERS[name][1]


def reg64(name: str) -> str:
    """Full-width register containing ``name``."""
    return REGS64[REGISTERS[name][0]]


@dataclass(frozen=True)
class Operand:
    kind: str  # "reg" | "imm" | "mem"
    reg: str | None = None
    imm: int = 0
    sym: str | None = None
    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int = 0

    @property
    def is_reg(self) -> bool:
        return self.kind == "reg"

    @property
    def is_imm(self) -> bool:
        return self.kind == "imm"

    @property
    def is_mem(self) -> bool:
        return self.kind == "mem"

    def registers(self) -> tuple[str, ...]:
        if self.kind == "reg":
            return (reg64(self.reg),)
        if self.kind == "mem":
            return tuple(r for r in (self.base, self.index) if r is not None)
        return ()

    def __str__(self) -> str:
        if self.kind == "reg":
            return self.reg
        if self.kind == "imm":
            if self.sym is not None:
                return self.sym
            return hex(self.imm) if self.imm >= 0 else "-" + hex(-self.imm)
        text = self.base
        if self.index is not None:
            text += f"+{self.index}*{self.scale}"
        if self.disp > 0:
            text += f"+{self.disp}"
        elif self.disp < 0:
            text += f"-{-self.disp}"
        return f"[{text}]"


def Reg(name: str) -> Operand:
    if name not in REGISTERS:
        raise ValueError(f"unknown register {name!r}")
    return Operand("reg", reg=name)


def Imm(value: int) -> Operand:
    return Operand("imm", imm=value)


def Sym(name: str) -> Operand:
    return Operand("imm", sym=name)


def Mem(base: str, index: str | None = None, scale: int = 1, disp: int = 0) -> Operand:
    if reg_width(base) != 64 or (index is not None and reg_width(index) != 64):
        raise ValueError("memory operands use 64-bit registers only")
    if index == "rsp":
        raise ValueError("rsp cannot be an index register")
    if scale not in (1, 2, 4, 8):
        raise ValueError(f"bad scale {scale}")
    return Operand("mem", base=base, index=index, scale=scale if index else 1, disp=disp)


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    operands: tuple[Operand, ...] = ()
    length: int = 0
    offset: int = 0

    @property
    def shape(self) -> tuple:
        """Position-free identity used for comparisons."""
        return (self.mnemonic, self.operands)

    @property
    def end(self) -> int:
        return self.offset + self.length

    @property
    def is_branch(self) -> bool:
        return self.mnemonic in BRANCH_OPS

    @property
    def is_jcc(self) -> bool:
        return self.mnemonic in JCC_OPS

    @property
    def is_direct_branch(self) -> bool:
        return self.is_branch and self.operands[0].is_imm

    @property
    def is_indirect_branch(self) -> bool:
        return self.mnemonic in ("call", "jmp") and not self.operands[0].is_imm

    @property
    def ends_block(self) -> bool:
        return self.mnemonic in ("jmp", "ret", "hlt") or self.is_jcc

    @property
    def falls_through(self) -> bool:
        return self.mnemonic not in ("jmp", "ret", "hlt")

    def writes_memory(self) -> bool:
        """Explicit memory destination (push/pop/call are implicit and excluded)."""
        if not self.operands or not self.operands[0].is_mem:
            return False
        return self.mnemonic in ("mov", "add", "sub", "and", "xor")

    def writes_rsp(self) -> bool:
        if self.mnemonic not in ("mov", "add", "sub", "and", "xor", "lea", "shl", "shr", "movabs", "pop"):
            return False
        dst = self.operands[0]
        return dst.is_reg and reg64(dst.reg) == "rsp"

    def with_operands(self, *operands: Operand) -> Instruction:
        return Instruction(self.mnemonic, tuple(operands))

    def __str__(self) -> str:
        if not self.operands:
            return self.mnemonic
        ops = ", ".join(str(o) for o in self.operands)
        first = self.operands[0]
        if first.is_mem and len(self.operands) == 2 and self.operands[1].is_imm:
            ops = "qword " + ops
        return f"{self.mnemonic} {ops}"


def ins(mnemonic: str, *operands: Operand) -> Instruction:
    return Instruction(mnemonic, tuple(operands))
