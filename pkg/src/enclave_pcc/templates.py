"""Canonical guard templates and runtime-support routines.

The producer emits these sequences verbatim and the verifier matches them
instruction for instruction, so both sides import them from here.
Branches to the exit stub and calls into runtime routines are symbolic
(``Sym``) and get resolved against the loaded symbol table.
"""
from __future__ import annotations

import enum

from .bundle import PLACEHOLDERS, PlaceholderField
from .isa import Imm, Instruction, Label, Mem, Operand, Reg, Sym, assemble, ins

EXIT_LABEL = "exit_label"
CFI_CHECK = "CFICheck"
SSA_CHECK = "ssa_check"
RUNTIME_SYMBOLS = (EXIT_LABEL, CFI_CHECK, SSA_CHECK)

OCALL_SEND = "ocall_send"
OCALL_RECV = "ocall_recv"
SSA_PAGE = "__ssa_page"
BOOTSTRAP_EXPORTS = (OCALL_SEND, OCALL_RECV, SSA_PAGE)

VIOLATION_CODE = 0xFFFFFFFF

SCRATCH = ("r10", "r11")
SCRATCH_ALT = ("r8", "r9")

# SSA page: marker qword, AEX counter, counter value seen at the last check
SSA_MARKER_OFFSET = 0
SSA_COUNT_OFFSET = 8
SSA_LAST_OFFSET = 16
SSA_MARKER = 0x55AA55AA

# branch-target table: count qword followed by sorted addresses
TARGET_TABLE_HEADER = 8


class GuardKind(enum.Enum):
    STORE = "StoreGuard"
    RSP = "RspGuard"
    CFI = "CfiGuard"
    SHADOW_PROLOG = "ShadowProlog"
    SHADOW_EPILOG = "ShadowEpilog"
    SSA_CHECK = "SsaCheck"
    EXIT_STUB = "ExitStub"
    CFI_ROUTINE = "CfiRoutine"
    SSA_ROUTINE = "SsaRoutine"


# guards placed in front of the instruction they protect
PREFIX_KINDS = frozenset({GuardKind.STORE, GuardKind.CFI, GuardKind.SHADOW_EPILOG})
ROUTINE_KINDS = frozenset({GuardKind.EXIT_STUB, GuardKind.CFI_ROUTINE, GuardKind.SSA_ROUTINE})


def _ph(field: PlaceholderField) -> Operand:
    return Imm(PLACEHOLDERS[field])


def store_scratch(dest: Operand) -> tuple[str, str]:
    """r10/r11 unless the destination mentions them, then r8/r9."""
    used = set(dest.registers())
    if used & set(SCRATCH) and not used & set(SCRATCH_ALT):
        return SCRATCH_ALT
    return SCRATCH


def lea_operand(dest: Operand) -> Operand:
    # the two scratch pushes move rsp down by 16 before the lea runs
    if dest.base == "rsp":
        return Mem(dest.base, dest.index, dest.scale, dest.disp + 16)
    return dest


def store_guard(dest: Operand) -> list[Instruction]:
    a, b = store_scratch(dest)
    return [
        ins("push", Reg(a)),
        ins("push", Reg(b)),
        ins("lea", Reg(a), lea_operand(dest)),
        ins("movabs", Reg(b), _ph(PlaceholderField.UPPER_DATA_BOUND)),
        ins("cmp", Reg(a), Reg(b)),
        ins("ja", Sym(EXIT_LABEL)),
        ins("movabs", Reg(b), _ph(PlaceholderField.LOWER_DATA_BOUND)),
        ins("cmp", Reg(a), Reg(b)),
        ins("jb", Sym(EXIT_LABEL)),
        ins("pop", Reg(b)),
        ins("pop", Reg(a)),
    ]


def rsp_guard() -> list[Instruction]:
    return [
        ins("push", Reg("r10")),
        ins("movabs", Reg("r10"), _ph(PlaceholderField.UPPER_STACK_BOUND)),
        ins("cmp", Reg("rsp"), Reg("r10")),
        ins("ja", Sym(EXIT_LABEL)),
        ins("movabs", Reg("r10"), _ph(PlaceholderField.LOWER_STACK_BOUND)),
        ins("cmp", Reg("rsp"), Reg("r10")),
        ins("jb", Sym(EXIT_LABEL)),
        ins("pop", Reg("r10")),
    ]


def cfi_guard(target: Operand) -> list[Instruction]:
    return [ins("mov", Reg("rdi"), target), ins("call", Sym(CFI_CHECK))]


def shadow_prolog() -> list[Instruction]:
    return [
        ins("push", Reg("r10")),
        ins("push", Reg("r11")),
        ins("movabs", Reg("r10"), _ph(PlaceholderField.SHADOW_STACK_BASE)),
        ins("add", Mem("r10"), Imm(8)),
        ins("mov", Reg("r11"), Mem("r10")),
        ins("add", Reg("r11"), Reg("r10")),
        ins("mov", Reg("r10"), Mem("rsp", disp=16)),
        ins("mov", Mem("r11"), Reg("r10")),
        ins("pop", Reg("r11")),
        ins("pop", Reg("r10")),
    ]


def shadow_epilog() -> list[Instruction]:
    return [
        ins("push", Reg("r10")),
        ins("push", Reg("r11")),
        ins("movabs", Reg("r10"), _ph(PlaceholderField.SHADOW_STACK_BASE)),
        ins("mov", Reg("r11"), Mem("r10")),
        ins("add", Reg("r11"), Reg("r10")),
        ins("mov", Reg("r11"), Mem("r11")),
        ins("cmp", Reg("r11"), Mem("rsp", disp=16)),
        ins("jne", Sym(EXIT_LABEL)),
        ins("sub", Mem("r10"), Imm(8)),
        ins("pop", Reg("r11")),
        ins("pop", Reg("r10")),
    ]


def ssa_call() -> list[Instruction]:
    return [ins("call", Sym(SSA_CHECK))]


def exit_stub() -> list:
    return [
        Label(EXIT_LABEL),
        ins("mov", Reg("edi"), Imm(VIOLATION_CODE)),
        ins("hlt"),
    ]


def cfi_routine() -> list:
    """Binary search of the loaded branch-target table; misses go to the exit stub.

    Takes the candidate address in rdi and preserves every register and flag.
    """
    lp, lower, found = ".Lcfi_loop", ".Lcfi_lower", ".Lcfi_found"
    return [
        Label(CFI_CHECK),
        ins("pushfq"),
        ins("push", Reg("r10")),
        ins("push", Reg("r11")),
        ins("push", Reg("rax")),
        ins("push", Reg("rcx")),
        ins("push", Reg("rdx")),
        ins("movabs", Reg("r10"), _ph(PlaceholderField.LOWER_CODE_BOUND)),
        ins("cmp", Reg("rdi"), Reg("r10")),
        ins("jb", Sym(EXIT_LABEL)),
        ins("movabs", Reg("r10"), _ph(PlaceholderField.UPPER_CODE_BOUND)),
        ins("cmp", Reg("rdi"), Reg("r10")),
        ins("ja", Sym(EXIT_LABEL)),
        ins("movabs", Reg("r10"), _ph(PlaceholderField.BRANCH_TARGET_LIST)),
        ins("movabs", Reg("r11"), _ph(PlaceholderField.BRANCH_TARGET_COUNT)),
        ins("xor", Reg("rax"), Reg("rax")),
        ins("mov", Reg("rcx"), Reg("r11")),
        Label(lp),
        ins("cmp", Reg("rax"), Reg("rcx")),
        ins("jae", Sym(EXIT_LABEL)),
        ins("mov", Reg("rdx"), Reg("rax")),
        ins("add", Reg("rdx"), Reg("rcx")),
        ins("shr", Reg("rdx"), Imm(1)),
        ins("mov", Reg("r11"), Mem("r10", "rdx", 8, TARGET_TABLE_HEADER)),
        ins("cmp", Reg("rdi"), Reg("r11")),
        ins("je", Sym(found)),
        ins("jb", Sym(lower)),
        ins("mov", Reg("rax"), Reg("rdx")),
        ins("add", Reg("rax"), Imm(1)),
        ins("jmp", Sym(lp)),
        Label(lower),
        ins("mov", Reg("rcx"), Reg("rdx")),
        ins("jmp", Sym(lp)),
        Label(found),
        ins("pop", Reg("rdx")),
        ins("pop", Reg("rcx")),
        ins("pop", Reg("rax")),
        ins("pop", Reg("r11")),
        ins("pop", Reg("r10")),
        ins("popfq"),
        ins("ret"),
    ]


def ssa_routine(threshold: int) -> list:
    """Abort once ``threshold`` or more AEXes happened since the previous check.

    Preserves every register and flag.
    """
    return [
        Label(SSA_CHECK),
        ins("pushfq"),
        ins("push", Reg("r10")),
        ins("push", Reg("r11")),
        ins("movabs", Reg("r10"), Sym(SSA_PAGE)),
        ins("mov", Reg("r11"), Mem("r10", disp=SSA_COUNT_OFFSET)),
        ins("sub", Reg("r11"), Mem("r10", disp=SSA_LAST_OFFSET)),
        ins("cmp", Reg("r11"), Imm(threshold)),
        ins("jae", Sym(EXIT_LABEL)),
        ins("add", Mem("r10", disp=SSA_LAST_OFFSET), Reg("r11")),
        ins("mov", Mem("r10", disp=SSA_MARKER_OFFSET), Imm(SSA_MARKER)),
        ins("pop", Reg("r11")),
        ins("pop", Reg("r10")),
        ins("popfq"),
        ins("ret"),
    ]


def instantiate(statements: list, address: int, symbols: dict[str, int]) -> bytes:
    """Bytes of ``statements`` placed at ``address`` with external symbols resolved."""
    local = {st.name for st in statements if isinstance(st, Label)}
    resolved = []
    for st in statements:
        if isinstance(st, Instruction) and any(op.sym is not None and op.sym not in local for op in st.operands):
            ops = []
            for op in st.operands:
                if op.sym is not None and op.sym not in local:
                    # branch operands are assembled relative to the routine start
                    value = symbols[op.sym] - address if st.is_branch else symbols[op.sym]
                    op = Imm(value)
                ops.append(op)
            st = st.with_operands(*ops)
        resolved.append(st)
    result = assemble(resolved)
    if result.relocations:
        raise ValueError("routine left unresolved symbols")
    return result.code


def routine_statements(kind: GuardKind, threshold: int = 22) -> list:
    if kind is GuardKind.EXIT_STUB:
        return exit_stub()
    if kind is GuardKind.CFI_ROUTINE:
        return cfi_routine()
    if kind is GuardKind.SSA_ROUTINE:
        return ssa_routine(threshold)
    raise ValueError(kind)


ROUTINE_BY_SYMBOL = {
    EXIT_LABEL: GuardKind.EXIT_STUB,
    CFI_CHECK: GuardKind.CFI_ROUTINE,
    SSA_CHECK: GuardKind.SSA_ROUTINE,
}
