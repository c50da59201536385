"""Machine-code encoder and decoder for the supported subset.

Encodings are the real x86-64 ones.  The encoder always picks one canonical
form per instruction so that guard templates can be matched byte for byte;
the decoder additionally accepts the alternative reg,reg direction bits.
"""
from __future__ import annotations

import struct

from .model import (
    ALU_OPS,
    JCC_OPS,
    REGS32,
    REGS64,
    Imm,
    Instruction,
    Mem,
    Operand,
    Reg,
    reg_num,
    reg_width,
)


class IsaError(Exception):
    pass


class OperandMismatch(IsaError):
    pass


class DecodeError(IsaError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"{message} at offset {offset:#x}")
        self.offset = offset


class UndecodableByte(DecodeError):
    pass


class Truncated(DecodeError):
    pass


# mnemonic -> (op r/m,reg ; op reg,r/m ; /digit for the 0x81/0x83 group)
_ALU = {
    "add": (0x01, 0x03, 0),
    "sub": (0x29, 0x2B, 5),
    "and": (0x21, 0x23, 4),
    "xor": (0x31, 0x33, 6),
    "cmp": (0x39, 0x3B, 7),
}
_ALU_BY_MR = {v[0]: k for k, v in _ALU.items()}
_ALU_BY_RM = {v[1]: k for k, v in _ALU.items()}
_ALU_BY_DIGIT = {v[2]: k for k, v in _ALU.items()}
_SHIFT = {"shl": 4, "shr": 5}
_SHIFT_BY_DIGIT = {v: k for k, v in _SHIFT.items()}
_JCC = {"ja": 0x87, "jae": 0x83, "jb": 0x82, "jbe": 0x86, "je": 0x84, "jne": 0x85, "jg": 0x8F, "jl": 0x8C}
_JCC_BY_OP = {v: k for k, v in _JCC.items()}

MAX_LENGTH = 15


def _fits(value: int, bits: int) -> bool:
    return -(1 << (bits - 1)) <= value < (1 << (bits - 1))


def _rex(w: bool, r: int, x: int, b: int, force: bool = False) -> bytes:
    value = 0x40 | (8 if w else 0) | ((r >> 3) << 2) | ((x >> 3) << 1) | (b >> 3)
    if value == 0x40 and not force:
        return b""
    return bytes([value])


def _modrm_tail(reg_field: int, rm: Operand) -> tuple[int, int, bytes]:
    """Return (rex.x source, rex.b source, modrm+sib+disp bytes) for ``rm``."""
    if rm.is_reg:
        num = reg_num(rm.reg)
        return 0, num, bytes([0xC0 | ((reg_field & 7) << 3) | (num & 7)])
    base = reg_num(rm.base)
    index = reg_num(rm.index) if rm.index is not None else None
    disp = rm.disp
    if not _fits(disp, 32):
        raise OperandMismatch(f"displacement {disp:#x} does not fit in 32 bits")
    if disp == 0 and (base & 7) != 5:
        mod, disp_bytes = 0, b""
    elif _fits(disp, 8):
        mod, disp_bytes = 1, struct.pack("<b", disp)
    else:
        mod, disp_bytes = 2, struct.pack("<i", disp)
    if index is None and (base & 7) != 4:
        return 0, base, bytes([(mod << 6) | ((reg_field & 7) << 3) | (base & 7)]) + disp_bytes
    scale_bits = {1: 0, 2: 1, 4: 2, 8: 3}[rm.scale]
    idx = 4 if index is None else index
    sib = (scale_bits << 6) | ((idx & 7) << 3) | (base & 7)
    modrm = (mod << 6) | ((reg_field & 7) << 3) | 4
    return (0 if index is None else index), base, bytes([modrm, sib]) + disp_bytes


def _rm_form(w: bool, opcode: bytes, reg_field: int, rm: Operand, force_rex: bool = False) -> bytes:
    x, b, tail = _modrm_tail(reg_field, rm)
    return _rex(w, reg_field, x, b, force_rex) + opcode + tail


def _imm_value(op: Operand) -> int:
    if op.sym is not None:
        raise OperandMismatch(f"unresolved symbol {op.sym!r}")
    return op.imm


def encode(insn: Instruction, address: int = 0) -> bytes:
    """Encode ``insn`` placed at ``address`` (only rel32 branches depend on it)."""
    m = insn.mnemonic
    ops = insn.operands
    try:
        return _encode(m, ops, address)
    except (KeyError, IndexError, AttributeError) as exc:
        raise OperandMismatch(f"bad operands for {m}: {', '.join(map(str, ops))}") from exc


def _encode(m: str, ops: tuple[Operand, ...], address: int) -> bytes:
    if m == "ret":
        return b"\xc3"
    if m == "nop":
        return b"\x90"
    if m == "hlt":
        return b"\xf4"
    if m == "pushfq":
        return b"\x9c"
    if m == "popfq":
        return b"\x9d"
    if m in ("push", "pop"):
        (op,) = ops
        if not op.is_reg or reg_width(op.reg) != 64:
            raise OperandMismatch(f"{m} takes a 64-bit register")
        num = reg_num(op.reg)
        return _rex(False, 0, 0, num) + bytes([(0x50 if m == "push" else 0x58) + (num & 7)])
    if m in ("call", "jmp") or m in JCC_OPS:
        (op,) = ops
        if op.is_imm:
            if m in JCC_OPS:
                head = bytes([0x0F, _JCC[m]])
            else:
                head = b"\xe8" if m == "call" else b"\xe9"
            rel = _imm_value(op) - (address + len(head) + 4)
            if not _fits(rel, 32):
                raise OperandMismatch(f"branch target {op.imm:#x} out of rel32 range")
            return head + struct.pack("<i", rel)
        if m in JCC_OPS:
            raise OperandMismatch("conditional jumps take a direct target")
        if op.is_reg and reg_width(op.reg) != 64:
            raise OperandMismatch(f"{m} through a 32-bit register")
        return _rm_form(False, b"\xff", 2 if m == "call" else 4, op)
    if m == "movabs":
        dst, src = ops
        if not dst.is_reg or reg_width(dst.reg) != 64 or not src.is_imm:
            raise OperandMismatch("movabs takes reg64, imm64")
        num = reg_num(dst.reg)
        value = _imm_value(src) & 0xFFFFFFFFFFFFFFFF
        return _rex(True, 0, 0, num) + bytes([0xB8 + (num & 7)]) + struct.pack("<Q", value)
    if m == "lea":
        dst, src = ops
        if not dst.is_reg or reg_width(dst.reg) != 64 or not src.is_mem:
            raise OperandMismatch("lea takes reg64, mem")
        return _rm_form(True, b"\x8d", reg_num(dst.reg), src)
    if m == "mov":
        return _encode_mov(ops)
    if m in ALU_OPS:
        dst, src = ops
        mr, rm_op, digit = _ALU[m]
        if dst.is_reg and reg_width(dst.reg) != 64 or src.is_reg and reg_width(src.reg) != 64:
            raise OperandMismatch(f"{m} takes 64-bit registers")
        if src.is_reg and not dst.is_imm:
            return _rm_form(True, bytes([mr]), reg_num(src.reg), dst)
        if dst.is_reg and src.is_mem:
            return _rm_form(True, bytes([rm_op]), reg_num(dst.reg), src)
        if src.is_imm and not dst.is_imm:
            value = _imm_value(src)
            if _fits(value, 8):
                return _rm_form(True, b"\x83", digit, dst) + struct.pack("<b", value)
            if _fits(value, 32):
                return _rm_form(True, b"\x81", digit, dst) + struct.pack("<i", value)
            raise OperandMismatch(f"immediate {value:#x} does not fit in 32 bits")
        raise OperandMismatch(f"bad operands for {m}")
    if m in _SHIFT:
        dst, src = ops
        if not dst.is_reg or reg_width(dst.reg) != 64 or not src.is_imm:
            raise OperandMismatch(f"{m} takes reg64, imm8")
        value = _imm_value(src)
        if not 0 <= value < 64:
            raise OperandMismatch("shift count out of range")
        return _rm_form(True, b"\xc1", _SHIFT[m], dst) + bytes([value])
    raise OperandMismatch(f"unknown mnemonic {m!r}")


def _encode_mov(ops: tuple[Operand, ...]) -> bytes:
    dst, src = ops
    if dst.is_reg and src.is_imm:
        value = _imm_value(src)
        num = reg_num(dst.reg)
        if reg_width(dst.reg) == 32:
            if not -(1 << 31) <= value < (1 << 32):
                raise OperandMismatch("immediate does not fit in 32 bits")
            return _rex(False, 0, 0, num) + bytes([0xB8 + (num & 7)]) + struct.pack("<I", value & 0xFFFFFFFF)
        if not _fits(value, 32):
            raise OperandMismatch("mov reg64 takes a sign-extended imm32; use movabs")
        return _rm_form(True, b"\xc7", 0, dst) + struct.pack("<i", value)
    if dst.is_mem and src.is_imm:
        value = _imm_value(src)
        if not _fits(value, 32):
            raise OperandMismatch("mov to memory takes a sign-extended imm32")
        return _rm_form(True, b"\xc7", 0, dst) + struct.pack("<i", value)
    if src.is_reg and (dst.is_reg or dst.is_mem):
        width = reg_width(src.reg)
        if dst.is_reg and reg_width(dst.reg) != width:
            raise OperandMismatch("register width mismatch")
        return _rm_form(width == 64, b"\x89", reg_num(src.reg), dst)
    if dst.is_reg and src.is_mem:
        return _rm_form(reg_width(dst.reg) == 64, b"\x8b", reg_num(dst.reg), src)
    raise OperandMismatch("bad operands for mov")


# ---------------------------------------------------------------- decoder


class _Reader:
    def __init__(self, image: bytes, offset: int):
        self.image = image
        self.start = offset
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.image):
            raise Truncated(self.start, "truncated instruction")
        chunk = self.image[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def u8(self) -> int:
        return self.take(1)[0]


def _decode_modrm(rd: _Reader, rex: int, width: int) -> tuple[int, Operand]:
    """Return (reg field with REX.R, r/m operand)."""
    modrm = rd.u8()
    mod, reg, rm = modrm >> 6, (modrm >> 3) & 7, modrm & 7
    reg |= (rex & 4) << 1
    names = REGS64 if width == 64 else REGS32
    if mod == 3:
        return reg, Reg(names[rm | ((rex & 1) << 3)])
    index = None
    scale = 1
    if rm == 4:
        sib = rd.u8()
        scale = 1 << (sib >> 6)
        idx = ((sib >> 3) & 7) | ((rex & 2) << 2)
        base = (sib & 7) | ((rex & 1) << 3)
        if idx != 4:
            index = REGS64[idx]
        if (sib & 7) == 5 and mod == 0:
            raise UndecodableByte(rd.start, "absolute SIB addressing not supported")
    else:
        if rm == 5 and mod == 0:
            raise UndecodableByte(rd.start, "rip-relative addressing not supported")
        base = rm | ((rex & 1) << 3)
    if mod == 1:
        disp = struct.unpack("<b", rd.take(1))[0]
    elif mod == 2:
        disp = struct.unpack("<i", rd.take(4))[0]
    else:
        disp = 0
    return reg, Mem(REGS64[base], index, scale if index else 1, disp)


def decode_instruction(image: bytes, offset: int, base: int = 0) -> Instruction:
    """Decode one instruction at ``offset``; ``base`` is the image load address.

    The returned ``offset`` is relative to the image; direct branch operands
    hold the absolute target ``base + offset + length + rel32``.
    """
    if not 0 <= offset < len(image):
        raise Truncated(offset, "offset outside image")
    rd = _Reader(image, offset)
    rex = 0
    first = rd.u8()
    if 0x40 <= first <= 0x4F:
        rex = first
        op = rd.u8()
    else:
        op = first
    w = bool(rex & 8)

    def done(mnemonic: str, *operands: Operand) -> Instruction:
        length = rd.pos - offset
        if length > MAX_LENGTH:
            raise UndecodableByte(offset, "instruction too long")
        return Instruction(mnemonic, tuple(operands), length, offset)

    def bad() -> UndecodableByte:
        return UndecodableByte(offset, f"byte {op:#04x} not in supported subset")

    simple = {0xC3: "ret", 0x90: "nop", 0xF4: "hlt", 0x9C: "pushfq", 0x9D: "popfq"}
    if op in simple:
        if rex:
            raise bad()
        return done(simple[op])
    if 0x50 <= op <= 0x5F:
        if rex not in (0, 0x41):
            raise bad()
        name = REGS64[(op & 7) | ((rex & 1) << 3)]
        return done("push" if op < 0x58 else "pop", Reg(name))
    if op in (0xE8, 0xE9):
        if rex:
            raise bad()
        rel = struct.unpack("<i", rd.take(4))[0]
        target = base + rd.pos + rel
        return done("call" if op == 0xE8 else "jmp", Imm(target))
    if op == 0x0F:
        if rex:
            raise bad()
        op2 = rd.u8()
        if op2 not in _JCC_BY_OP:
            raise UndecodableByte(offset, f"escape 0x0f {op2:#04x} not in supported subset")
        rel = struct.unpack("<i", rd.take(4))[0]
        return done(_JCC_BY_OP[op2], Imm(base + rd.pos + rel))
    if op == 0xFF:
        if w:
            raise bad()
        digit, rm = _decode_modrm(rd, rex, 64)
        digit &= 7
        if digit == 2:
            return done("call", rm)
        if digit == 4:
            return done("jmp", rm)
        raise bad()
    if 0xB8 <= op <= 0xBF:
        num = (op & 7) | ((rex & 1) << 3)
        if w:
            return done("movabs", Reg(REGS64[num]), Imm(struct.unpack("<Q", rd.take(8))[0]))
        return done("mov", Reg(REGS32[num]), Imm(struct.unpack("<I", rd.take(4))[0]))
    if op in (0x89, 0x8B):
        width = 64 if w else 32
        regf, rm = _decode_modrm(rd, rex, width)
        names = REGS64 if w else REGS32
        if op == 0x89:
            return done("mov", rm, Reg(names[regf]))
        return done("mov", Reg(names[regf]), rm)
    if not w:
        raise bad()
    if op == 0xC7:
        digit, rm = _decode_modrm(rd, rex, 64)
        if digit & 7:
            raise bad()
        return done("mov", rm, Imm(struct.unpack("<i", rd.take(4))[0]))
    if op == 0x8D:
        regf, rm = _decode_modrm(rd, rex, 64)
        if not rm.is_mem:
            raise bad()
        return done("lea", Reg(REGS64[regf]), rm)
    if op in _ALU_BY_MR:
        regf, rm = _decode_modrm(rd, rex, 64)
        return done(_ALU_BY_MR[op], rm, Reg(REGS64[regf]))
    if op in _ALU_BY_RM:
        regf, rm = _decode_modrm(rd, rex, 64)
        return done(_ALU_BY_RM[op], Reg(REGS64[regf]), rm)
    if op in (0x81, 0x83):
        digit, rm = _decode_modrm(rd, rex, 64)
        name = _ALU_BY_DIGIT.get(digit & 7)
        if name is None:
            raise bad()
        if op == 0x83:
            value = struct.unpack("<b", rd.take(1))[0]
        else:
            value = struct.unpack("<i", rd.take(4))[0]
        return done(name, rm, Imm(value))
    if op == 0xC1:
        digit, rm = _decode_modrm(rd, rex, 64)
        name = _SHIFT_BY_DIGIT.get(digit & 7)
        if name is None or not rm.is_reg:
            raise bad()
        count = rd.u8()
        if count >= 64:
            raise bad()
        return done(name, rm, Imm(count))
    raise bad()


def decode_all(image: bytes, base: int = 0) -> list[Instruction]:
    """Linear sweep of a whole image (used for assembled code without data)."""
    out = []
    pos = 0
    while pos < len(image):
        insn = decode_instruction(image, pos, base)
        out.append(insn)
        pos += insn.length
    return out
