from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from enclave_pcc.bundle import Policy, PolicyManifest, placeholder_value
from enclave_pcc.corpus import kernel_names, kernel_source
from enclave_pcc.instrument import build_bundle
from enclave_pcc.isa import (
    DecodeError,
    OperandMismatch,
    UndefinedLabel,
    UnknownMnemonic,
    assemble,
    decode_all,
    decode_instruction,
)

GPR = ["rax", "rcx", "rdx", "rbx", "rsi", "rdi", "rbp", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]
BASE = GPR + ["rsp"]
INDEX = GPR
R32 = ["eax", "ecx", "edx", "ebx", "esi", "edi", "r8d", "r13d"]

reg = st.sampled_from(GPR)
imm32 = st.integers(-(1 << 31), (1 << 31) - 1)
imm64 = st.integers(0, (1 << 64) - 1)


@st.composite
def mem(draw):
    base = draw(st.sampled_from(BASE))
    disp = draw(st.sampled_from([0, 8, -16, 127, -128, 4096, -70000]))
    if draw(st.booleans()):
        idx = draw(st.sampled_from(INDEX))
        scale = draw(st.sampled_from([1, 2, 4, 8]))
        text = f"{base}+{idx}*{scale}"
    else:
        text = base
    if disp:
        text += f"+{disp}" if disp > 0 else f"-{-disp}"
    return f"[{text}]"


@st.composite
def straight_line(draw):
    form = draw(st.integers(0, 17))
    r, r2 = draw(reg), draw(reg)
    alu = draw(st.sampled_from(["add", "sub", "and", "xor", "cmp"]))
    if form == 0:
        return f"mov {r}, {r2}"
    if form == 1:
        return f"mov {r}, {draw(mem())}"
    if form == 2:
        return f"mov {draw(mem())}, {r}"
    if form == 3:
        return f"mov {r}, {draw(imm32)}"
    if form == 4:
        return f"movabs {r}, {draw(imm64):#x}"
    if form == 5:
        return f"lea {r}, {draw(mem())}"
    if form == 6:
        return f"{alu} {r}, {r2}"
    if form == 7:
        return f"{alu} {r}, {draw(mem())}"
    if form == 8:
        return f"{alu} {r}, {draw(imm32)}"
    if form == 9:
        return f"push {r}"
    if form == 10:
        return f"pop {r}"
    if form == 11:
        return draw(st.sampled_from(["ret", "nop", "hlt", "pushfq", "popfq"]))
    if form == 12:
        return f"{draw(st.sampled_from(['call', 'jmp']))} {r}"
    if form == 13:
        return f"{draw(st.sampled_from(['call', 'jmp']))} {draw(mem())}"
    if form == 14:
        return f"{draw(st.sampled_from(['shl', 'shr']))} {r}, {draw(st.integers(1, 63))}"
    if form == 15:
        return f"mov qword {draw(mem())}, {draw(imm32)}"
    if form == 16:
        return f"{draw(st.sampled_from(['add', 'sub', 'and', 'xor']))} {draw(mem())}, {r}"
    return f"mov {draw(st.sampled_from(R32))}, {draw(st.integers(0, 0xFFFFFFFF))}"


@st.composite
def program(draw):
    n = 50
    lines = draw(st.lists(straight_line(), min_size=n, max_size=n))
    # sprinkle labels and direct branches between them
    labels = sorted(set(draw(st.lists(st.integers(0, n - 1), min_size=1, max_size=6))))
    out = []
    for i, line in enumerate(lines):
        if i in labels:
            out.append(f"L{i}:")
        if draw(st.integers(0, 5)) == 0:
            op = draw(st.sampled_from(["jmp", "call", "ja", "jae", "jb", "jbe", "je", "jne", "jg", "jl"]))
            out.append(f"{op} L{draw(st.sampled_from(labels))}")
        out.append(line)
    return "\n".join(out) + "\n"


@settings(max_examples=60, deadline=None)
@given(program())
def test_assemble_decode_roundtrip(source):
    res = assemble(source)
    decoded = decode_all(res.code)
    # sequential decode partitions the image exactly
    pos = 0
    for insn in decoded:
        assert insn.offset == pos and 1 <= insn.length <= 15
        pos += insn.length
    assert pos == len(res.code)
    assert len(decoded) == len(res.placed)
    for (off, want), got in zip(res.placed, decoded):
        assert got.offset == off
        if want.operands and want.operands[0].sym is not None:
            assert got.mnemonic == want.mnemonic
            assert got.operands[0].imm == res.labels[want.operands[0].sym]
        else:
            assert got.shape == want.shape


def test_ret_is_c3():
    assert assemble("ret\n").code == b"\xc3"


def test_movabs_placeholder_encoding():
    code = assemble("movabs r11, 0x3FFFFFFFFFFFFFFF\n").code
    assert len(code) == 10
    assert code[2:] == placeholder_value("upper_data_bound").to_bytes(8, "little")


def test_push_r10():
    insn = decode_instruction(assemble("push r10\n").code, 0)
    assert insn.mnemonic == "push" and insn.operands[0].reg == "r10" and insn.length == 2


@pytest.mark.parametrize("raw", [b"\xff", b"\x0f", b"\x0f\x0b", b"\x48", b"\x48\x8b"])
def test_bad_bytes_raise_decode_errors(raw):
    with pytest.raises(DecodeError):
        decode_instruction(raw, 0)


def test_assembler_errors():
    with pytest.raises(UnknownMnemonic):
        assemble("imul rax, rbx\n")
    with pytest.raises(UndefinedLabel):
        assemble("jne nowhere\n")
    with pytest.raises(OperandMismatch):
        assemble("lea rax, rbx\n")


def test_extern_call_becomes_relocation():
    res = assemble("call ocall_send\nret\n")
    assert res.externs == ["ocall_send"]
    (rel,) = res.relocations
    assert rel.offset == 1 and rel.kind == "Rel32" and rel.addend == -4


def test_instrumented_corpus_decodes():
    m = PolicyManifest(Policy.parse("p1,p2,p3,p4,p5,p6"))
    for name in kernel_names():
        code = build_bundle(kernel_source(name), m).code
        assert sum(i.length for i in decode_all(code)) == len(code)
