from __future__ import annotations

import pytest

from enclave_pcc import templates as T
from enclave_pcc.bundle import POLICY_PLACEHOLDERS, Policy, PolicyManifest, find_placeholders
from enclave_pcc.consumer import execute
from enclave_pcc.corpus import kernel_names, kernel_source
from enclave_pcc.instrument import (
    DuplicateSymbol,
    FlagsLiveAcrossGuard,
    IndirectThroughRdi,
    MissingRuntimeSupport,
    PassOrderError,
    build_bundle,
    instrument,
    instrument_cfi,
    instrument_rsp,
    instrument_shadow_stack,
    instrument_ssa,
    instrument_stores,
    link,
    parse_program,
)
from enclave_pcc.isa import parse_instruction
from enclave_pcc.loader import load
from enclave_pcc.templates import GuardKind
from enclave_pcc.verifier import verify


def _texts(fn):
    return [str(it.stmt) for it in fn.items]


def test_store_guard_shape():
    p = instrument_stores(parse_program("main:\n    mov [rbx+8], rax\n"))
    items = p.function("main").items
    assert len(items) == 12
    assert [it.guard for it in items[:11]] == [GuardKind.STORE] * 11 and items[11].guard is None
    assert _texts(p.function("main")) == [
        "push r10", "push r11", "lea r10, [rbx+8]",
        "movabs r11, 0x3fffffffffffffff", "cmp r10, r11", "ja exit_label",
        "movabs r11, 0x4fffffffffffffff", "cmp r10, r11", "jb exit_label",
        "pop r11", "pop r10", "mov [rbx+8], rax",
    ]


def test_store_guard_uses_alternate_scratch():
    p = instrument_stores(parse_program("main:\n    mov [r10+r11*8], rax\n"))
    texts = _texts(p.function("main"))
    assert texts[0] == "push r8" and texts[2] == "lea r8, [r10+r11*8]"


def test_store_free_program_unchanged():
    src = "main:\n    mov rax, [rdi]\n    add rax, 1\n    ret\n"
    p = parse_program(src)
    assert instrument_stores(p).functions == p.functions


@pytest.mark.parametrize("name", kernel_names())
def test_one_store_guard_per_store(layout, name):
    src = kernel_source(name)
    stores = sum(1 for i in parse_program(src).instructions() if i.writes_memory())
    m = PolicyManifest(Policy.P1)
    report = verify(load(build_bundle(src, m), layout), m)
    assert report.accepted
    assert sum(1 for g in report.matches if g.kind is GuardKind.STORE) == stores


def test_rsp_guard_follows_write():
    p = instrument_rsp(parse_program("main:\n    and rsp, -16\n    push rbx\n    pop rbx\n    ret\n"))
    texts = _texts(p.function("main"))
    assert texts[0] == "and rsp, -0x10"
    assert texts[1:9] == [
        "push r10", "movabs r10, 0x5fffffffffffffff", "cmp rsp, r10", "ja exit_label",
        "movabs r10, 0x6fffffffffffffff", "cmp rsp, r10", "jb exit_label", "pop r10",
    ]
    # push/pop rely on the guard pages
    assert texts[9:] == ["push rbx", "pop rbx", "ret"]


def test_rsp_untouched_program_unchanged():
    p = parse_program("main:\n    mov rax, rbx\n    ret\n")
    assert instrument_rsp(p).functions == p.functions


def test_cfi_register_and_memory_forms():
    p, targets = instrument_cfi(parse_program("main:\n    call rbx\n    jmp [rax+8]\n"))
    assert _texts(p.function("main")) == [
        "mov rdi, rbx", "call CFICheck", "call rbx",
        "mov rdi, [rax+8]", "call CFICheck", "jmp [rax+8]",
    ]
    assert targets == []


def test_cfi_target_list_is_address_taken_handlers():
    p, targets = instrument_cfi(parse_program(kernel_source("dispatch")))
    assert targets == ["h_add", "h_shift", "h_xor"]


def test_cfi_rejects_memory_operand_through_rdi():
    # the guard loads rdi before the branch re-reads its operand
    with pytest.raises(IndirectThroughRdi):
        instrument_cfi(parse_program("main:\n    call [rdi+8]\n"))
    p, _ = instrument_cfi(parse_program("main:\n    call rdi\n"))
    assert _texts(p.function("main"))[0] == "mov rdi, rdi"


def test_no_indirect_branches_no_change():
    p = parse_program("main:\n    mov rax, 1\n    ret\n")
    q, targets = instrument_cfi(p)
    assert q.functions == p.functions and targets == []


def test_leaf_shadow_prolog_and_epilog():
    p = instrument_shadow_stack(parse_program("main:\n    call f\n    ret\nf:\n    ret\n"))
    items = p.function("f").items
    assert len(items) == 22
    assert [str(i) for i in T.shadow_prolog()] == [str(it.stmt) for it in items[:10]]
    assert [str(i) for i in T.shadow_epilog()] == [str(it.stmt) for it in items[10:21]]
    assert str(items[21].stmt) == "ret"


def test_nested_calls_balance_shadow_stack(layout):
    src = (
        "main:\n    call a\n    ret\n"
        "a:\n    call b\n    ret\n"
        "b:\n    call c\n    ret\n"
        "c:\n    mov rax, 1\n    ret\n"
    )
    m = PolicyManifest(Policy.parse("p1,p2,p3,p4,p5"))
    res = execute(build_bundle(src, m), b"", layout)
    out = res.outcome
    assert out.status.value == "Completed"
    top = out.state.memory.read_u64(layout.shadow.base)
    assert top == 0
    # depth 4 frames were pushed at some point
    assert out.state.memory.read_u64(layout.shadow.base + 32) != 0


def test_ssa_block_of_45():
    body = "".join("    add rax, 1\n" for _ in range(45))
    p = instrument_ssa(parse_program("main:\n" + body), 20)
    items = p.function("main").items
    checks = [i for i, it in enumerate(items) if it.guard is GuardKind.SSA_CHECK]
    assert len(checks) == 3
    # positions in terms of original instructions before each check
    originals_before = [sum(1 for it in items[:c] if it.guard is None) for c in checks]
    assert originals_before == [0, 20, 40]


def test_ssa_empty_function():
    p = instrument_ssa(parse_program("f:\nmain:\n    ret\n"), 20)
    items = p.function("f").items
    assert len(items) == 1 and items[0].guard is GuardKind.SSA_CHECK


def _oracle_ssa_sites(src: str, k: int) -> int:
    """Independent partitioner: leaders are function starts, labels and instructions after jmp/jcc/ret/hlt."""
    total = 0
    for fn in parse_program(src).functions:
        blocks, cur = [], 0
        prev = None
        for it in fn.items:
            insn = it.insn
            if cur and (it.labels or (prev is not None and prev.mnemonic in
                                      ("jmp", "ret", "hlt", "ja", "jae", "jb", "jbe", "je", "jne", "jg", "jl"))):
                blocks.append(cur)
                cur = 0
            cur += 1
            prev = insn
        if cur or not blocks:
            blocks.append(cur)
        total += sum(1 + max(n - 1, 0) // k for n in blocks)
    return total


@pytest.mark.parametrize("name", kernel_names())
@pytest.mark.parametrize("k", [1, 3, 20])
def test_ssa_site_count_matches_oracle(name, k):
    src = kernel_source(name)
    p = instrument_ssa(parse_program(src), k)
    sites = sum(1 for fn in p.functions for it in fn.items if it.guard is GuardKind.SSA_CHECK)
    assert sites == _oracle_ssa_sites(src, k)


def test_link_runtime_support_gating():
    src = kernel_source("dispatch")
    p5 = build_bundle(src, PolicyManifest(Policy.parse("p1,p5")))
    names = {s.name for s in p5.symbols if s.defined}
    assert "CFICheck" in names and "ssa_check" not in names
    cfi = p5.symbol("CFICheck").value
    found = {f.value for off, f in find_placeholders(p5.code) if off >= cfi}
    assert {"branch_target_list", "branch_target_count"} <= found
    p6 = build_bundle(src, PolicyManifest(Policy.parse("p6")))
    assert "ssa_check" in {s.name for s in p6.symbols}


@pytest.mark.parametrize("pol", ["p1", "p2", "p3", "p4", "p5", "p6", "p1,p2,p3,p4,p5,p6"])
def test_selected_placeholders_present(pol):
    m = PolicyManifest(Policy.parse(pol))
    code = build_bundle(kernel_source("reverse"), m).code
    found = {f for _, f in find_placeholders(code)}
    for policy, fields in POLICY_PLACEHOLDERS.items():
        if m.has(policy):
            assert set(fields) <= found


def test_pass_order_enforced():
    p = parse_program("main:\n    mov [rdi], rax\n    ret\n")
    with pytest.raises(PassOrderError):
        instrument_stores(instrument_rsp(p))
    with pytest.raises(PassOrderError):
        instrument_stores(instrument_stores(p))


def test_link_errors():
    with pytest.raises(DuplicateSymbol):
        link(parse_program("main:\n    ret\nCFICheck:\n    ret\n"), PolicyManifest())
    with pytest.raises(MissingRuntimeSupport):
        link(parse_program("main:\n    ret\n"), PolicyManifest(Policy.P1))
    with pytest.raises(MissingRuntimeSupport):
        link(parse_program("main:\n    call ssa_check\n    ret\n"), PolicyManifest())


def test_flags_live_across_guard_is_refused():
    with pytest.raises(FlagsLiveAcrossGuard):
        instrument_stores(parse_program("main:\n    cmp rax, rbx\n    mov [rdi], rax\n    je .x\n.x:\n    ret\n"))


def test_instrument_applies_in_order():
    p = instrument(parse_program(kernel_source("fib")), PolicyManifest(Policy.parse("p1,p2,p5,p6")))
    assert p.applied == ("stores", "rsp", "cfi", "shadow", "ssa")


def test_writes_memory_excludes_push():
    assert not parse_instruction("push rax").writes_memory()
    assert parse_instruction("mov [rax], rbx").writes_memory()
