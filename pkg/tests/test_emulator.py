from __future__ import annotations

import pytest
from helpers import check_windows, spread, trace, widest_window

from enclave_pcc import templates as T
from enclave_pcc.bundle import Policy, PolicyManifest
from enclave_pcc.consumer import admit, execute
from enclave_pcc.corpus import adversarial_source, kernel_names, kernel_source, sample_input
from enclave_pcc.emulator import Emulator, FaultKind, Status, read_schedule, run, run_uninstrumented
from enclave_pcc.instrument import build_bundle

ALL = Policy.parse("p1,p2,p3,p4,p5,p6")
P1_P5 = Policy.parse("p1,p2,p3,p4,p5")


def _run(src, layout, m=PolicyManifest(), data=b"", **kw):
    res = execute(build_bundle(src, m), data, layout, **kw)
    assert res.accepted, res.report.to_text()
    return res.outcome


def test_store_to_data(layout):
    out = _run("main:\n    movabs rax, 0x1122334455667788\n    mov [rdi], rax\n    ret\n", layout, PolicyManifest(Policy.P1))
    assert out.status is Status.Completed
    assert out.state.memory.read_u64(layout.data.base) == 0x1122334455667788


def test_guard_page_fault(small_layout):
    out = _run(adversarial_source("stack_overflow"), small_layout, step_limit=100_000)
    assert out.status is Status.Fault and out.fault == FaultKind.GuardPage.value
    guard = small_layout.region("stack_guard_low")
    assert guard.base <= out.fault_addr < guard.end
    lo, hi = small_layout.stack.base, small_layout.stack.end
    assert all(lo <= w.addr and w.addr + w.length <= hi for w in out.write_log)


def test_aex_injection_updates_ssa(layout):
    img, report = admit(build_bundle("main:\n    nop\n    nop\n    ret\n", PolicyManifest()), layout)
    em = Emulator(img, b"", aex_schedule=[1, 1, 2])
    marker, count, _ = em.state.ssa
    assert marker == T.SSA_MARKER and count == 0
    em.step()
    em.step()
    marker, count, _ = em.state.ssa
    assert count == 2 and marker != T.SSA_MARKER
    em.step()
    assert em.state.ssa[1] == 3


def test_oob_store_violates_before_effect(layout):
    out = _run(adversarial_source("oob_store"), layout, PolicyManifest(P1_P5))
    assert out.status is Status.Violation and out.code == 0xFFFFFFFF
    target = layout.data.base - 8
    assert not any(w.addr == target for w in out.write_log)
    assert out.state.memory.read_u64(target) == 0


@pytest.mark.parametrize("threshold", [3, 22])
def test_aex_threshold(layout, threshold):
    m = PolicyManifest(ALL, aex_threshold=threshold)
    b = build_bundle(adversarial_source("long_block"), m)
    data = (5).to_bytes(8, "little")
    w = widest_window(b, data, layout)
    below = execute(b, data, layout, aex_schedule=spread(w, threshold - 1)).outcome
    at = execute(b, data, layout, aex_schedule=spread(w, threshold)).outcome
    assert below.status is Status.Completed
    assert at.status is Status.Violation and at.code == 0xFFFFFFFF


def test_aex_spread_across_checks_is_tolerated(layout):
    m = PolicyManifest(ALL)
    b = build_bundle(adversarial_source("long_block"), m)
    data = (5).to_bytes(8, "little")
    windows = check_windows(b, data, layout)
    assert len(windows) >= 2
    schedule = spread(windows[0], 15) + spread(windows[1], 15)
    assert execute(b, data, layout, aex_schedule=schedule).outcome.status is Status.Completed


def test_empty_program(layout):
    out = run_uninstrumented("", layout)
    assert out.status is Status.Completed and out.steps == 0


@pytest.mark.parametrize("name", kernel_names())
def test_determinism(layout, name):
    b = build_bundle(kernel_source(name), PolicyManifest(ALL))
    data = sample_input(name)
    a, c = execute(b, data, layout).outcome, execute(b, data, layout).outcome
    assert (a.status, a.steps, a.data_digest, a.outputs) == (c.status, c.steps, c.data_digest, c.outputs)


def test_off_list_target_never_reached(layout):
    b = build_bundle(adversarial_source("off_list_jump"), PolicyManifest(P1_P5))
    img, rips, em = trace(b, b"", layout)
    off_list = {img.symbols[n] + 1 for n in img.symbols if not n.startswith((".", "__"))} - set(img.resolved_targets)
    outcome = execute(b, b"", layout).outcome
    assert outcome.status is Status.Violation
    listed_plus_one = {a + 1 for a in img.resolved_targets}
    assert not any(rip in listed_plus_one for _, rip in rips)
    assert off_list  # the kernel aims one byte past a listed entry


def test_untrusted_store_to_shadow_faults(layout):
    src = f"main:\n    movabs rax, {layout.shadow.base:#x}\n    mov [rax], rdi\n    ret\n"
    out = _run(src, layout)
    assert out.status is Status.Fault and out.fault == FaultKind.Perm.value


def test_execute_outside_code_faults(layout):
    out = _run("main:\n    jmp rdi\n", layout)
    assert out.status is Status.Fault and out.fault == FaultKind.Exec.value


def test_step_limit(layout):
    out = _run("main:\n.l:\n    jmp .l\n", layout, step_limit=1000)
    assert out.status is Status.StepLimit and out.steps == 1000


def test_exit_codes(layout):
    assert _run("main:\n    ret\n", layout).exit_code == 0
    assert _run(adversarial_source("oob_store"), layout, PolicyManifest(Policy.P1)).exit_code == 3
    assert _run("main:\n    jmp rdi\n", layout).exit_code == 4
    assert _run("main:\n.l:\n    jmp .l\n", layout, step_limit=10).exit_code == 5


def test_uninstrumented_matches_instrumented(layout):
    src, data = kernel_source("prefix_sum"), sample_input("prefix_sum")
    ref = run_uninstrumented(src, layout, data)
    out = _run(src, layout, PolicyManifest(ALL), data)
    assert ref.data_digest == out.data_digest and ref.outputs == out.outputs
    assert out.steps > ref.steps


def test_sends_reach_channel(layout):
    got = []

    class Chan:
        def send(self, data):
            got.append(data)

        def recv(self, maxlen):
            return b"hello"

    src = kernel_source("echo_recv")
    img, report = admit(build_bundle(src, PolicyManifest(ALL)), layout)
    out = run(img, b"", (), 100_000, Chan(), report)
    assert out.status is Status.Completed
    assert got == [(5).to_bytes(8, "little") + b"hello"]


def test_read_schedule():
    assert read_schedule("# header\n5\n5\n\n12  # two at 5\n") == [5, 5, 12]
