"""The nine acceptance criteria, each at its stated tolerance."""
from __future__ import annotations

import sys
import time

import pytest
from helpers import check_windows, spread

from enclave_pcc import cli
from enclave_pcc import gateway as G
from enclave_pcc.bundle import (
    PLACEHOLDERS, POLICY_PLACEHOLDERS, Mode, Policy, PolicyManifest, encode_bundle, find_placeholders,
)
from enclave_pcc.consumer import BootstrapEnclave, ServiceConfig, admit, execute
from enclave_pcc.corpus import (
    RECV_KERNELS, adversarial_snippets, adversarial_source, adversarial_variant, kernel_names, kernel_source,
    sample_input,
)
from enclave_pcc.emulator import FaultKind, Status, run_uninstrumented
from enclave_pcc.instrument import build_bundle, instrument, parse_program
from enclave_pcc.mutate import MUTATION_KINDS, mutants
from enclave_pcc.templates import GuardKind

ALL = Policy.parse("p1,p2,p3,p4,p5,p6")
P1_P5 = Policy.parse("p1,p2,p3,p4,p5")
LADDER = [pol for _, pol in cli.GRANULARITIES]


class _Chan:
    """Plain host channel for kernels that call ocall_recv."""

    def __init__(self, messages=(b"ping",)):
        self.messages = list(messages)
        self.sent: list[bytes] = []

    def send(self, data):
        self.sent.append(data)

    def recv(self, maxlen):
        return self.messages.pop(0)[:maxlen]


def test_criterion_1_verifier_soundness(criterion, tmp_path, capsys):
    with criterion(1, "catcheck accepts valid bundles, rejects single-edit mutants") as c:
        start = time.perf_counter()
        valid, bad = [], []
        for name in kernel_names():
            for pol in (P1_P5, ALL):
                m = PolicyManifest(pol)
                valid.append(build_bundle(kernel_source(name), m))
                bad.extend(mutants(kernel_source(name), m, per_kind=1))
        assert len(valid) >= 20 and len(bad) >= 100
        assert {x.kind for x in bad} == set(MUTATION_KINDS)
        path = tmp_path / "b.catb"
        accepted = 0
        for b in valid:
            path.write_bytes(encode_bundle(b))
            accepted += cli.catcheck([str(path)]) == 0
        rejected = 0
        escaped = []
        for x in bad:
            path.write_bytes(encode_bundle(x.bundle))
            if cli.catcheck([str(path)]) == 2:
                rejected += 1
            else:
                escaped.append(f"{x.kind} {x.detail}")
        capsys.readouterr()
        elapsed = time.perf_counter() - start
        c.detail = f"{accepted}/{len(valid)} valid accepted, {rejected}/{len(bad)} mutants rejected, {elapsed:.1f}s"
        assert accepted == len(valid)
        assert not escaped, escaped
        assert elapsed < 60


def _confinement_cases(layout):
    for name in kernel_names():
        for label, snippet in adversarial_snippets(layout).items():
            yield f"{name}/{label}", adversarial_variant(kernel_source(name), snippet)
    for name in ("oob_store", "off_list_jump", "ret_corrupt"):
        yield name, adversarial_source(name)


def test_criterion_2_runtime_confinement(criterion, layout, tmp_path, capsys):
    with criterion(2, "adversarial variants abort with 0xFFFFFFFF, no untrusted writes outside the window") as c:
        lo, hi = layout.window
        bundle, log = tmp_path / "v.catb", tmp_path / "w.log"
        failures, runs = [], 0
        for label, src in _confinement_cases(layout):
            bundle.write_bytes(encode_bundle(build_bundle(src, PolicyManifest(P1_P5))))
            code = cli.catrun([str(bundle), "--require", "p1,p2,p3,p4,p5", "--write-log", str(log)])
            out = capsys.readouterr().out
            outside = [
                line for line in log.read_text().splitlines()
                if not (lo <= int(line.split()[1], 16) and int(line.split()[1], 16) + int(line.split()[2]) <= hi)
            ]
            runs += 1
            if code != 3 or "violation code 0xffffffff" not in out or outside:
                failures.append((label, code, outside[:2]))
        c.detail = f"{runs - len(failures)}/{runs} variants confined"
        assert runs >= 100
        assert not failures, failures


def test_criterion_3_aex_threshold(criterion, layout):
    with criterion(3, "21 AEXes between checks complete, 22 abort (k=20, threshold=22)") as c:
        m = PolicyManifest(ALL)
        assert (m.ssa_stride_k, m.aex_threshold) == (20, 22)
        b = build_bundle(adversarial_source("long_block"), m)
        data = (5).to_bytes(8, "little")
        windows = check_windows(b, data, layout)
        assert windows
        for w in windows:
            below = execute(b, data, layout, aex_schedule=spread(w, 21)).outcome
            at = execute(b, data, layout, aex_schedule=spread(w, 22)).outcome
            assert below.status is Status.Completed, (w, below.describe())
            assert at.status is Status.Violation and at.code == 0xFFFFFFFF, (w, at.describe())
        c.detail = f"exact at all {len(windows)} check intervals"


def test_criterion_4_output_quotas(criterion, layout):
    with criterion(4, "CDaaS quota and 8-bit budget enforced, constant frame length") as c:
        key = bytes(32)
        cdaas = PolicyManifest(P1_P5, mode=Mode.CDAAS)
        assert cdaas.max_sends == 1 and cdaas.max_output_bits == 8
        twice = "main:\n    mov rsi, 1\n    call ocall_send\n    mov rsi, 1\n    call ocall_send\n    ret\n"
        s = G.Session.for_manifest(key, cdaas)
        out = execute(build_bundle(twice, cdaas), b"", layout, channel=s).outcome
        assert out.status is Status.Fault and out.fault == "SendQuotaExceeded" and len(s.emitted) == 1

        wide = "main:\n    mov rsi, 2\n    call ocall_send\n    ret\n"
        s = G.Session.for_manifest(key, cdaas)
        out = execute(build_bundle(wide, cdaas), b"", layout, channel=s).outcome
        assert out.status is Status.Fault and out.fault == "OutputBudgetExceeded" and s.emitted == []

        lengths = set()
        ccaas = PolicyManifest(P1_P5)
        for n in (0, 1, 16, 256):
            s = G.Session.for_manifest(key, ccaas)
            G.ocall_send(bytes(n), s)
            lengths.add(len(s.emitted[0]))
        for data in (b"", bytes(8), bytes(range(200))):
            s = G.Session.for_manifest(key, ccaas)
            execute(build_bundle(kernel_source("echo_digest"), ccaas), data, layout, channel=s)
            lengths |= {len(ct) for ct in s.emitted}
        assert lengths == {ccaas.pad_length + G.OVERHEAD}
        c.detail = f"all frames {lengths.pop()} bytes"


def _expected_fields(source: str, m: PolicyManifest) -> set:
    """Placeholders the selected policies put into this program (P2 only guards explicit rsp writes)."""
    prog = instrument(parse_program(source), m)
    has_rsp_guard = any(it.guard is GuardKind.RSP for fn in prog.functions for it in fn.items)
    want = set()
    for policy, fields in POLICY_PLACEHOLDERS.items():
        if m.has(policy) and (policy is not Policy.P2 or has_rsp_guard):
            want |= set(fields)
    return want


def test_criterion_5_placeholder_hygiene(criterion, layout):
    with criterion(5, "selected placeholders present before rewrite, none after") as c:
        seen, images = set(), 0
        for name in kernel_names():
            for pol in LADDER:
                m = PolicyManifest(pol)
                src = kernel_source(name)
                b = build_bundle(src, m)
                before = {f for _, f in find_placeholders(b.code)}
                assert _expected_fields(src, m) <= before, (name, pol)
                seen |= before
                img, report = admit(b, layout)
                assert report.accepted and img.rewritten
                raw = img.code
                for value in PLACEHOLDERS.values():
                    assert value.to_bytes(8, "little") not in raw, (name, pol, hex(value))
                images += 1
        assert seen == set(PLACEHOLDERS)
        c.detail = f"{images} images, all nine constants seen before and gone after"


def test_criterion_6_differential(criterion, layout):
    with criterion(6, "instrumented and plain runs agree on data digest and outputs") as c:
        names = kernel_names()
        assert len(names) >= 10
        for name in names:
            src, data = kernel_source(name), sample_input(name)
            ref = run_uninstrumented(src, layout, data, channel=_Chan() if name in RECV_KERNELS else None)
            assert ref.status is Status.Completed, (name, ref.describe())
            for pol in LADDER:
                chan = _Chan() if name in RECV_KERNELS else None
                out = execute(build_bundle(src, PolicyManifest(pol)), data, layout, channel=chan).outcome
                assert out.status is Status.Completed, (name, pol, out.describe())
                assert out.data_digest == ref.data_digest, (name, pol)
                assert out.outputs == ref.outputs, (name, pol)
        c.detail = f"{len(names)} kernels x {len(LADDER)} policy sets"


def test_criterion_7_overhead_trends(criterion):
    with criterion(7, "memcpy P1-P5 size overhead in [20%, 230%], dynamic overhead monotone") as c:
        start = time.perf_counter()
        rows = cli.run_bench(cli._default_kernels())
        elapsed = time.perf_counter() - start
        assert all(r.status == "ok" for r in rows), [r for r in rows if r.status != "ok"]
        memcpy = next(r for r in rows if r.kernel == "memcpy" and r.policy_set == "P1-P5")
        assert 20.0 <= memcpy.size_overhead <= 230.0
        by_kernel: dict[str, list[int]] = {}
        for r in rows:
            by_kernel.setdefault(r.kernel, []).append(r.dinsn_instrumented)
        for name, counts in by_kernel.items():
            assert len(counts) == len(LADDER)
            assert counts == sorted(counts), (name, counts)
        assert elapsed < 300
        c.detail = f"memcpy +{memcpy.size_overhead:.1f}%, {len(by_kernel)} kernels monotone, {elapsed:.1f}s"


def test_criterion_8_guard_pages(criterion, small_layout):
    with criterion(8, "stack exhaustion faults at the guard page with no write outside the stack") as c:
        for pol in (Policy.NONE, P1_P5):
            out = execute(build_bundle(adversarial_source("stack_overflow"), PolicyManifest(pol)),
                          b"", small_layout, step_limit=200_000).outcome
            assert out.status is Status.Fault and out.fault == FaultKind.GuardPage.value, out.describe()
            guard = small_layout.region("stack_guard_low")
            assert guard.base <= out.fault_addr < guard.end
            stack, shadow = small_layout.stack, small_layout.shadow
            untrusted = [w for w in out.write_log if not w.trusted]
            assert len(untrusted) >= stack.size // 8 - 8
            assert all(stack.contains(w.addr, w.length) for w in untrusted)
            # the only other writes are the monitor's own shadow-stack bookkeeping
            assert all(shadow.contains(w.addr, w.length) for w in out.write_log if w.trusted)
            if pol is Policy.NONE:
                assert not any(w.trusted for w in out.write_log)
        c.detail = f"fault at {out.fault_addr:#x} after {out.steps} steps"


def _session(manifest):
    enclave = BootstrapEnclave(ServiceConfig(required=manifest))
    client = G.Client(enclave.measurement)
    client.accept(G.Quote.from_bytes(enclave.attest(client.nonce, client.public).to_bytes()))
    return enclave, client


def _fnv_shift(data: bytes) -> int:
    mask = (1 << 64) - 1
    h = 0xCBF29CE484222325
    for i in range(len(data) // 8):
        h ^= int.from_bytes(data[8 * i:8 * i + 8], "little")
        h = (h + (h << 7)) & mask
        h ^= h >> 11
    return h


def test_criterion_9_end_to_end(criterion):
    with criterion(9, "attested upload, verify, run and decrypt over three scenarios") as c:
        m = PolicyManifest(P1_P5)
        enclave, client = _session(m)
        enclave.receive_binary(client.seal_bundle(build_bundle(kernel_source("echo_digest"), m)))
        data = bytes(range(256)) * 3
        enclave.receive_userdata(client.seal_data(data))
        result = enclave.execute()
        assert result.accepted and result.outcome.status is Status.Completed
        got = [client.open_output(ct) for ct in enclave.session.emitted]
        assert got == [_fnv_shift(data).to_bytes(8, "little") + len(data).to_bytes(8, "little")]

        m = PolicyManifest(P1_P5, mode=Mode.CDAAS)
        enclave, client = _session(m)
        enclave.receive_binary(client.seal_bundle(build_bundle(kernel_source("one_bit"), m)))
        values = [100, 30, 40, 50]
        enclave.receive_userdata(client.seal_data(b"".join(v.to_bytes(8, "little") for v in values)))
        result = enclave.execute()
        assert result.outcome.status is Status.Completed
        assert [client.open_output(ct) for ct in enclave.session.emitted] == [bytes([sum(values[1:]) > values[0]])]

        m = PolicyManifest(P1_P5)
        enclave, client = _session(m)
        sealed = bytearray(client.seal_bundle(build_bundle(kernel_source("memcpy"), m)))
        sealed[-1] ^= 0x01
        with pytest.raises(G.AuthFailure):
            enclave.receive_binary(bytes(sealed))
        assert enclave.bundle is None
        c.detail = "CCaaS digest, CDaaS one bit, tampered upload refused"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
