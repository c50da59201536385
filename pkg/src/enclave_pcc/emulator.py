"""Instruction-level executor for loaded images with permissioned memory."""
from __future__ import annotations

import bisect
import enum
import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Protocol

from . import templates as T
from .isa import DecodeError, Instruction, decode_instruction
from .isa.model import REGISTERS
from .loader import ANNOTATION_ONLY, PAGE, EnclaveLayout, LoadedImage, Region

MASK64 = 0xFFFFFFFFFFFFFFFF
SIGN64 = 1 << 63
RETURN_SENTINEL = "return_sentinel"


class Status(enum.Enum):
    Completed = "Completed"
    Violation = "Violation"
    Fault = "Fault"
    StepLimit = "StepLimit"


class FaultKind(str, enum.Enum):
    GuardPage = "GuardPage"
    Perm = "Perm"
    Unmapped = "Unmapped"
    Exec = "Exec"
    Undecodable = "Undecodable"


class EmuFault(Exception):
    def __init__(self, kind: str, addr: int, detail: str = ""):
        super().__init__(f"{kind} at {addr:#x} {detail}".strip())
        self.kind = kind
        self.addr = addr


class Channel(Protocol):
    """Where ocall_send / ocall_recv go; the gateway implements this."""

    def send(self, data: bytes) -> None: ...

    def recv(self, maxlen: int) -> bytes: ...


class NullChannel:
    """Accepts every send; recv returns nothing."""

    def send(self, data: bytes) -> None:
        pass

    def recv(self, maxlen: int) -> bytes:
        return b""


@dataclass(frozen=True)
class WriteRecord:
    step: int
    addr: int
    length: int
    trusted: bool


class Memory:
    """Sparse page store with per-region permissions."""

    def __init__(self, regions: Iterable[Region]):
        self.regions = sorted(regions, key=lambda r: r.base)
        self._starts = [r.base for r in self.regions]
        self.pages: dict[int, bytearray] = {}

    def region_at(self, addr: int) -> Region | None:
        i = bisect.bisect_right(self._starts, addr) - 1
        if i >= 0:
            r = self.regions[i]
            if addr < r.end:
                return r
        return None

    def check(self, addr: int, length: int, perm: str, trusted: bool = False) -> Region:
        r = self.region_at(addr)
        if r is None:
            raise EmuFault(FaultKind.Unmapped, addr)
        if addr + length > r.end:
            # access straddles two regions; check the far end as well
            self.check(r.end, addr + length - r.end, perm, trusted)
        if perm not in r.perms:
            kind = FaultKind.GuardPage if r.name.startswith("stack_guard") else FaultKind.Perm
            raise EmuFault(kind, addr, f"{perm} in {r.name}")
        if perm == "w" and r.name in ANNOTATION_ONLY and not trusted:
            raise EmuFault(FaultKind.Perm, addr, f"untrusted write to {r.name}")
        return r

    def load(self, addr: int, data: bytes) -> None:
        """Unchecked write used by the loader and the simulated hardware."""
        pos = 0
        while pos < len(data):
            pno, po = divmod(addr + pos, PAGE)
            page = self.pages.get(pno)
            if page is None:
                page = self.pages[pno] = bytearray(PAGE)
            take = min(len(data) - pos, PAGE - po)
            page[po:po + take] = data[pos:pos + take]
            pos += take

    def peek(self, addr: int, length: int) -> bytes:
        out = bytearray()
        while length > 0:
            pno, po = divmod(addr, PAGE)
            take = min(length, PAGE - po)
            page = self.pages.get(pno)
            out += page[po:po + take] if page is not None else bytes(take)
            addr += take
            length -= take
        return bytes(out)

    def read_u64(self, addr: int) -> int:
        pno, po = divmod(addr, PAGE)
        page = self.pages.get(pno)
        if po <= PAGE - 8:
            return int.from_bytes(page[po:po + 8], "little") if page is not None else 0
        return int.from_bytes(self.peek(addr, 8), "little")

    def write_u64(self, addr: int, value: int) -> None:
        pno, po = divmod(addr, PAGE)
        if po <= PAGE - 8:
            page = self.pages.get(pno)
            if page is None:
                page = self.pages[pno] = bytearray(PAGE)
            page[po:po + 8] = value.to_bytes(8, "little")
        else:
            self.load(addr, value.to_bytes(8, "little"))

    def digest(self, region: Region) -> str:
        h = hashlib.sha256()
        for pno in sorted(p for p in self.pages if region.base <= p * PAGE < region.end):
            page = self.pages[pno]
            if any(page):
                h.update(pno.to_bytes(8, "little"))
                h.update(page)
        return h.hexdigest()


@dataclass
class EmuState:
    gprs: list[int]
    rip: int
    memory: Memory
    layout: EnclaveLayout
    cf: int = 0
    zf: int = 0
    sf: int = 0
    of: int = 0
    steps: int = 0
    aex_schedule: Counter = field(default_factory=Counter)

    @property
    def ssa(self) -> tuple[int, int, int]:
        """(marker, aex_count, last_checked) read from the SSA page."""
        base = self.layout.ssa.base
        m = self.memory
        return (
            m.read_u64(base + T.SSA_MARKER_OFFSET),
            m.read_u64(base + T.SSA_COUNT_OFFSET),
            m.read_u64(base + T.SSA_LAST_OFFSET),
        )

    def reg(self, name: str) -> int:
        num, width = REGISTERS[name]
        v = self.gprs[num]
        return v if width == 64 else v & 0xFFFFFFFF


@dataclass
class ExecutionOutcome:
    status: Status
    steps: int
    code: int | None = None
    fault: str | None = None
    fault_addr: int | None = None
    outputs: list[bytes] = field(default_factory=list)
    data_digest: str = ""
    write_log: list[WriteRecord] = field(default_factory=list)
    state: EmuState | None = None

    @property
    def exit_code(self) -> int:
        """Process exit code used by the command-line runner."""
        return {Status.Completed: 0, Status.Violation: 3, Status.Fault: 4, Status.StepLimit: 5}[self.status]

    def writes_outside(self, lo: int, hi: int, untrusted_only: bool = True) -> list[WriteRecord]:
        return [
            w for w in self.write_log
            if (not untrusted_only or not w.trusted) and not (lo <= w.addr and w.addr + w.length <= hi)
        ]

    def describe(self) -> str:
        if self.status is Status.Violation:
            return f"Violation({self.code:#x}) after {self.steps} steps"
        if self.status is Status.Fault:
            where = f" at {self.fault_addr:#x}" if self.fault_addr is not None else ""
            return f"Fault({self.fault}){where} after {self.steps} steps"
        return f"{self.status.value} after {self.steps} steps"


class _Halt(Exception):
    def __init__(self, status: Status, code: int | None = None):
        self.status = status
        self.code = code


def _signed(v: int) -> int:
    return v - (1 << 64) if v & SIGN64 else v


class Emulator:
    def __init__(
        self,
        img: LoadedImage,
        data: bytes = b"",
        aex_schedule: Iterable[int] = (),
        step_limit: int = 10_000_000,
        channel: Channel | None = None,
        trusted: Iterable[tuple[int, int]] = (),
    ):
        layout = img.layout
        self.img = img
        self.layout = layout
        self.step_limit = step_limit
        self.channel = channel or NullChannel()
        self.outputs: list[bytes] = []
        self.write_log: list[WriteRecord] = []
        self._trusted = sorted(trusted)
        self._trusted_starts = [a for a, _ in self._trusted]
        self._cache: dict[int, tuple[Instruction, bool]] = {}
        mem = Memory(layout.regions)
        self.memory = mem

        data_region = layout.data
        if len(data) > data_region.size // 2:
            raise ValueError("input larger than half the data region")
        mem.load(img.base, img.code)
        mem.load(data_region.base, data)
        table = layout.target_table.base
        mem.write_u64(table, len(img.resolved_targets))
        for i, addr in enumerate(img.resolved_targets):
            mem.write_u64(table + T.TARGET_TABLE_HEADER + 8 * i, addr)
        mem.write_u64(layout.ssa.base + T.SSA_MARKER_OFFSET, T.SSA_MARKER)

        gprs = [0] * 16
        stack_top = layout.stack.end
        gprs[4] = stack_top - 8
        mem.write_u64(stack_top - 8, layout.stub(RETURN_SENTINEL))
        gprs[7] = data_region.base
        gprs[6] = len(data)
        gprs[2] = data_region.base + -(-max(len(data), 1) // PAGE) * PAGE
        self.state = EmuState(gprs, img.entry, mem, layout, aex_schedule=Counter(aex_schedule))
        self.exit_range = None
        exit_addr = img.symbols.get(T.EXIT_LABEL)
        if exit_addr is not None:
            self.exit_range = (exit_addr, exit_addr + len(T.instantiate(T.exit_stub(), exit_addr, {})))
        self.stubs = {
            layout.stub(T.OCALL_SEND): self._ocall_send,
            layout.stub(T.OCALL_RECV): self._ocall_recv,
            layout.stub(RETURN_SENTINEL): self._return_sentinel,
        }

    # -- memory through permission checks -------------------------------------
    def _is_trusted(self, pc: int) -> bool:
        i = bisect.bisect_right(self._trusted_starts, pc) - 1
        return i >= 0 and pc < self._trusted[i][1]

    def _read(self, addr: int) -> int:
        addr &= MASK64
        self.memory.check(addr, 8, "r")
        return self.memory.read_u64(addr)

    def _write(self, addr: int, value: int, trusted: bool) -> None:
        addr &= MASK64
        self.memory.check(addr, 8, "w", trusted)
        self.write_log.append(WriteRecord(self.state.steps, addr, 8, trusted))
        self.memory.write_u64(addr, value & MASK64)

    def _push(self, value: int) -> None:
        s = self.state
        rsp = (s.gprs[4] - 8) & MASK64
        self._write(rsp, value, False)
        s.gprs[4] = rsp

    def _pop(self) -> int:
        s = self.state
        value = self._read(s.gprs[4])
        s.gprs[4] = (s.gprs[4] + 8) & MASK64
        return value

    # -- operands --------------------------------------------------------------
    def _ea(self, op) -> int:
        g = self.state.gprs
        addr = g[REGISTERS[op.base][0]] + op.disp
        if op.index is not None:
            addr += g[REGISTERS[op.index][0]] * op.scale
        return addr & MASK64

    def _get(self, op) -> int:
        kind = op.kind
        if kind == "reg":
            num, width = REGISTERS[op.reg]
            v = self.state.gprs[num]
            return v if width == 64 else v & 0xFFFFFFFF
        if kind == "imm":
            return op.imm & MASK64
        return self._read(self._ea(op))

    def _set(self, op, value: int, trusted: bool) -> None:
        if op.kind == "reg":
            num, width = REGISTERS[op.reg]
            self.state.gprs[num] = value & (MASK64 if width == 64 else 0xFFFFFFFF)
        else:
            self._write(self._ea(op), value, trusted)

    def _logic_flags(self, r: int) -> None:
        s = self.state
        s.cf = s.of = 0
        s.zf = int(r == 0)
        s.sf = r >> 63

    # -- ocall stubs -------------------------------------------------------------
    def _simulate_ret(self) -> None:
        self.state.rip = self._pop()

    def _ocall_send(self) -> None:
        g = self.state.gprs
        buf, length = g[7], g[6]
        if length:
            self.memory.check(buf, length, "r")
        payload = self.memory.peek(buf, length)
        self.channel.send(payload)
        self.outputs.append(payload)
        g[0] = 0
        self._simulate_ret()

    def _ocall_recv(self) -> None:
        g = self.state.gprs
        buf, maxlen = g[7], g[6]
        lo, hi = self.layout.window
        if maxlen and not (lo <= buf and buf + maxlen <= hi):
            raise EmuFault(FaultKind.Perm, buf, "recv buffer outside the writable window")
        data = self.channel.recv(maxlen)[:maxlen]
        if data:
            self.memory.check(buf, len(data), "w")
            self.write_log.append(WriteRecord(self.state.steps, buf, len(data), False))
            self.memory.load(buf, data)
        g[0] = len(data)
        self._simulate_ret()

    def _return_sentinel(self) -> None:
        raise _Halt(Status.Completed)

    # -- execution --------------------------------------------------------------
    def _fetch(self, rip: int) -> tuple[Instruction, bool]:
        cached = self._cache.get(rip)
        if cached is not None:
            return cached
        r = self.memory.region_at(rip)
        img = self.img
        if r is None or "x" not in r.perms or not (img.base <= rip < img.end):
            raise EmuFault(FaultKind.Exec, rip)
        try:
            insn = decode_instruction(img.code, rip - img.base, img.base)
        except DecodeError as exc:
            raise EmuFault(FaultKind.Undecodable, rip, str(exc)) from None
        entry = (insn, self._is_trusted(rip))
        self._cache[rip] = entry
        return entry

    def _inject_aex(self, count: int) -> None:
        base = self.layout.ssa.base
        mem = self.memory
        mem.write_u64(base + T.SSA_COUNT_OFFSET, mem.read_u64(base + T.SSA_COUNT_OFFSET) + count)
        mem.write_u64(base + T.SSA_MARKER_OFFSET, 0)

    def step(self) -> None:
        s = self.state
        pending = s.aex_schedule.get(s.steps)
        if pending:
            self._inject_aex(pending)
        stub = self.stubs.get(s.rip)
        if stub is not None:
            stub()
            s.steps += 1
            return
        insn, trusted = self._fetch(s.rip)
        next_rip = s.rip + insn.length
        m = insn.mnemonic
        ops = insn.operands
        g = s.gprs
        if m == "mov" or m == "movabs":
            self._set(ops[0], self._get(ops[1]), trusted)
        elif m == "lea":
            self._set(ops[0], self._ea(ops[1]), trusted)
        elif m in ("add", "sub", "cmp"):
            a = self._get(ops[0])
            b = self._get(ops[1])
            if m == "add":
                full = a + b
                r = full & MASK64
                s.cf = int(full > MASK64)
                s.of = int((a & SIGN64) == (b & SIGN64) and (r & SIGN64) != (a & SIGN64))
            else:
                r = (a - b) & MASK64
                s.cf = int(a < b)
                s.of = int((a & SIGN64) != (b & SIGN64) and (r & SIGN64) != (a & SIGN64))
            s.zf = int(r == 0)
            s.sf = r >> 63
            if m != "cmp":
                self._set(ops[0], r, trusted)
        elif m == "and" or m == "xor":
            a = self._get(ops[0])
            b = self._get(ops[1])
            r = a & b if m == "and" else a ^ b
            self._logic_flags(r)
            self._set(ops[0], r, trusted)
        elif m == "shl" or m == "shr":
            a = self._get(ops[0])
            c = ops[1].imm & 63
            if c:
                if m == "shl":
                    r = (a << c) & MASK64
                    s.cf = (a >> (64 - c)) & 1
                    s.of = (r >> 63) ^ s.cf
                else:
                    r = a >> c
                    s.cf = (a >> (c - 1)) & 1
                    s.of = a >> 63
                s.zf = int(r == 0)
                s.sf = r >> 63
                self._set(ops[0], r, trusted)
        elif m == "push":
            self._push(self._get(ops[0]))
        elif m == "pop":
            value = self._pop()
            self._set(ops[0], value, trusted)
        elif m == "pushfq":
            self._push(s.cf | 2 | (s.zf << 6) | (s.sf << 7) | (s.of << 11))
        elif m == "popfq":
            f = self._pop()
            s.cf, s.zf, s.sf, s.of = f & 1, (f >> 6) & 1, (f >> 7) & 1, (f >> 11) & 1
        elif m == "call":
            target = self._get(ops[0]) if not ops[0].is_imm else ops[0].imm
            self._push(next_rip)
            next_rip = target
        elif m == "jmp":
            next_rip = ops[0].imm if ops[0].is_imm else self._get(ops[0])
        elif m == "ret":
            next_rip = self._pop()
        elif m in _CONDITIONS:
            if _CONDITIONS[m](s):
                next_rip = ops[0].imm
        elif m == "hlt":
            s.steps += 1
            if self.exit_range is not None and self.exit_range[0] <= s.rip < self.exit_range[1]:
                raise _Halt(Status.Violation, g[7] & 0xFFFFFFFF)
            raise _Halt(Status.Completed)
        elif m == "nop":
            pass
        else:  # pragma: no cover - decoder only yields known mnemonics
            raise EmuFault(FaultKind.Undecodable, s.rip, m)
        s.rip = next_rip & MASK64
        s.steps += 1

    def run(self) -> ExecutionOutcome:
        s = self.state
        status, code, fault, fault_addr = Status.StepLimit, None, None, None
        if not self.img.code:
            status = Status.Completed
        else:
            try:
                while s.steps < self.step_limit:
                    self.step()
            except _Halt as h:
                status, code = h.status, h.code
            except EmuFault as f:
                status, fault, fault_addr = Status.Fault, str(getattr(f.kind, "value", f.kind)), f.addr
            except Exception as exc:
                # gateway quota and mode errors surface as faults named after the error
                if not hasattr(exc, "fault_kind"):
                    raise
                status, fault = Status.Fault, exc.fault_kind
        return ExecutionOutcome(
            status, s.steps, code, fault, fault_addr, list(self.outputs),
            self.memory.digest(self.layout.data), self.write_log, s,
        )


_CONDITIONS = {
    "ja": lambda s: not s.cf and not s.zf,
    "jae": lambda s: not s.cf,
    "jb": lambda s: s.cf,
    "jbe": lambda s: s.cf or s.zf,
    "je": lambda s: s.zf,
    "jne": lambda s: not s.zf,
    "jg": lambda s: not s.zf and s.sf == s.of,
    "jl": lambda s: s.sf != s.of,
}


def run(
    img: LoadedImage,
    data: bytes = b"",
    aex_schedule: Iterable[int] = (),
    step_limit: int = 10_000_000,
    channel: Channel | None = None,
    report=None,
) -> ExecutionOutcome:
    """Execute a rewritten image; ``report`` supplies the trusted guard ranges."""
    trusted = report.trusted_ranges(img.base) if report is not None else ()
    return Emulator(img, data, aex_schedule, step_limit, channel, trusted).run()


def run_uninstrumented(
    program,
    layout: EnclaveLayout | None = None,
    data: bytes = b"",
    step_limit: int = 10_000_000,
    channel: Channel | None = None,
) -> ExecutionOutcome:
    """Reference run of a program (source text or ``Program``) linked without any guards."""
    from .bundle import PolicyManifest
    from .instrument import Program, link, parse_program
    from .loader import build_layout, load, rewrite_immediates
    from .verifier import verify

    layout = layout or build_layout()
    if not isinstance(program, Program):
        program = parse_program(program)
    if not program.functions:
        return ExecutionOutcome(Status.Completed, 0, data_digest=Memory(layout.regions).digest(layout.data))
    manifest = PolicyManifest()
    img = load(link(program, manifest), layout)
    report = verify(img, manifest)
    if report.accepted:
        img = rewrite_immediates(img, report)
    return run(img, data, (), step_limit, channel, report)


def read_schedule(text: str) -> list[int]:
    """Parse an AEX schedule: one decimal step index per line; repeats inject several AEXes."""
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(int(line))
    return out
