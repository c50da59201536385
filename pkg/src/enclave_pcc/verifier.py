"""Recursive-descent disassembly and byte-exact guard matching."""
from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field

from . import templates as T
from .bundle import PLACEHOLDER_BY_VALUE, Policy, PlaceholderField, PolicyManifest
from .isa import DecodeError, Imm, Instruction, Operand, decode_instruction, encode
from .loader import LoadedImage
from .templates import GuardKind


class ViolationKind(enum.Enum):
    MissingGuard = "MissingGuard"
    MalformedGuard = "MalformedGuard"
    TargetInsideGuard = "TargetInsideGuard"
    UndecodableInstruction = "UndecodableInstruction"
    UnverifiedIndirect = "UnverifiedIndirect"
    MissingEpilog = "MissingEpilog"
    MissingSsaCheck = "MissingSsaCheck"
    WrongPlaceholder = "WrongPlaceholder"
    OverlappingInstructions = "OverlappingInstructions"
    BadBranchTarget = "BadBranchTarget"


@dataclass(frozen=True)
class Violation:
    offset: int
    kind: ViolationKind
    detail: str = ""


@dataclass(frozen=True)
class GuardMatch:
    kind: GuardKind
    start: int
    length: int
    guarded_instruction: int | None
    slots: tuple[tuple[int, PlaceholderField], ...] = ()

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class VerificationReport:
    violations: list[Violation] = field(default_factory=list)
    coverage: frozenset[int] = frozenset()
    matches: list[GuardMatch] = field(default_factory=list)
    # byte ranges of every verified instruction, routines included
    spans: tuple[tuple[int, int], ...] = ()

    @property
    def accepted(self) -> bool:
        return not self.violations

    def kinds(self) -> set[ViolationKind]:
        return {v.kind for v in self.violations}

    def to_text(self) -> str:
        return "".join(f"{v.offset:#x} {v.kind.value}\n" for v in sorted(self.violations, key=lambda v: (v.offset, v.kind.value)))

    def trusted_ranges(self, base: int) -> list[tuple[int, int]]:
        """Absolute [start, end) ranges of annotation code and runtime routines."""
        return sorted((base + m.start, base + m.end) for m in self.matches)


def _merge(spans) -> tuple[tuple[int, int], ...]:
    out: list[list[int]] = []
    for a, b in sorted(spans):
        if out and a <= out[-1][1]:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return tuple((a, b) for a, b in out)


class _Mismatch(Exception):
    def __init__(self, kind: ViolationKind, detail: str):
        super().__init__(detail)
        self.kind = kind


def _resolve(insn: Instruction, symbols: dict[str, int]) -> Instruction:
    if not any(op.sym is not None for op in insn.operands):
        return insn
    ops = []
    for op in insn.operands:
        if op.sym is not None:
            if op.sym not in symbols:
                raise _Mismatch(ViolationKind.MalformedGuard, f"runtime symbol {op.sym} missing")
            op = Imm(symbols[op.sym])
        ops.append(op)
    return insn.with_operands(*ops)


class Verifier:
    def __init__(self, img: LoadedImage, manifest: PolicyManifest):
        self.img = img
        self.manifest = manifest
        self.code = img.code
        self.base = img.base
        self.size = len(img.code)
        self.decoded: dict[int, Instruction] = {}
        self.failed: dict[int, str] = {}
        self.violations: list[Violation] = []
        self.matches: dict[int, GuardMatch] = {}
        self.routines: dict[int, GuardMatch] = {}
        self.symbols = dict(img.symbols)
        self.decode_attempts = 0

    # -- helpers -----------------------------------------------------------
    def flag(self, offset: int, kind: ViolationKind, detail: str = "") -> None:
        self.violations.append(Violation(offset, kind, detail))

    def decode(self, offset: int) -> Instruction | None:
        if offset in self.decoded:
            return self.decoded[offset]
        if offset in self.failed:
            return None
        self.decode_attempts += 1
        try:
            insn = decode_instruction(self.code, offset, self.base)
        except DecodeError as exc:
            self.failed[offset] = str(exc)
            return None
        self.decoded[offset] = insn
        return insn

    def to_offset(self, addr: int) -> int | None:
        off = addr - self.base
        return off if 0 <= off < self.size else None

    # -- runtime routines ----------------------------------------------------
    def check_routines(self) -> None:
        known = {
            T.EXIT_LABEL: self.symbols.get(T.EXIT_LABEL),
            T.SSA_PAGE: self.img.layout.ssa.base,
        }
        for name, kind in T.ROUTINE_BY_SYMBOL.items():
            addr = self.symbols.get(name)
            if addr is None:
                continue
            off = self.to_offset(addr)
            statements = T.routine_statements(kind, self.manifest.aex_threshold)
            if off is None or known[T.EXIT_LABEL] is None:
                self.flag(0 if off is None else off, ViolationKind.MalformedGuard, f"{name} not placed in the image")
                continue
            expected = T.instantiate(statements, addr, known)
            actual = self.code[off:off + len(expected)]
            if actual != expected:
                slot_only = len(actual) == len(expected) and _differs_only_in_placeholders(actual, expected)
                kind_v = ViolationKind.WrongPlaceholder if slot_only else ViolationKind.MalformedGuard
                self.flag(off, kind_v, f"{name} body differs from the canonical routine")
                continue
            slots = tuple((off + o, f) for o, f in _placeholder_offsets(expected))
            self.routines[off] = GuardMatch(kind, off, len(expected), None, slots)

    # -- traversal -----------------------------------------------------------
    def seeds(self) -> list[int]:
        out = []
        entry = self.to_offset(self.img.entry)
        if entry is None:
            self.flag(0, ViolationKind.BadBranchTarget, "entry outside image")
        else:
            out.append(entry)
        for addr in self.img.resolved_targets:
            off = self.to_offset(addr)
            if off is None:
                self.flag(0, ViolationKind.BadBranchTarget, f"listed target {addr:#x} outside image")
            else:
                out.append(off)
        return out

    def routine_at(self, off: int) -> GuardMatch | None:
        return self.routines.get(off)

    def inside_routine(self, off: int) -> GuardMatch | None:
        for r in self.routines.values():
            if r.start <= off < r.end:
                return r
        return None

    def traverse(self, seeds: list[int]) -> None:
        work = list(seeds)
        seen: set[int] = set()
        self.call_targets: set[int] = set()
        self.jump_targets: set[int] = set()
        self.branch_sources: dict[int, list[tuple[int, str]]] = {}
        while work:
            off = work.pop()
            if off in seen:
                continue
            seen.add(off)
            if self.inside_routine(off) is not None:
                continue
            insn = self.decode(off)
            if insn is None:
                self.flag(off, ViolationKind.UndecodableInstruction, self.failed[off])
                continue
            nxt = insn.end
            if insn.is_direct_branch:
                target = insn.operands[0].imm
                toff = self.to_offset(target)
                self.branch_sources.setdefault(target, []).append((off, insn.mnemonic))
                if toff is None:
                    if not (insn.mnemonic == "call" and self._external_call_ok(target)):
                        self.flag(off, ViolationKind.BadBranchTarget, f"{insn.mnemonic} to {target:#x}")
                else:
                    (self.call_targets if insn.mnemonic == "call" else self.jump_targets).add(toff)
                    work.append(toff)
            if insn.falls_through:
                if nxt >= self.size:
                    self.flag(off, ViolationKind.UndecodableInstruction, "execution runs off the image")
                else:
                    work.append(nxt)
        self.visited = {o for o in seen if o in self.decoded and self.inside_routine(o) is None}
        self.ends = {self.decoded[o].end: o for o in self.visited}

    def _external_call_ok(self, target: int) -> bool:
        layout = self.img.layout
        return target in (layout.stub(T.OCALL_SEND), layout.stub(T.OCALL_RECV))

    def check_overlaps(self) -> None:
        offs = sorted(self.visited)
        for a, b in zip(offs, offs[1:]):
            if self.decoded[a].end > b:
                self.flag(b, ViolationKind.OverlappingInstructions)
        spans = sorted((r.start, r.end) for r in self.routines.values())
        for o in offs:
            i = bisect.bisect_right(spans, (o, float("inf"))) - 1
            if 0 <= i + 1 < len(spans) and self.decoded[o].end > spans[i + 1][0]:
                self.flag(o, ViolationKind.OverlappingInstructions, "instruction runs into a runtime routine")

    # -- guard matching ------------------------------------------------------
    def expect(self, off: int, template: list[Instruction]) -> tuple[int, tuple[tuple[int, PlaceholderField], ...]]:
        """Match ``template`` at ``off``; returns (length, slots) or raises _Mismatch."""
        pos = off
        slots = []
        for want in template:
            want = _resolve(want, self.symbols)
            got = self.decode(pos)
            if got is None:
                raise _Mismatch(ViolationKind.MalformedGuard, "undecodable inside guard")
            try:
                want_bytes = encode(want, self.base + pos)
            except Exception as exc:  # template operands are always encodable
                raise _Mismatch(ViolationKind.MalformedGuard, str(exc)) from exc
            actual = self.code[pos:pos + got.length]
            if actual != want_bytes:
                if _placeholder_only(got, want):
                    raise _Mismatch(ViolationKind.WrongPlaceholder, f"{got} != {want}")
                raise _Mismatch(ViolationKind.MalformedGuard, f"{got} != {want}")
            if want.mnemonic == "movabs" and want.operands[1].imm in PLACEHOLDER_BY_VALUE:
                slots.append((pos + 2, PLACEHOLDER_BY_VALUE[want.operands[1].imm]))
            pos += got.length
        return pos - off, tuple(slots)

    def identify(self, off: int) -> tuple[GuardKind, list[Instruction]] | None:
        a = self.decode(off)
        if a is None:
            return None
        m = a.mnemonic
        if m == "call" and a.operands[0].is_imm:
            if a.operands[0].imm == self.symbols.get(T.SSA_CHECK):
                return GuardKind.SSA_CHECK, T.ssa_call()
            return None
        if m == "mov" and a.operands[0].is_reg and a.operands[0].reg == "rdi":
            b = self.decode(a.end)
            if b is not None and b.mnemonic == "call" and b.operands[0].is_imm and b.operands[0].imm == self.symbols.get(T.CFI_CHECK):
                return GuardKind.CFI, T.cfi_guard(a.operands[1])
            return None
        if m != "push" or a.operands[0].reg not in ("r10", "r8"):
            return None
        b = self.decode(a.end)
        if b is None:
            return None
        s1 = a.operands[0].reg
        if s1 == "r10" and b.mnemonic == "movabs" and b.operands[0].reg == "r10":
            return GuardKind.RSP, T.rsp_guard()
        if b.mnemonic != "push":
            return None
        s2 = b.operands[0].reg
        c = self.decode(b.end)
        if c is None:
            return None
        if c.mnemonic == "lea" and c.operands[0].reg == s1 and (s1, s2) in (T.SCRATCH, T.SCRATCH_ALT):
            dest = _unlea(c.operands[1])
            if T.store_scratch(dest) != (s1, s2):
                return GuardKind.STORE, None  # wrong variant for this operand
            return GuardKind.STORE, T.store_guard(dest)
        if (s1, s2) == T.SCRATCH and c.mnemonic == "movabs" and c.operands[0].reg == "r10":
            d = self.decode(c.end)
            if d is not None and d.mnemonic == "add":
                return GuardKind.SHADOW_PROLOG, T.shadow_prolog()
            if d is not None and d.mnemonic == "mov":
                return GuardKind.SHADOW_EPILOG, T.shadow_epilog()
            return GuardKind.SHADOW_PROLOG, None
        return None

    def match_all(self) -> None:
        consumed_until = -1
        for off in sorted(self.visited):
            if off < consumed_until or off in self.matches:
                continue
            found = self.identify(off)
            if found is None:
                continue
            kind, template = found
            if template is None:
                self.flag(off, ViolationKind.MalformedGuard, f"{kind.value} shape mismatch")
                continue
            try:
                length, slots = self.expect(off, template)
            except _Mismatch as exc:
                self.flag(off, exc.kind, f"{kind.value}: {exc}")
                continue
            end = off + length
            if kind is GuardKind.RSP:
                guarded = self.ends.get(off)
            elif kind in T.PREFIX_KINDS:
                guarded = end if end in self.visited else None
            else:
                guarded = None
            self.matches[off] = GuardMatch(kind, off, length, guarded, slots)
            consumed_until = end

    # -- policy checks -------------------------------------------------------
    def guard_spans(self) -> list[tuple[int, int, GuardMatch]]:
        return sorted((m.start, m.end, m) for m in self.matches.values())

    def in_guard(self, off: int) -> bool:
        spans = self._spans
        i = bisect.bisect_right(self._starts, off) - 1
        return i >= 0 and spans[i][0] <= off < spans[i][1]

    def check_policies(self) -> None:
        man = self.manifest
        self._spans = self.guard_spans()
        self._starts = [s for s, _, _ in self._spans]
        before: dict[int, GuardMatch] = {}
        after: dict[int, GuardMatch] = {}
        for m in self.matches.values():
            if m.kind in T.PREFIX_KINDS:
                before[m.end] = m
            elif m.kind is GuardKind.RSP:
                after[m.start] = m
        for off in sorted(self.visited):
            if self.in_guard(off):
                continue
            insn = self.decoded[off]
            prev = before.get(off)
            if man.guards_stores and insn.writes_memory():
                if prev is None or prev.kind is not GuardKind.STORE:
                    self.flag(off, ViolationKind.MissingGuard, f"unguarded store `{insn}`")
                elif self.store_dest(prev) != insn.operands[0]:
                    self.flag(prev.start, ViolationKind.MalformedGuard, "lea operand differs from store destination")
            if man.has(Policy.P2) and insn.writes_rsp():
                nxt = after.get(insn.end)
                if nxt is None:
                    self.flag(off, ViolationKind.MissingGuard, f"unguarded rsp write `{insn}`")
            if man.has(Policy.P5):
                if insn.is_indirect_branch:
                    if prev is None or prev.kind is not GuardKind.CFI or self.decoded[prev.start].operands[1] != insn.operands[0]:
                        self.flag(off, ViolationKind.UnverifiedIndirect, f"`{insn}`")
                if insn.mnemonic == "ret" and (prev is None or prev.kind is not GuardKind.SHADOW_EPILOG):
                    self.flag(off, ViolationKind.MissingEpilog)
            for op in insn.operands:
                if op.is_imm and op.imm & 0xFFFFFFFFFFFFFFFF in PLACEHOLDER_BY_VALUE:
                    self.flag(off, ViolationKind.WrongPlaceholder, "placeholder constant outside a guard")
        if man.has(Policy.P5):
            for entry in self.function_entries():
                m = self.matches.get(entry)
                if m is None or m.kind is not GuardKind.SHADOW_PROLOG:
                    self.flag(entry, ViolationKind.MissingGuard, "function entry lacks shadow prolog")

    def store_dest(self, m: GuardMatch) -> Operand:
        first = self.decoded[m.start]
        lea = self.decoded[self.decoded[first.end].end]
        return _unlea(lea.operands[1])

    def function_entries(self) -> set[int]:
        entries = {o for o in self.call_targets if self.inside_routine(o) is None}
        entry = self.to_offset(self.img.entry)
        if entry is not None:
            entries.add(entry)
        for addr in self.img.resolved_targets:
            off = self.to_offset(addr)
            if off is not None:
                entries.add(off)
        return entries

    def check_targets(self) -> None:
        targets: dict[int, str] = {}
        for addr, sources in self.branch_sources.items():
            off = self.to_offset(addr)
            if off is None:
                continue
            for _, mnemonic in sources:
                if targets.get(off) in (None, "call"):
                    targets[off] = mnemonic
        for addr in self.img.resolved_targets:
            off = self.to_offset(addr)
            if off is not None:
                targets[off] = "listed"
        entry = self.to_offset(self.img.entry)
        if entry is not None:
            targets.setdefault(entry, "entry")
        exit_off = self.to_offset(self.symbols.get(T.EXIT_LABEL, -1))
        for off, how in targets.items():
            r = self.inside_routine(off)
            if r is not None:
                if off == r.start and (how == "call" or off == exit_off):
                    continue
                self.flag(off, ViolationKind.TargetInsideGuard, f"{how} into {r.kind.value}")
                continue
            i = bisect.bisect_right(self._starts, off) - 1
            if i < 0:
                continue
            start, end, m = self._spans[i]
            if m.kind in T.PREFIX_KINDS and m.guarded_instruction is not None:
                bad = start < off <= m.guarded_instruction
            else:
                bad = start < off < end
            if bad:
                self.flag(off, ViolationKind.TargetInsideGuard, f"{how} into {m.kind.value}")

    def check_ssa(self) -> None:
        k = self.manifest.ssa_stride_k
        leaders = set(self.function_entries()) | set(self.jump_targets)
        for off in self.visited:
            insn = self.decoded[off]
            if insn.is_jcc and not self.in_guard(off):
                leaders.add(insn.end)
        leaders = {o for o in leaders if o in self.visited and self.inside_routine(o) is None}
        for leader in sorted(leaders):
            pos = leader
            m = self.matches.get(pos)
            if m is not None and m.kind is GuardKind.SHADOW_PROLOG:
                pos = m.end
            m = self.matches.get(pos)
            if m is None or m.kind is not GuardKind.SSA_CHECK:
                self.flag(pos, ViolationKind.MissingSsaCheck, "block does not start with ssa_check")
                continue
            pos = m.end
            count = 0
            while pos in self.visited:
                if pos in leaders and pos != leader:
                    break
                m = self.matches.get(pos)
                if m is not None:
                    if m.kind is GuardKind.SSA_CHECK:
                        count = 0
                    pos = m.end
                    continue
                insn = self.decoded[pos]
                count += 1
                if count > k:
                    self.flag(pos, ViolationKind.MissingSsaCheck, f"more than {k} instructions without ssa_check")
                    count = 0
                if insn.ends_block:
                    break
                pos = insn.end
                if pos in self.matches and self.matches[pos].kind is GuardKind.RSP:
                    pos = self.matches[pos].end

    def run(self) -> VerificationReport:
        self.check_routines()
        self.traverse(self.seeds())
        self.check_overlaps()
        self.match_all()
        self.check_policies()
        self.check_targets()
        if self.manifest.has(Policy.P6):
            self.check_ssa()
        matches = list(self.matches.values()) + list(self.routines.values())
        spans = [(o, self.decoded[o].end) for o in self.visited] + [(r.start, r.end) for r in self.routines.values()]
        return VerificationReport(
            _dedupe(self.violations), frozenset(self.visited),
            sorted(matches, key=lambda m: m.start), _merge(spans),
        )


def _dedupe(violations: list[Violation]) -> list[Violation]:
    seen = set()
    out = []
    for v in violations:
        key = (v.offset, v.kind)
        if key not in seen:
            seen.add(key)
            out.append(v)
    return out


def _unlea(op: Operand) -> Operand:
    """Store destination corresponding to a StoreGuard lea operand."""
    if op.base == "rsp":
        return Operand("mem", base=op.base, index=op.index, scale=op.scale, disp=op.disp - 16)
    return op


def _placeholder_only(got: Instruction, want: Instruction) -> bool:
    if got.mnemonic != want.mnemonic or len(got.operands) != len(want.operands):
        return False
    diff = [(a, b) for a, b in zip(got.operands, want.operands) if a != b]
    return (
        len(diff) == 1
        and diff[0][0].is_imm
        and diff[0][1].is_imm
        and diff[0][1].imm in PLACEHOLDER_BY_VALUE
    )


def _placeholder_offsets(code: bytes) -> list[tuple[int, PlaceholderField]]:
    from .bundle import find_placeholders

    return find_placeholders(code)


def _differs_only_in_placeholders(actual: bytes, expected: bytes) -> bool:
    slots = _placeholder_offsets(expected)
    masked_a, masked_e = bytearray(actual), bytearray(expected)
    for off, _ in slots:
        masked_a[off:off + 8] = bytes(8)
        masked_e[off:off + 8] = bytes(8)
    return bool(slots) and masked_a == masked_e


def verify(img: LoadedImage, manifest: PolicyManifest) -> VerificationReport:
    """Check every policy the manifest selects over the reachable code of ``img``."""
    return Verifier(img, manifest).run()


def disassemble_reachable(img: LoadedImage) -> dict[int, Instruction]:
    """Image offset to instruction for everything reachable from the entry and listed targets."""
    v = Verifier(img, PolicyManifest())
    v.check_routines()
    v.traverse(v.seeds())
    return {o: v.decoded[o] for o in sorted(v.visited)}


def match_guard(img: LoadedImage, offset: int, kind: GuardKind | None = None) -> GuardMatch:
    """Match a single guard at ``offset``; raises ``GuardMismatch`` with the violation kind."""
    v = Verifier(img, PolicyManifest())
    found = v.identify(offset)
    if found is None or (kind is not None and found[0] is not kind) or found[1] is None:
        raise GuardMismatch(ViolationKind.MalformedGuard, f"no {kind.value if kind else 'guard'} at {offset:#x}")
    try:
        length, slots = v.expect(offset, found[1])
    except _Mismatch as exc:
        raise GuardMismatch(exc.kind, str(exc)) from None
    return GuardMatch(found[0], offset, length, None, slots)


class GuardMismatch(Exception):
    def __init__(self, kind: ViolationKind, detail: str):
        super().__init__(f"{kind.value}: {detail}")
        self.kind = kind
