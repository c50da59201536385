"""Producer side: parse assembly, apply policy passes, link a bundle."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import templates as T
from .bundle import (
    CodeProofBundle,
    Policy,
    PolicyManifest,
    Relocation,
    RelocKind,
    Symbol,
)
from .isa import (
    ABS64,
    Global,
    Instruction,
    Label,
    Quad,
    assemble,
    is_local,
    parse,
)
from .templates import GuardKind

PASS_ORDER = ("stores", "rsp", "cfi", "shadow", "ssa")
FLAG_SETTERS = frozenset(("add", "sub", "and", "xor", "cmp", "shl", "shr", "popfq"))


class InstrumentError(Exception):
    pass


class ProgramError(InstrumentError):
    pass


class PassOrderError(InstrumentError):
    pass


class UnsupportedAddressingMode(InstrumentError):
    pass


class IndirectThroughRdi(InstrumentError):
    pass


class FlagsLiveAcrossGuard(InstrumentError):
    pass


class DuplicateSymbol(InstrumentError):
    pass


class MissingRuntimeSupport(InstrumentError):
    pass


@dataclass(frozen=True)
class Item:
    """One statement inside a function; ``guard`` is set for inserted annotation code."""

    stmt: Instruction | Quad
    labels: tuple[str, ...] = ()
    guard: GuardKind | None = None

    @property
    def insn(self) -> Instruction | None:
        return self.stmt if isinstance(self.stmt, Instruction) else None


@dataclass(frozen=True)
class Function:
    name: str
    items: tuple[Item, ...] = ()


@dataclass(frozen=True)
class Program:
    functions: tuple[Function, ...]
    entry: str = "main"
    globals: tuple[str, ...] = ()
    applied: tuple[str, ...] = ()
    indirect_targets: tuple[str, ...] = ()

    @property
    def labels(self) -> dict[str, int]:
        """Label name to global instruction index."""
        out: dict[str, int] = {}
        idx = 0
        for fn in self.functions:
            out[fn.name] = idx
            for item in fn.items:
                for name in item.labels:
                    out[name] = idx
                idx += 1
        return out

    def instructions(self) -> list[Instruction]:
        return [it.insn for fn in self.functions for it in fn.items if it.insn is not None]

    def function(self, name: str) -> Function:
        for fn in self.functions:
            if fn.name == name:
                return fn
        raise KeyError(name)

    def statements(self) -> list:
        out: list = [Global(g) for g in self.globals]
        for fn in self.functions:
            out.append(Label(fn.name))
            for item in fn.items:
                out.extend(Label(n) for n in item.labels)
                out.append(item.stmt)
        return out


def parse_program(source: str, entry: str = "main") -> Program:
    functions: list[Function] = []
    globals_: list[str] = []
    current: str | None = None
    items: list[Item] = []
    pending: list[str] = []
    seen: set[str] = set()

    def close() -> None:
        if pending:
            raise ProgramError(f"label {pending[0]!r} at end of function {current!r} has no instruction")
        if current is not None:
            functions.append(Function(current, tuple(items)))

    for st in parse(source):
        if isinstance(st, Global):
            globals_.append(st.name)
        elif isinstance(st, Label):
            if st.name in seen:
                raise DuplicateSymbol(f"label {st.name!r} defined twice")
            seen.add(st.name)
            if is_local(st.name):
                if current is None:
                    raise ProgramError(f"local label {st.name!r} outside a function")
                pending.append(st.name)
            else:
                close()
                current, items, pending = st.name, [], []
        else:
            if current is None:
                raise ProgramError("instruction before the first function label")
            items.append(Item(st, tuple(pending)))
            pending = []
    close()
    program = Program(tuple(functions), entry, tuple(globals_))
    _check_program(program)
    return program


def _check_program(p: Program) -> None:
    names = [fn.name for fn in p.functions]
    if len(set(names)) != len(names):
        raise DuplicateSymbol("function defined twice")
    if names and p.entry not in names:
        raise ProgramError(f"entry function {p.entry!r} not defined")
    for fn in p.functions:
        local = {n for it in fn.items for n in it.labels}
        for it in fn.items:
            insn = it.insn
            if insn is None:
                continue
            for op in insn.operands:
                if op.sym is not None and is_local(op.sym) and op.sym not in local:
                    raise ProgramError(f"{fn.name}: label {op.sym!r} is not defined in this function")


def _mark(p: Program, name: str) -> Program:
    if name in p.applied:
        raise PassOrderError(f"pass {name!r} already applied")
    later = PASS_ORDER[PASS_ORDER.index(name) + 1:]
    if any(x in p.applied for x in later):
        raise PassOrderError(f"pass {name!r} must run before {', '.join(x for x in later if x in p.applied)}")
    return replace(p, applied=p.applied + (name,))


def _guard_items(insns: list[Instruction], kind: GuardKind, labels: tuple[str, ...] = ()) -> list[Item]:
    out = [Item(i, (), kind) for i in insns]
    if labels and out:
        out[0] = replace(out[0], labels=labels)
    return out


def _flags_live_after(items: tuple[Item, ...], start: int) -> bool:
    """True if a conditional branch may read flags set before ``items[start]``."""
    for item in items[start:]:
        insn = item.insn
        if insn is None:
            return False
        if insn.is_jcc:
            return True
        if insn.mnemonic in FLAG_SETTERS or insn.mnemonic in ("jmp", "ret", "hlt", "call"):
            return False
    return False


def instrument_stores(p: Program) -> Program:
    p = _mark(p, "stores")
    functions = []
    for fn in p.functions:
        out: list[Item] = []
        for i, item in enumerate(fn.items):
            insn = item.insn
            if item.guard is None and insn is not None and insn.writes_memory():
                dest = insn.operands[0]
                if dest.base is None:
                    raise UnsupportedAddressingMode(f"{fn.name}: {insn}")
                sets_flags = insn.mnemonic in FLAG_SETTERS
                if not sets_flags and _flags_live_after(fn.items, i + 1):
                    raise FlagsLiveAcrossGuard(f"{fn.name}: flags live across guarded `{insn}`")
                out.extend(_guard_items(T.store_guard(dest), GuardKind.STORE, item.labels))
                out.append(replace(item, labels=()))
            else:
                out.append(item)
        functions.append(Function(fn.name, tuple(out)))
    return replace(p, functions=tuple(functions))


def instrument_rsp(p: Program) -> Program:
    p = _mark(p, "rsp")
    functions = []
    for fn in p.functions:
        out: list[Item] = []
        for i, item in enumerate(fn.items):
            out.append(item)
            insn = item.insn
            if item.guard is None and insn is not None and insn.writes_rsp():
                if _flags_live_after(fn.items, i + 1):
                    raise FlagsLiveAcrossGuard(f"{fn.name}: flags live across guarded `{insn}`")
                out.extend(_guard_items(T.rsp_guard(), GuardKind.RSP))
        functions.append(Function(fn.name, tuple(out)))
    return replace(p, functions=tuple(functions))


def address_taken(p: Program) -> list[str]:
    """Labels whose address is materialized by ``movabs`` or ``.quad``, sorted by name."""
    found: set[str] = set()
    for fn in p.functions:
        for item in fn.items:
            if item.guard is not None:
                continue
            name = None
            if isinstance(item.stmt, Quad):
                name = item.stmt.value.sym
            elif item.stmt.mnemonic == "movabs":
                name = item.stmt.operands[1].sym
            if name is None:
                continue
            if is_local(name):
                raise ProgramError(f"address of local label {name!r} taken")
            found.add(name)
    defined = {fn.name for fn in p.functions}
    return sorted(n for n in found if n in defined)


def instrument_cfi(p: Program) -> tuple[Program, list[str]]:
    p = _mark(p, "cfi")
    functions = []
    for fn in p.functions:
        out: list[Item] = []
        for item in fn.items:
            insn = item.insn
            if item.guard is None and insn is not None and insn.is_indirect_branch:
                target = insn.operands[0]
                if target.is_mem and "rdi" in target.registers():
                    raise IndirectThroughRdi(f"{fn.name}: {insn}")
                out.extend(_guard_items(T.cfi_guard(target), GuardKind.CFI, item.labels))
                out.append(replace(item, labels=()))
            else:
                out.append(item)
        functions.append(Function(fn.name, tuple(out)))
    targets = address_taken(p)
    return replace(p, functions=tuple(functions), indirect_targets=tuple(targets)), targets


def instrument_shadow_stack(p: Program) -> Program:
    p = _mark(p, "shadow")
    functions = []
    for fn in p.functions:
        out = _guard_items(T.shadow_prolog(), GuardKind.SHADOW_PROLOG)
        for item in fn.items:
            insn = item.insn
            if item.guard is None and insn is not None and insn.mnemonic == "ret":
                out.extend(_guard_items(T.shadow_epilog(), GuardKind.SHADOW_EPILOG, item.labels))
                out.append(replace(item, labels=()))
            else:
                out.append(item)
        functions.append(Function(fn.name, tuple(out)))
    return replace(p, functions=tuple(functions))


@dataclass
class _Unit:
    start: int  # index into the function's items
    core: Item | None
    labeled: bool = False
    items: list[Item] = field(default_factory=list)


def _units(items: tuple[Item, ...]) -> tuple[int, list[_Unit]]:
    """Split items into (prolog length, units); a unit is an original instruction with its guards."""
    head = 0
    while head < len(items) and items[head].guard is GuardKind.SHADOW_PROLOG:
        head += 1
    units: list[_Unit] = []
    cur: _Unit | None = None
    for idx in range(head, len(items)):
        item = items[idx]
        if item.guard is GuardKind.RSP and units:
            units[-1].items.append(item)
            continue
        if cur is None:
            cur = _Unit(idx, None, bool(item.labels))
        cur.items.append(item)
        if item.guard is None:
            cur.core = item
            units.append(cur)
            cur = None
    if cur is not None:
        raise ProgramError("dangling guard without a guarded instruction")
    return head, units


def basic_block_sizes(items: tuple[Item, ...]) -> list[int]:
    """Unit counts of each basic block in a function (``.quad`` data splits blocks)."""
    _, units = _units(items)
    sizes: list[int] = []
    length = 0
    for i, u in enumerate(units):
        core = u.core
        if isinstance(core.stmt, Quad):
            if length:
                sizes.append(length)
            length = 0
            continue
        prev = units[i - 1].core if i else None
        leader = i == 0 or u.labeled or (prev is not None and (isinstance(prev.stmt, Quad) or prev.stmt.ends_block))
        if leader and length:
            sizes.append(length)
            length = 0
        length += 1
    if length or not sizes:
        sizes.append(length)
    return sizes


def instrument_ssa(p: Program, k: int = 20) -> Program:
    if k < 1:
        raise ValueError("ssa stride must be >= 1")
    p = _mark(p, "ssa")
    functions = []
    for fn in p.functions:
        head, units = _units(fn.items)
        out = list(fn.items[:head])
        if not units:
            out.extend(_guard_items(T.ssa_call(), GuardKind.SSA_CHECK))
        pos = 0
        prev_core: Item | None = None
        for i, u in enumerate(units):
            core = u.core
            if isinstance(core.stmt, Quad):
                out.extend(u.items)
                prev_core = core
                pos = 0
                continue
            leader = (
                i == 0
                or u.labeled
                or prev_core is None
                or isinstance(prev_core.stmt, Quad)
                or prev_core.stmt.ends_block
            )
            if leader:
                pos = 0
            if pos % k == 0:
                first = u.items[0]
                out.extend(_guard_items(T.ssa_call(), GuardKind.SSA_CHECK, first.labels))
                out.append(replace(first, labels=()))
                out.extend(u.items[1:])
            else:
                out.extend(u.items)
            pos += 1
            prev_core = core
        functions.append(Function(fn.name, tuple(out)))
    return replace(p, functions=tuple(functions))


def instrument(p: Program, manifest: PolicyManifest) -> Program:
    """Apply every pass the manifest selects, in the fixed order."""
    if manifest.guards_stores:
        p = instrument_stores(p)
    if manifest.has(Policy.P2):
        p = instrument_rsp(p)
    if manifest.has(Policy.P5):
        p, _ = instrument_cfi(p)
        p = instrument_shadow_stack(p)
    if manifest.has(Policy.P6):
        p = instrument_ssa(p, manifest.ssa_stride_k)
    return p


def _uses(p: Program, name: str) -> bool:
    for fn in p.functions:
        for item in fn.items:
            insn = item.insn
            if insn is not None and any(op.sym == name for op in insn.operands):
                return True
    return False


def link(p: Program, manifest: PolicyManifest) -> CodeProofBundle:
    defined = {fn.name for fn in p.functions}
    clash = defined & set(T.RUNTIME_SYMBOLS + T.BOOTSTRAP_EXPORTS)
    if clash:
        raise DuplicateSymbol(f"program defines reserved symbol(s) {sorted(clash)}")
    if _uses(p, T.CFI_CHECK) and not manifest.has(Policy.P5):
        raise MissingRuntimeSupport("CFICheck referenced but P5 is not selected")
    if _uses(p, T.SSA_CHECK) and not manifest.has(Policy.P6):
        raise MissingRuntimeSupport("ssa_check referenced but P6 is not selected")
    expected = []
    if manifest.guards_stores:
        expected.append("stores")
    if manifest.has(Policy.P2):
        expected.append("rsp")
    if manifest.has(Policy.P5):
        expected += ["cfi", "shadow"]
    if manifest.has(Policy.P6):
        expected.append("ssa")
    missing = [x for x in expected if x not in p.applied]
    if missing:
        raise MissingRuntimeSupport(f"selected passes not applied: {missing}")

    statements = p.statements()
    needs_exit = bool(p.applied) or _uses(p, T.EXIT_LABEL)
    if needs_exit:
        statements += T.exit_stub()
    if manifest.has(Policy.P5):
        statements += T.cfi_routine()
    if manifest.has(Policy.P6):
        statements += T.ssa_routine(manifest.aex_threshold)
    result = assemble(statements)

    names = [n for n in result.labels if not is_local(n)]
    referenced = {r.symbol for r in result.relocations}
    names += [n for n in result.labels if is_local(n) and n in referenced]
    symbols = [Symbol(n, True, result.labels[n]) for n in names]
    symbols += [Symbol(n, False, 0) for n in result.externs]
    index = {s.name: i for i, s in enumerate(symbols)}
    relocs = tuple(
        Relocation(r.offset, index[r.symbol], RelocKind.ABS64 if r.kind == ABS64 else RelocKind.REL32, r.addend)
        for r in result.relocations
    )
    targets = address_taken(p)
    return CodeProofBundle(
        code=result.code,
        relocations=relocs,
        symbols=tuple(symbols),
        indirect_targets=tuple(targets),
        manifest=manifest,
        entry_symbol=p.entry,
    )


def build_bundle(source: str, manifest: PolicyManifest, entry: str = "main") -> CodeProofBundle:
    """Source text to a linked bundle with the manifest's policies applied."""
    return link(instrument(parse_program(source, entry), manifest), manifest)
