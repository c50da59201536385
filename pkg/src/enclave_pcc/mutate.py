"""Single-edit mutants of instrumented programs, for exercising the verifier.

Edits are applied to the instrumented ``Program`` and then re-linked, so every
mutant is a well-formed bundle that differs from a valid one in exactly one
annotation-level respect.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from .bundle import CodeProofBundle, PolicyManifest, find_placeholders
from .instrument import Function, Item, Program, instrument, link, parse_program
from .isa import Sym, ins, parse_instruction
from .templates import GuardKind

GUARD_LENGTH = {
    GuardKind.STORE: 11,
    GuardKind.RSP: 8,
    GuardKind.CFI: 2,
    GuardKind.SHADOW_PROLOG: 10,
    GuardKind.SHADOW_EPILOG: 11,
    GuardKind.SSA_CHECK: 1,
}

MUTATION_KINDS = ("delete_guard", "alter_placeholder", "branch_into_guard", "insert_store", "remove_epilog")


@dataclass(frozen=True)
class Mutant:
    kind: str
    detail: str
    bundle: CodeProofBundle


def guard_groups(fn: Function) -> list[tuple[int, GuardKind]]:
    """(start index, kind) of every inserted guard in ``fn``."""
    out = []
    i = 0
    items = fn.items
    while i < len(items):
        kind = items[i].guard
        if kind in GUARD_LENGTH:
            out.append((i, kind))
            i += GUARD_LENGTH[kind]
        else:
            i += 1
    return out


def _with_items(p: Program, fi: int, items: list[Item]) -> Program:
    fns = list(p.functions)
    fns[fi] = Function(fns[fi].name, tuple(items))
    return replace(p, functions=tuple(fns))


def delete_guard(p: Program, fi: int, start: int) -> Program:
    items = list(p.functions[fi].items)
    n = GUARD_LENGTH[items[start].guard]
    labels = items[start].labels
    del items[start:start + n]
    if labels:
        items[start] = replace(items[start], labels=labels + items[start].labels)
    return _with_items(p, fi, items)


def branch_into_guard(p: Program, fi: int, branch: int, start: int, depth: int = 1) -> Program:
    """Retarget the branch at ``branch`` onto instruction ``depth`` of the guard at ``start``."""
    items = list(p.functions[fi].items)
    label = ".Lmutant_inside"
    inner = items[start + depth]
    items[start + depth] = replace(inner, labels=inner.labels + (label,))
    items[branch] = replace(items[branch], stmt=ins(items[branch].insn.mnemonic, Sym(label)))
    return _with_items(p, fi, items)


def insert_store(p: Program, fi: int, at: int) -> Program:
    items = list(p.functions[fi].items)
    items.insert(at, Item(parse_instruction("mov [rdi], rax")))
    return _with_items(p, fi, items)


def _store_sites(fn: Function) -> list[int]:
    """Positions where a new statement runs on fallthrough between two original statements."""
    out = []
    for i in range(1, len(fn.items)):
        prev, here = fn.items[i - 1], fn.items[i]
        insn = prev.insn
        if prev.guard is None and here.guard is None and insn is not None and not insn.ends_block:
            out.append(i)
    return out


def _branches(fn: Function) -> list[int]:
    return [
        i for i, it in enumerate(fn.items)
        if it.guard is None and it.insn is not None
        and (it.insn.is_jcc or it.insn.mnemonic == "jmp") and it.insn.operands[0].sym is not None
    ]


def mutants(source: str, manifest: PolicyManifest, entry: str = "main", per_kind: int = 1) -> list[Mutant]:
    """Up to ``per_kind`` mutants of every applicable kind, chosen deterministically."""
    p = instrument(parse_program(source, entry), manifest)
    valid = link(p, manifest)
    out: list[Mutant] = []

    def take(kind: str, edits) -> None:
        for detail, edit in edits[:per_kind]:
            out.append(Mutant(kind, detail, link(edit(), manifest)))

    deletions, epilogs, into, stores = [], [], [], []
    for fi, fn in enumerate(p.functions):
        groups = guard_groups(fn)
        for start, kind in groups:
            edit = (f"{fn.name}+{start} {kind.value}", lambda fi=fi, s=start: delete_guard(p, fi, s))
            if kind is GuardKind.SHADOW_EPILOG:
                epilogs.append(edit)
            elif kind in (GuardKind.STORE, GuardKind.RSP, GuardKind.CFI, GuardKind.SSA_CHECK):
                deletions.append(edit)
        multi = [(s, k) for s, k in groups if GUARD_LENGTH[k] > 1]
        for b in _branches(fn):
            for s, k in multi:
                into.append((f"{fn.name}+{b} -> {k.value}+1", lambda fi=fi, b=b, s=s: branch_into_guard(p, fi, b, s)))
                break
        for at in _store_sites(fn)[:1]:
            stores.append((f"{fn.name}+{at}", lambda fi=fi, at=at: insert_store(p, fi, at)))

    take("delete_guard", deletions)
    take("remove_epilog", epilogs)
    take("branch_into_guard", into)
    take("insert_store", stores)

    for offset, fld in find_placeholders(valid.code)[:per_kind]:
        code = bytearray(valid.code)
        (value,) = struct.unpack_from("<Q", code, offset)
        struct.pack_into("<Q", code, offset, value - 1)
        out.append(Mutant("alter_placeholder", f"{fld.value}@{offset:#x}", replace(valid, code=bytes(code))))
    return out
