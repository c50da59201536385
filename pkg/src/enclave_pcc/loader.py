"""Simulated enclave layout, relocation and placeholder rewriting."""
from __future__ import annotations

import bisect
import configparser
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import templates as T
from .bundle import (
    PLACEHOLDER_BY_VALUE,
    CodeProofBundle,
    PlaceholderField,
    RelocKind,
    find_placeholders,
)

PAGE = 4096
MiB = 1 << 20
MASK64 = 0xFFFFFFFFFFFFFFFF


class LoaderError(Exception):
    pass


class RegionsOverlap(LoaderError):
    pass


class SizeNotPageAligned(LoaderError):
    pass


class WindowNotContiguous(LoaderError):
    pass


class UndefinedSymbol(LoaderError):
    pass


class ImageTooLarge(LoaderError):
    pass


class RelocationOverflow(LoaderError):
    pass


class NotVerified(LoaderError):
    pass


class PlaceholderOutsideGuard(LoaderError):
    pass


@dataclass(frozen=True)
class Region:
    name: str
    base: int
    size: int
    perms: str  # subset of "rwx"; "" for guard pages and the loader heap

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.base <= addr and addr + length <= self.end


# region order when bases are not given explicitly; one unmapped page separates neighbours
REGION_ORDER = (
    "bootstrap", "loader_heap", "code", "ssa", "target_table", "shadow",
    "data", "stack_guard_low", "stack", "stack_guard_high",
)
ADJACENT = {("data", "stack_guard_low"), ("stack_guard_low", "stack"), ("stack", "stack_guard_high")}
REGION_PERMS = {
    "bootstrap": "x",
    "loader_heap": "",
    "code": "rx",
    "ssa": "rw",
    "target_table": "r",
    "shadow": "rw",
    "data": "rw",
    "stack_guard_low": "",
    "stack": "rw",
    "stack_guard_high": "",
}
# writable only by annotation code and runtime routines
ANNOTATION_ONLY = frozenset({"ssa", "shadow"})


@dataclass(frozen=True)
class LayoutConfig:
    elrange_base: int = 0x40000000
    bootstrap_size: int = PAGE
    loader_heap_size: int = 0x27000
    code_size: int = 32 * MiB
    ssa_size: int = PAGE
    target_table_size: int = 4 * MiB
    shadow_size: int = 4 * MiB
    data_size: int = 32 * MiB
    stack_size: int = 4 * MiB
    guard_size: int = PAGE
    bases: dict[str, int] = field(default_factory=dict)

    def size_of(self, name: str) -> int:
        if name.startswith("stack_guard"):
            return self.guard_size
        return getattr(self, f"{name}_size")

    @classmethod
    def from_file(cls, path: str | Path) -> LayoutConfig:
        """Read ``[layout]`` sizes (``code_size = 0x2000000``) and ``[bases]`` from an ini file."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        return cls.from_parser(parser)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> LayoutConfig:
        kwargs: dict = {}
        names = set(cls.__dataclass_fields__) - {"bases"}
        if parser.has_section("layout"):
            for key, value in parser.items("layout"):
                if key not in names:
                    raise KeyError(f"unknown layout key {key!r}")
                kwargs[key] = int(value, 0)
        if parser.has_section("bases"):
            kwargs["bases"] = {k: int(v, 0) for k, v in parser.items("bases")}
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = ["[layout]"]
        for name in self.__dataclass_fields__:
            if name != "bases":
                lines.append(f"{name} = {getattr(self, name):#x}")
        if self.bases:
            lines.append("[bases]")
            lines += [f"{k} = {v:#x}" for k, v in sorted(self.bases.items())]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EnclaveLayout:
    regions: tuple[Region, ...]
    elrange: tuple[int, int]
    config: LayoutConfig

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise KeyError(name)

    def region_at(self, addr: int) -> Region | None:
        for r in self.regions:
            if r.base <= addr < r.end:
                return r
        return None

    @property
    def code(self) -> Region:
        return self.region("code")

    @property
    def data(self) -> Region:
        return self.region("data")

    @property
    def stack(self) -> Region:
        return self.region("stack")

    @property
    def shadow(self) -> Region:
        return self.region("shadow")

    @property
    def target_table(self) -> Region:
        return self.region("target_table")

    @property
    def ssa(self) -> Region:
        return self.region("ssa")

    @property
    def window(self) -> tuple[int, int]:
        """Half-open range untrusted stores may touch: data, the low guard page and stack."""
        return self.data.base, self.stack.end

    def stub(self, name: str) -> int:
        """Address of a bootstrap entry point (ocalls and the return sentinel)."""
        order = (T.OCALL_SEND, T.OCALL_RECV, "return_sentinel")
        return self.region("bootstrap").base + 16 * order.index(name)

    def export(self, name: str) -> int:
        if name == T.SSA_PAGE:
            return self.ssa.base
        return self.stub(name)

    def placeholder_values(self, image_base: int, image_size: int, target_count: int) -> dict[PlaceholderField, int]:
        lo, hi = self.window
        return {
            PlaceholderField.UPPER_DATA_BOUND: hi - 8,
            PlaceholderField.LOWER_DATA_BOUND: lo,
            PlaceholderField.UPPER_STACK_BOUND: self.stack.end,
            PlaceholderField.LOWER_STACK_BOUND: self.stack.base,
            PlaceholderField.UPPER_CODE_BOUND: image_base + max(image_size, 1) - 1,
            PlaceholderField.LOWER_CODE_BOUND: image_base,
            PlaceholderField.BRANCH_TARGET_COUNT: target_count,
            PlaceholderField.BRANCH_TARGET_LIST: self.target_table.base,
            PlaceholderField.SHADOW_STACK_BASE: self.shadow.base,
        }


def build_layout(config: LayoutConfig | None = None) -> EnclaveLayout:
    config = config or LayoutConfig()
    regions: list[Region] = []
    cursor = config.elrange_base
    for name in REGION_ORDER:
        size = config.size_of(name)
        if size <= 0 or size % PAGE:
            raise SizeNotPageAligned(f"{name} size {size:#x} is not a positive page multiple")
        base = config.bases.get(name)
        if base is None:
            base = cursor
        if base % PAGE:
            raise SizeNotPageAligned(f"{name} base {base:#x} is not page aligned")
        regions.append(Region(name, base, size, REGION_PERMS[name]))
        nxt = REGION_ORDER[REGION_ORDER.index(name) + 1] if name != REGION_ORDER[-1] else None
        cursor = base + size + (0 if (name, nxt) in ADJACENT else PAGE)
    unknown = set(config.bases) - set(REGION_ORDER)
    if unknown:
        raise KeyError(f"unknown region(s) {sorted(unknown)}")
    ordered = sorted(regions, key=lambda r: r.base)
    for a, b in zip(ordered, ordered[1:]):
        if a.end > b.base:
            raise RegionsOverlap(f"{a.name} overlaps {b.name}")
    layout = EnclaveLayout(tuple(ordered), (ordered[0].base, ordered[-1].end - ordered[0].base), config)
    data, stack = layout.data, layout.stack
    low, high = layout.region("stack_guard_low"), layout.region("stack_guard_high")
    if low.end != stack.base or high.base != stack.end or data.end != low.base:
        raise WindowNotContiguous("data, guard page and stack must be adjacent")
    if stack.end + high.size > 1 << 33 or layout.elrange[0] < PAGE:
        raise RegionsOverlap("layout must sit between the first page and 8 GiB")
    return layout


@dataclass(frozen=True)
class LoadedImage:
    code: bytes
    base: int
    entry: int
    resolved_targets: tuple[int, ...]
    layout: EnclaveLayout
    symbols: dict[str, int]
    rewritten: bool = False

    @property
    def end(self) -> int:
        return self.base + len(self.code)


def load(bundle: CodeProofBundle, layout: EnclaveLayout) -> LoadedImage:
    code_region = layout.code
    if len(bundle.code) > code_region.size:
        raise ImageTooLarge(f"{len(bundle.code)} bytes exceed code region of {code_region.size}")
    base = code_region.base
    addresses: list[int] = []
    symbols: dict[str, int] = {}
    for sym in bundle.symbols:
        if sym.defined:
            addr = base + sym.value
        elif sym.name in T.BOOTSTRAP_EXPORTS:
            addr = layout.export(sym.name)
        else:
            raise UndefinedSymbol(sym.name)
        addresses.append(addr)
        symbols[sym.name] = addr
    code = bytearray(bundle.code)
    for rel in bundle.relocations:
        s = addresses[rel.symbol_index]
        if rel.kind is RelocKind.ABS64:
            struct.pack_into("<Q", code, rel.offset, (s + rel.addend) & MASK64)
        else:
            value = s + rel.addend - (base + rel.offset)
            if not -(1 << 31) <= value < 1 << 31:
                raise RelocationOverflow(f"rel32 to {bundle.symbols[rel.symbol_index].name} out of range")
            struct.pack_into("<i", code, rel.offset, value)
    targets = tuple(sorted(symbols[name] for name in bundle.indirect_targets))
    entry = symbols[bundle.entry_symbol]
    return LoadedImage(bytes(code), base, entry, targets, layout, symbols)


def rewrite_immediates(img: LoadedImage, report) -> LoadedImage:
    """Replace placeholder constants in the verifier-located immediate slots.

    ``report`` is the accepting verification report; its guard matches name
    the slots. Placeholder bytes overlapping verified instructions anywhere
    else are a verifier/rewriter disagreement and abort the rewrite. Bytes no
    verified path reaches are never executed, so constants found there (for
    example guards after an unconditional jump) get the same substitution.
    """
    if img.rewritten:
        raise NotVerified("image already rewritten")
    if not report.accepted:
        raise NotVerified("verification did not accept this image")
    slots: dict[int, PlaceholderField] = {}
    for match in report.matches:
        for offset, fld in match.slots:
            slots[offset] = fld
    spans = list(report.spans)
    starts = [a for a, _ in spans]

    def reached(offset: int) -> bool:
        i = bisect.bisect_right(starts, offset + 7) - 1
        return i >= 0 and spans[i][1] > offset

    for offset, fld in find_placeholders(img.code):
        if offset in slots:
            if slots[offset] is not fld:
                raise PlaceholderOutsideGuard(f"slot {offset:#x} does not hold {slots[offset].value}")
        elif reached(offset):
            raise PlaceholderOutsideGuard(f"{fld.value} at image offset {offset:#x}")
        else:
            slots[offset] = fld
    values = img.layout.placeholder_values(img.base, len(img.code), len(img.resolved_targets))
    code = bytearray(img.code)
    for offset, fld in slots.items():
        (current,) = struct.unpack_from("<Q", code, offset)
        if PLACEHOLDER_BY_VALUE.get(current) is not fld:
            raise PlaceholderOutsideGuard(f"slot {offset:#x} does not hold {fld.value}")
        struct.pack_into("<Q", code, offset, values[fld])
    left = find_placeholders(bytes(code))
    if left:
        raise PlaceholderOutsideGuard(f"{len(left)} placeholder(s) remain after rewriting")
    return replace(img, code=bytes(code), rewritten=True)
