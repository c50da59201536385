"""The "code + proof" container exchanged between producer and consumer.

Wire format (all integers little-endian)::

    "CATB" | version:u16 | nsections:u16 | nsections x {kind:u8, offset:u64, length:u64} | payloads

Section kinds: 1 code, 2 relocations, 3 symbols, 4 indirect-target names,
5 policy manifest, 6 entry symbol.  Strings are u32-length-prefixed UTF-8.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

MAGIC = b"CATB"
VERSION = 1

SECTION_CODE = 1
SECTION_RELOCS = 2
SECTION_SYMBOLS = 3
SECTION_TARGETS = 4
SECTION_MANIFEST = 5
SECTION_ENTRY = 6
_SECTION_ORDER = (SECTION_CODE, SECTION_RELOCS, SECTION_SYMBOLS, SECTION_TARGETS, SECTION_MANIFEST, SECTION_ENTRY)

_HEADER = struct.Struct("<4sHH")
_ENTRY = struct.Struct("<BQQ")
_RELOC = struct.Struct("<QIBq")
_MANIFEST = struct.Struct("<BBIIIII")


class BundleError(Exception):
    pass


class BadMagic(BundleError):
    pass


class TruncatedSection(BundleError):
    pass


class DanglingSymbolIndex(BundleError):
    pass


class UnresolvedIndirectTarget(BundleError):
    pass


class MalformedBundle(BundleError):
    pass


class InvalidManifest(BundleError):
    pass


class UnknownField(KeyError):
    pass


class Policy(enum.IntFlag):
    NONE = 0
    P1 = 1
    P2 = 2
    P3 = 4
    P4 = 8
    P5 = 16
    P6 = 32

    @classmethod
    def parse(cls, text: str) -> Policy:
        """``"p1,p2"`` -> ``Policy.P1 | Policy.P2``; raises ValueError on unknown names."""
        result = cls.NONE
        for part in text.split(","):
            part = part.strip().upper()
            if not part:
                continue
            if part not in cls.__members__ or part == "NONE":
                raise ValueError(f"unknown policy {part.lower()!r}")
            result |= cls[part]
        return result

    def names(self) -> list[str]:
        return [p.name for p in (Policy.P1, Policy.P2, Policy.P3, Policy.P4, Policy.P5, Policy.P6) if p in self]


STORE_POLICIES = Policy.P1 | Policy.P3 | Policy.P4
ALL_POLICIES = Policy.P1 | Policy.P2 | Policy.P3 | Policy.P4 | Policy.P5 | Policy.P6


UNLIMITED_SENDS = 0xFFFFFFFF


class Mode(enum.Enum):
    CCAAS = "ccaas"
    CDAAS = "cdaas"


class RelocKind(enum.IntEnum):
    ABS64 = 1
    REL32 = 2

    @property
    def width(self) -> int:
        return 8 if self is RelocKind.ABS64 else 4


class PlaceholderField(enum.Enum):
    UPPER_DATA_BOUND = "upper_data_bound"
    LOWER_DATA_BOUND = "lower_data_bound"
    UPPER_STACK_BOUND = "upper_stack_bound"
    LOWER_STACK_BOUND = "lower_stack_bound"
    UPPER_CODE_BOUND = "upper_code_bound"
    LOWER_CODE_BOUND = "lower_code_bound"
    BRANCH_TARGET_COUNT = "branch_target_count"
    BRANCH_TARGET_LIST = "branch_target_list"
    SHADOW_STACK_BASE = "shadow_stack_base"


PLACEHOLDERS: dict[PlaceholderField, int] = {
    PlaceholderField.UPPER_DATA_BOUND: 0x3FFFFFFFFFFFFFFF,
    PlaceholderField.LOWER_DATA_BOUND: 0x4FFFFFFFFFFFFFFF,
    PlaceholderField.UPPER_STACK_BOUND: 0x5FFFFFFFFFFFFFFF,
    PlaceholderField.LOWER_STACK_BOUND: 0x6FFFFFFFFFFFFFFF,
    PlaceholderField.UPPER_CODE_BOUND: 0x7FFFFFFFFFFFFFFF,
    PlaceholderField.LOWER_CODE_BOUND: 0x8FFFFFFFFFFFFFFF,
    PlaceholderField.BRANCH_TARGET_COUNT: 0x1FFFFFFFF,
    PlaceholderField.BRANCH_TARGET_LIST: 0x1FFFFFFFFFFFFFFF,
    PlaceholderField.SHADOW_STACK_BASE: 0x2FFFFFFFFFFFFFFF,
}
PLACEHOLDER_BY_VALUE = {v: k for k, v in PLACEHOLDERS.items()}

# which placeholders each policy's guards and runtime routines carry
POLICY_PLACEHOLDERS: dict[Policy, tuple[PlaceholderField, ...]] = {
    Policy.P1: (PlaceholderField.UPPER_DATA_BOUND, PlaceholderField.LOWER_DATA_BOUND),
    Policy.P2: (PlaceholderField.UPPER_STACK_BOUND, PlaceholderField.LOWER_STACK_BOUND),
    Policy.P3: (PlaceholderField.UPPER_DATA_BOUND, PlaceholderField.LOWER_DATA_BOUND),
    Policy.P4: (PlaceholderField.UPPER_DATA_BOUND, PlaceholderField.LOWER_DATA_BOUND),
    Policy.P5: (
        PlaceholderField.UPPER_CODE_BOUND,
        PlaceholderField.LOWER_CODE_BOUND,
        PlaceholderField.BRANCH_TARGET_COUNT,
        PlaceholderField.BRANCH_TARGET_LIST,
        PlaceholderField.SHADOW_STACK_BASE,
    ),
    Policy.P6: (),
}


def placeholder_value(name: str | PlaceholderField) -> int:
    """Canonical 64-bit placeholder immediate for a rewrite target."""
    if isinstance(name, PlaceholderField):
        return PLACEHOLDERS[name]
    try:
        return PLACEHOLDERS[PlaceholderField(name)]
    except ValueError:
        raise UnknownField(name) from None


def placeholder_pattern(name: str | PlaceholderField) -> bytes:
    return placeholder_value(name).to_bytes(8, "little")


def find_placeholders(image: bytes) -> list[tuple[int, PlaceholderField]]:
    """Every (offset, field) where a canonical constant occurs in ``image``."""
    hits = []
    for fld, value in PLACEHOLDERS.items():
        pattern = value.to_bytes(8, "little")
        start = image.find(pattern)
        while start != -1:
            hits.append((start, fld))
            start = image.find(pattern, start + 1)
    return sorted(hits, key=lambda h: h[0])


@dataclass(frozen=True)
class Relocation:
    offset: int
    symbol_index: int
    kind: RelocKind
    addend: int


@dataclass(frozen=True)
class Symbol:
    name: str
    defined: bool
    value: int = 0


@dataclass(frozen=True)
class PolicyManifest:
    policies: Policy = Policy.NONE
    mode: Mode = Mode.CCAAS
    pad_length: int = 256
    max_sends: int | None = None  # resolved per mode: 1 for CDaaS, unlimited for CCaaS
    max_output_bits: int = 8
    ssa_stride_k: int = 20
    aex_threshold: int = 22

    def __post_init__(self):
        if self.max_sends is None:
            object.__setattr__(self, "max_sends", 1 if self.mode is Mode.CDAAS else UNLIMITED_SENDS)
        if self.pad_length <= 0:
            raise InvalidManifest("pad_length must be positive")
        if self.mode is Mode.CDAAS and self.max_sends < 1:
            raise InvalidManifest("CDaaS mode needs max_sends >= 1")
        if self.ssa_stride_k < 1:
            raise InvalidManifest("ssa_stride_k must be >= 1")
        if self.aex_threshold < 1:
            raise InvalidManifest("aex_threshold must be >= 1")
        for name in ("pad_length", "max_sends", "max_output_bits", "ssa_stride_k", "aex_threshold"):
            if not 0 <= getattr(self, name) <= 0xFFFFFFFF:
                raise InvalidManifest(f"{name} out of u32 range")

    @property
    def guards_stores(self) -> bool:
        return bool(self.policies & STORE_POLICIES)

    def has(self, policy: Policy) -> bool:
        return bool(self.policies & policy)


@dataclass(frozen=True)
class CodeProofBundle:
    code: bytes
    relocations: tuple[Relocation, ...] = ()
    symbols: tuple[Symbol, ...] = ()
    indirect_targets: tuple[str, ...] = ()
    manifest: PolicyManifest = field(default_factory=PolicyManifest)
    entry_symbol: str = "main"
    magic: bytes = MAGIC
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "code", bytes(self.code))
        object.__setattr__(self, "relocations", tuple(self.relocations))
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "indirect_targets", tuple(self.indirect_targets))
        if self.magic != MAGIC:
            raise BadMagic(f"magic {self.magic!r}")
        names = [s.name for s in self.symbols]
        if len(set(names)) != len(names):
            raise MalformedBundle("duplicate symbol names")
        for sym in self.symbols:
            if sym.defined and not 0 <= sym.value <= len(self.code):
                raise TruncatedSection(f"symbol {sym.name!r} lies outside the code section")
        for rel in self.relocations:
            if not 0 <= rel.symbol_index < len(self.symbols):
                raise DanglingSymbolIndex(f"relocation at {rel.offset:#x} uses symbol #{rel.symbol_index}")
            if rel.offset < 0 or rel.offset + RelocKind(rel.kind).width > len(self.code):
                raise TruncatedSection(f"relocation at {rel.offset:#x} runs past the code section")
        defined = {s.name for s in self.symbols if s.defined}
        for name in self.indirect_targets:
            if name not in defined:
                raise UnresolvedIndirectTarget(name)
        if self.entry_symbol not in defined:
            raise MalformedBundle(f"entry symbol {self.entry_symbol!r} is not defined")

    def symbol(self, name: str) -> Symbol:
        for sym in self.symbols:
            if sym.name == name:
                return sym
        raise KeyError(name)


# ------------------------------------------------------------------ encoding


def _string(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _encode_sections(b: CodeProofBundle) -> dict[int, bytes]:
    relocs = struct.pack("<I", len(b.relocations)) + b"".join(
        _RELOC.pack(r.offset, r.symbol_index, int(r.kind), r.addend) for r in b.relocations
    )
    symbols = struct.pack("<I", len(b.symbols)) + b"".join(
        _string(s.name) + struct.pack("<BQ", int(s.defined), s.value if s.defined else 0) for s in b.symbols
    )
    targets = struct.pack("<I", len(b.indirect_targets)) + b"".join(_string(t) for t in b.indirect_targets)
    m = b.manifest
    manifest = _MANIFEST.pack(
        int(m.policies), 0 if m.mode is Mode.CCAAS else 1,
        m.pad_length, m.max_sends, m.max_output_bits, m.ssa_stride_k, m.aex_threshold,
    )
    return {
        SECTION_CODE: b.code,
        SECTION_RELOCS: relocs,
        SECTION_SYMBOLS: symbols,
        SECTION_TARGETS: targets,
        SECTION_MANIFEST: manifest,
        SECTION_ENTRY: _string(b.entry_symbol),
    }


def encode_bundle(bundle: CodeProofBundle) -> bytes:
    sections = _encode_sections(bundle)
    header = _HEADER.pack(bundle.magic, bundle.version, len(sections))
    offset = len(header) + _ENTRY.size * len(sections)
    table = b""
    for kind in _SECTION_ORDER:
        table += _ENTRY.pack(kind, offset, len(sections[kind]))
        offset += len(sections[kind])
    return header + table + b"".join(sections[k] for k in _SECTION_ORDER)


class _SectionReader:
    def __init__(self, data: bytes, name: str):
        self.data = data
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedSection(f"{self.name} section is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, st: struct.Struct) -> tuple:
        return st.unpack(self.take(st.size))

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise MalformedBundle(f"bad UTF-8 in {self.name} section") from None

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise MalformedBundle(f"trailing bytes in {self.name} section")


def decode_bundle(data: bytes) -> CodeProofBundle:
    """Parse and validate a bundle; every malformed input raises a BundleError."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a CATB bundle")
    if len(data) < _HEADER.size:
        raise TruncatedSection("header is truncated")
    _, version, count = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise MalformedBundle(f"unsupported version {version}")
    table_end = _HEADER.size + count * _ENTRY.size
    if table_end > len(data):
        raise TruncatedSection("section table is truncated")
    sections: dict[int, bytes] = {}
    for i in range(count):
        kind, offset, length = _ENTRY.unpack_from(data, _HEADER.size + i * _ENTRY.size)
        if kind not in _SECTION_ORDER:
            raise MalformedBundle(f"unknown section kind {kind}")
        if kind in sections:
            raise MalformedBundle(f"duplicate section kind {kind}")
        if offset < table_end or offset + length > len(data):
            raise TruncatedSection(f"section {kind} lies outside the file")
        sections[kind] = data[offset:offset + length]
    missing = [k for k in _SECTION_ORDER if k not in sections]
    if missing:
        raise MalformedBundle(f"missing sections {missing}")

    rd = _SectionReader(sections[SECTION_RELOCS], "relocation")
    relocations = []
    for _ in range(rd.u32()):
        offset, index, kind, addend = rd.unpack(_RELOC)
        if kind not in (1, 2):
            raise MalformedBundle(f"unknown relocation kind {kind}")
        relocations.append(Relocation(offset, index, RelocKind(kind), addend))
    rd.finish()

    rd = _SectionReader(sections[SECTION_SYMBOLS], "symbol")
    symbols = []
    for _ in range(rd.u32()):
        name = rd.string()
        defined, value = rd.unpack(struct.Struct("<BQ"))
        if defined not in (0, 1):
            raise MalformedBundle("bad symbol flag")
        symbols.append(Symbol(name, bool(defined), value))
    rd.finish()

    rd = _SectionReader(sections[SECTION_TARGETS], "indirect-target")
    targets = [rd.string() for _ in range(rd.u32())]
    rd.finish()

    rd = _SectionReader(sections[SECTION_MANIFEST], "manifest")
    policies, mode, pad, sends, bits, k, thresh = rd.unpack(_MANIFEST)
    rd.finish()
    if policies & ~int(ALL_POLICIES) or mode not in (0, 1):
        raise MalformedBundle("bad manifest flags")
    manifest = PolicyManifest(Policy(policies), Mode.CCAAS if mode == 0 else Mode.CDAAS, pad, sends, bits, k, thresh)

    rd = _SectionReader(sections[SECTION_ENTRY], "entry")
    entry = rd.string()
    rd.finish()

    return CodeProofBundle(
        code=sections[SECTION_CODE],
        relocations=tuple(relocations),
        symbols=tuple(symbols),
        indirect_targets=tuple(targets),
        manifest=manifest,
        entry_symbol=entry,
        version=version,
    )
