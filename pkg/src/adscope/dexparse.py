"""DEX container parsing and invoke-edge extraction.

Only the tables needed to resolve method references are decoded: strings, type ids,
proto ids, method ids and class definitions with their code items. Every read is
bounds-checked so malformed input raises a :class:`DexError` instead of misbehaving.
"""

from __future__ import annotations

import array
import struct
import sys
from dataclasses import dataclass, field
from typing import Iterator

from .errors import (
    DexError,
    IndexOutOfRange,
    InvalidDescriptor,
    MalformedHeader,
    TruncatedSection,
    UnknownOpcode,
)
from .model import (
    CallEdge,
    ClassSummary,
    Diagnostic,
    InvokeKind,
    MethodRef,
    is_type_descriptor,
    return_kind,
)

HEADER_SIZE = 0x70
ENDIAN_CONSTANT = 0x12345678
SUPPORTED_VERSIONS = (b"035", b"036", b"037", b"038", b"039")
NO_INDEX = 0xFFFFFFFF

PACKED_SWITCH_PAYLOAD = 0x0100
SPARSE_SWITCH_PAYLOAD = 0x0200
FILL_ARRAY_DATA_PAYLOAD = 0x0300

INVOKE_KINDS = {
    0x6E: InvokeKind.VIRTUAL,
    0x6F: InvokeKind.SUPER,
    0x70: InvokeKind.DIRECT,
    0x71: InvokeKind.STATIC,
    0x72: InvokeKind.INTERFACE,
    0x74: InvokeKind.VIRTUAL,
    0x75: InvokeKind.SUPER,
    0x76: InvokeKind.DIRECT,
    0x77: InvokeKind.STATIC,
    0x78: InvokeKind.INTERFACE,
}
# decoded for width only; no edge emitted
UNSUPPORTED_INVOKES = {0xFA, 0xFB, 0xFC, 0xFD}
CONST_STRING = 0x1A
CONST_STRING_JUMBO = 0x1B


def _width_table() -> list[int | None]:
    """Instruction width in 16-bit code units, indexed by opcode. None = unused opcode."""
    w: list[int | None] = [None] * 256
    spans = [
        (0x00, 0x00, 1), (0x01, 0x01, 1), (0x02, 0x02, 2), (0x03, 0x03, 3),
        (0x04, 0x04, 1), (0x05, 0x05, 2), (0x06, 0x06, 3),
        (0x07, 0x07, 1), (0x08, 0x08, 2), (0x09, 0x09, 3),
        (0x0A, 0x11, 1),
        (0x12, 0x12, 1), (0x13, 0x13, 2), (0x14, 0x14, 3), (0x15, 0x15, 2),
        (0x16, 0x16, 2), (0x17, 0x17, 3), (0x18, 0x18, 5), (0x19, 0x19, 2),
        (0x1A, 0x1A, 2), (0x1B, 0x1B, 3), (0x1C, 0x1C, 2),
        (0x1D, 0x1E, 1), (0x1F, 0x20, 2), (0x21, 0x21, 1), (0x22, 0x23, 2),
        (0x24, 0x26, 3), (0x27, 0x28, 1), (0x29, 0x29, 2), (0x2A, 0x2C, 3),
        (0x2D, 0x31, 2), (0x32, 0x37, 2), (0x38, 0x3D, 2),
        (0x44, 0x51, 2), (0x52, 0x5F, 2), (0x60, 0x6D, 2),
        (0x6E, 0x72, 3), (0x74, 0x78, 3),
        (0x7B, 0x8F, 1), (0x90, 0xAF, 2), (0xB0, 0xCF, 1),
        (0xD0, 0xD7, 2), (0xD8, 0xE2, 2),
        (0xFA, 0xFB, 4), (0xFC, 0xFD, 3), (0xFE, 0xFF, 2),
    ]
    for lo, hi, width in spans:
        for op in range(lo, hi + 1):
            w[op] = width
    return w


INSTRUCTION_WIDTH = _width_table()


@dataclass(frozen=True)
class EncodedMethod:
    method_idx: int
    access_flags: int
    insns: tuple[int, ...] | None  # None when the method has no code item

    @property
    def has_code(self) -> bool:
        return self.insns is not None


@dataclass(frozen=True)
class ClassDef:
    descriptor: str
    methods: tuple[EncodedMethod, ...] = ()


@dataclass(frozen=True)
class DexFile:
    version: int
    strings: tuple[str, ...]
    type_descriptors: tuple[str, ...]
    protos: tuple[tuple[str, tuple[str, ...]], ...]  # (return descriptor, params)
    method_refs: tuple[tuple[int, int, int], ...]  # (type idx, proto idx, name idx)
    classes: tuple[ClassDef, ...]
    diagnostics: tuple[Diagnostic, ...] = field(default=(), compare=False)

    def method_ref(self, idx: int) -> MethodRef:
        type_idx, proto_idx, name_idx = self.method_refs[idx]
        ret, params = self.protos[proto_idx]
        return MethodRef(self.type_descriptors[type_idx], self.strings[name_idx], params, ret)

    def all_method_refs(self) -> list[MethodRef]:
        return [self.method_ref(i) for i in range(len(self.method_refs))]


def decode_mutf8(raw: bytes) -> tuple[str, bool]:
    """Decode modified UTF-8. Returns (text, clean); invalid input is replaced, not raised."""
    data = raw.replace(b"\xc0\x80", b"\x00")
    try:
        text = data.decode("utf-8", "surrogatepass")
        # pair up surrogates that MUTF-8 encodes as two 3-byte sequences
        return text.encode("utf-16-le", "surrogatepass").decode("utf-16-le"), True
    except UnicodeError:
        return data.decode("utf-8", "replace"), False


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.size = len(data)

    def need(self, offset: int, length: int, what: str) -> None:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise TruncatedSection(f"{what} extends past end of file ({self.size} bytes)", offset)

    def u16(self, offset: int, what: str = "u16") -> int:
        self.need(offset, 2, what)
        return self.data[offset] | (self.data[offset + 1] << 8)

    def u32(self, offset: int, what: str = "u32") -> int:
        self.need(offset, 4, what)
        return struct.unpack_from("<I", self.data, offset)[0]

    def uleb128(self, offset: int, what: str = "uleb128") -> tuple[int, int]:
        result = 0
        for i in range(5):
            self.need(offset + i, 1, what)
            byte = self.data[offset + i]
            result |= (byte & 0x7F) << (7 * i)
            if byte < 0x80:
                return result, offset + i + 1
        raise TruncatedSection(f"{what} longer than 5 bytes", offset)

    def table(self, offset: int, count: int, item_size: int, what: str) -> None:
        if count and (offset == 0 or offset + count * item_size > self.size):
            raise TruncatedSection(f"{what} table ({count} x {item_size} bytes) out of file", offset)


def _check_index(idx: int, limit: int, what: str, offset: int) -> int:
    if idx >= limit:
        raise IndexOutOfRange(f"{what} index {idx} >= table size {limit}", offset)
    return idx


def parse_dex(data: bytes) -> DexFile:
    """Parse a complete DEX image into a fully indexed :class:`DexFile`."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise MalformedHeader(f"file is {len(data)} bytes, header needs {HEADER_SIZE}", len(data))
    if data[0:4] != b"dex\n" or data[7] != 0:
        raise MalformedHeader("bad magic", 0)
    if data[4:7] not in SUPPORTED_VERSIONS:
        raise MalformedHeader(f"unsupported version {data[4:7]!r}", 4)
    rd = _Reader(data)
    if rd.u32(36) != HEADER_SIZE:
        raise MalformedHeader(f"header_size {rd.u32(36):#x}", 36)
    if rd.u32(40) != ENDIAN_CONSTANT:
        raise MalformedHeader(f"unsupported endian tag {rd.u32(40):#x}", 40)

    (string_ids_size, string_ids_off, type_ids_size, type_ids_off, proto_ids_size,
     proto_ids_off, _field_size, _field_off, method_ids_size, method_ids_off,
     class_defs_size, class_defs_off) = struct.unpack_from("<12I", data, 56)

    diagnostics: list[Diagnostic] = []

    rd.table(string_ids_off, string_ids_size, 4, "string_ids")
    strings = []
    for i in range(string_ids_size):
        pos = rd.u32(string_ids_off + 4 * i)
        _utf16_len, start = rd.uleb128(pos, "string_data")
        end = data.find(b"\x00", start)
        if end < 0:
            raise TruncatedSection("unterminated string_data", pos)
        text, clean = decode_mutf8(data[start:end])
        if not clean:
            diagnostics.append(Diagnostic("bad-string", f"string {i}", "invalid MUTF-8, replaced"))
        strings.append(text)

    rd.table(type_ids_off, type_ids_size, 4, "type_ids")
    types = []
    for i in range(type_ids_size):
        off = type_ids_off + 4 * i
        desc = strings[_check_index(rd.u32(off), string_ids_size, "type descriptor string", off)]
        if not is_type_descriptor(desc):
            raise InvalidDescriptor(f"type {i} has malformed descriptor {desc!r}", off)
        types.append(desc)

    rd.table(proto_ids_off, proto_ids_size, 12, "proto_ids")
    protos = []
    for i in range(proto_ids_size):
        off = proto_ids_off + 12 * i
        _check_index(rd.u32(off), string_ids_size, "shorty string", off)
        ret = types[_check_index(rd.u32(off + 4), type_ids_size, "return type", off + 4)]
        params_off = rd.u32(off + 8)
        params: tuple[str, ...] = ()
        if params_off:
            count = rd.u32(params_off, "type_list")
            rd.table(params_off + 4, count, 2, "type_list")
            params = tuple(
                types[_check_index(rd.u16(params_off + 4 + 2 * j), type_ids_size, "parameter type", params_off + 4 + 2 * j)]
                for j in range(count)
            )
        protos.append((ret, params))

    rd.table(method_ids_off, method_ids_size, 8, "method_ids")
    method_refs = []
    for i in range(method_ids_size):
        off = method_ids_off + 8 * i
        method_refs.append((
            _check_index(rd.u16(off), type_ids_size, "method class type", off),
            _check_index(rd.u16(off + 2), proto_ids_size, "method proto", off + 2),
            _check_index(rd.u32(off + 4), string_ids_size, "method name", off + 4),
        ))

    rd.table(class_defs_off, class_defs_size, 32, "class_defs")
    classes = []
    for i in range(class_defs_size):
        off = class_defs_off + 32 * i
        descriptor = types[_check_index(rd.u32(off), type_ids_size, "class type", off)]
        class_data_off = rd.u32(off + 24)
        methods = _parse_class_data(rd, class_data_off, method_ids_size) if class_data_off else ()
        classes.append(ClassDef(descriptor, methods))

    return DexFile(
        version=int(data[4:7]),
        strings=tuple(strings),
        type_descriptors=tuple(types),
        protos=tuple(protos),
        method_refs=tuple(method_refs),
        classes=tuple(classes),
        diagnostics=tuple(diagnostics),
    )


def _parse_class_data(rd: _Reader, offset: int, method_limit: int) -> tuple[EncodedMethod, ...]:
    pos = offset
    sizes = []
    for _ in range(4):
        value, pos = rd.uleb128(pos, "class_data")
        sizes.append(value)
    static_fields, instance_fields, direct_methods, virtual_methods = sizes
    # each encoded field needs >= 2 bytes, each method >= 3
    if pos + 2 * (static_fields + instance_fields) + 3 * (direct_methods + virtual_methods) > rd.size:
        raise TruncatedSection("class_data member counts exceed file", offset)
    for _ in range(2 * (static_fields + instance_fields)):
        _, pos = rd.uleb128(pos, "encoded_field")
    methods = []
    for count in (direct_methods, virtual_methods):
        idx = 0
        for _ in range(count):
            entry = pos
            diff, pos = rd.uleb128(pos, "encoded_method")
            flags, pos = rd.uleb128(pos, "encoded_method")
            code_off, pos = rd.uleb128(pos, "encoded_method")
            idx += diff
            _check_index(idx, method_limit, "encoded method", entry)
            methods.append(EncodedMethod(idx, flags, _read_code(rd, code_off) if code_off else None))
    return tuple(methods)


def _read_code(rd: _Reader, offset: int) -> tuple[int, ...]:
    rd.need(offset, 16, "code_item")
    insns_size = rd.u32(offset + 12)
    start = offset + 16
    rd.need(start, 2 * insns_size, "code_item insns")
    units = array.array("H")
    units.frombytes(rd.data[start:start + 2 * insns_size])
    if sys.byteorder == "big":
        units.byteswap()
    return tuple(units)


def payload_width(insns: tuple[int, ...] | list[int], offset: int) -> int | None:
    """Width of a payload pseudo-instruction at ``offset``, or None if the unit is not one."""
    ident = insns[offset]
    if ident not in (PACKED_SWITCH_PAYLOAD, SPARSE_SWITCH_PAYLOAD, FILL_ARRAY_DATA_PAYLOAD):
        return None
    if offset + 1 >= len(insns):
        raise TruncatedSection("payload header cut off", offset)
    if ident == PACKED_SWITCH_PAYLOAD:
        return 4 + 2 * insns[offset + 1]
    if ident == SPARSE_SWITCH_PAYLOAD:
        return 2 + 4 * insns[offset + 1]
    if offset + 3 >= len(insns):
        raise TruncatedSection("fill-array-data payload header cut off", offset)
    element_width = insns[offset + 1]
    count = insns[offset + 2] | (insns[offset + 3] << 16)
    return 4 + (element_width * count + 1) // 2


def iter_instructions(insns: tuple[int, ...] | list[int]) -> Iterator[tuple[int, int, int]]:
    """Yield ``(offset, opcode, width)`` for every instruction, skipping payloads.

    Offsets and widths are in 16-bit code units. Payload pseudo-instructions are
    yielded with opcode 0x00 and their full width. Raises UnknownOpcode or
    TruncatedSection (offset in code units) when the stream cannot be walked.
    """
    pos = 0
    n = len(insns)
    while pos < n:
        unit = insns[pos]
        opcode = unit & 0xFF
        if opcode == 0 and unit:
            width = payload_width(insns, pos)
            if width is None:
                raise UnknownOpcode(f"nop with unknown payload ident {unit:#06x}", pos)
        else:
            width = INSTRUCTION_WIDTH[opcode]
            if width is None:
                raise UnknownOpcode(f"unused opcode {opcode:#04x}", pos)
        if pos + width > n:
            raise TruncatedSection(f"instruction {opcode:#04x} runs past end of code", pos)
        yield pos, opcode, width
        pos += width


def _method_label(dex: DexFile, method: EncodedMethod) -> str:
    try:
        return str(dex.method_ref(method.method_idx))
    except IndexError:
        return f"method@{method.method_idx}"


def extract_call_edges(dex: DexFile, app_id: str, diagnostics: list[Diagnostic] | None = None) -> list[CallEdge]:
    """One CallEdge per invoke instruction, in class, method, offset order.

    A method whose code cannot be walked is abandoned at the failing instruction
    (edges decoded before it are kept) and recorded in ``diagnostics``.
    """
    if diagnostics is None:
        diagnostics = []
    cache: dict[int, MethodRef] = {}
    n_methods = len(dex.method_refs)
    edges: list[CallEdge] = []
    for cls in dex.classes:
        for method in cls.methods:
            insns = method.insns
            if not insns:
                continue
            flagged_unsupported = False
            try:
                for pos, opcode, _ in iter_instructions(insns):
                    kind = INVOKE_KINDS.get(opcode)
                    if kind is not None:
                        idx = insns[pos + 1]
                        if idx >= n_methods:
                            raise IndexOutOfRange(f"invoke target {idx} >= {n_methods}", pos)
                        ref = cache.get(idx)
                        if ref is None:
                            ref = cache[idx] = dex.method_ref(idx)
                        edges.append(CallEdge(app_id, cls.descriptor, ref, kind))
                    elif opcode in UNSUPPORTED_INVOKES and not flagged_unsupported:
                        flagged_unsupported = True
                        diagnostics.append(Diagnostic(
                            "unsupported-invoke", _method_label(dex, method),
                            f"invoke-polymorphic/custom at {pos} not recorded"))
            except DexError as exc:
                diagnostics.append(Diagnostic(
                    "unknown-opcode" if isinstance(exc, UnknownOpcode) else "bad-code",
                    _method_label(dex, method), str(exc)))
    return edges


def class_string_constants(dex: DexFile, cls: ClassDef) -> set[str]:
    """String constants loaded by const-string in the class's code."""
    found: set[str] = set()
    n_strings = len(dex.strings)
    for method in cls.methods:
        if not method.insns:
            continue
        insns = method.insns
        try:
            for pos, opcode, _ in iter_instructions(insns):
                if opcode == CONST_STRING:
                    idx = insns[pos + 1]
                elif opcode == CONST_STRING_JUMBO:
                    idx = insns[pos + 1] | (insns[pos + 2] << 16)
                else:
                    continue
                if idx < n_strings:
                    found.add(dex.strings[idx])
        except DexError:
            continue
    return found


def summarize_classes(dex: DexFile) -> list[ClassSummary]:
    """Structural summaries of every class definition, in file order."""
    out = []
    for cls in dex.classes:
        shape = []
        for method in cls.methods:
            _, proto_idx, _ = dex.method_refs[method.method_idx]
            ret, params = dex.protos[proto_idx]
            shape.append((len(params), return_kind(ret)))
        out.append(ClassSummary(cls.descriptor, tuple(sorted(shape)), tuple(sorted(class_string_constants(dex, cls)))))
    return out
