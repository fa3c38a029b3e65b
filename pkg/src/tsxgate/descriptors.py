"""Bit-exact selectors, segment descriptors and call-gate descriptors.

Layouts (little-endian, byte offsets):

Segment descriptor, 8 bytes::

    0-1  limit 15:0
    2-4  base 23:0
    5    access: P(7) DPL(6:5) S(4) type(3:0)
    6    flags: G(7) D/B(6) L(5) AVL(4) | limit 19:16
    7    base 31:24

Call gate, legacy form, 8 bytes::

    0-1  offset 15:0
    2-3  target code selector
    4    parameter count (4:0), bits 7:5 zero
    5    access: P(7) DPL(6:5) S=0(4) type(3:0)
    6-7  offset 31:16

Call gate, long-mode form, 16 bytes (two consecutive table slots)::

    0-7   as the legacy form, byte 4 zero
    8-11  offset 63:32
    12-15 reserved; the type field of the upper slot (byte 13, bits 4:0)
          must be zero so the upper half never decodes as a valid gate
"""

import enum
import struct
from dataclasses import dataclass

from .validation import check_int, check_ring, check_uint, PAGE_SIZE

SLOT_SIZE = 8


class TableIndicator(enum.IntEnum):
    GDT = 0
    LDT = 1


class TableKind(enum.Enum):
    GDT = "GDT"
    IDT = "IDT"
    LDT = "LDT"


class OperatingMode(enum.Enum):
    LEGACY32 = "Legacy32"
    LONG64 = "Long64"

    @property
    def word_size(self):
        return 8 if self is OperatingMode.LONG64 else 4


class DescriptorError(ValueError):
    """A descriptor field is out of range or a byte image is malformed."""


class GateType(enum.IntEnum):
    """System-descriptor type nibble (S flag clear)."""

    RESERVED_0 = 0x0
    TSS16_AVAILABLE = 0x1
    LDT = 0x2
    TSS16_BUSY = 0x3
    CALL_GATE16 = 0x4
    TASK_GATE = 0x5
    INTERRUPT_GATE16 = 0x6
    TRAP_GATE16 = 0x7
    RESERVED_8 = 0x8
    TSS32_AVAILABLE = 0x9
    RESERVED_A = 0xA
    TSS32_BUSY = 0xB
    CALL_GATE32 = 0xC
    RESERVED_D = 0xD
    INTERRUPT_GATE32 = 0xE
    TRAP_GATE32 = 0xF

    @property
    def meaning(self):
        return _GATE_MEANINGS[self]

    @property
    def reserved(self):
        return self in (GateType.RESERVED_0, GateType.RESERVED_8,
                        GateType.RESERVED_A, GateType.RESERVED_D)

    @property
    def is_call_gate(self):
        return self in (GateType.CALL_GATE16, GateType.CALL_GATE32)

    @classmethod
    def from_meaning(cls, text):
        for member, label in _GATE_MEANINGS.items():
            if label == text:
                return member
        raise KeyError(text)


_GATE_MEANINGS = {
    GateType.RESERVED_0: "Reserved (0x0)",
    GateType.TSS16_AVAILABLE: "Available 16-bit TSS",
    GateType.LDT: "Local Descriptor Table (LDT)",
    GateType.TSS16_BUSY: "Busy 16-bit TSS",
    GateType.CALL_GATE16: "16-bit call-gate",
    GateType.TASK_GATE: "Task Gate",
    GateType.INTERRUPT_GATE16: "16-bit Interrupt Gate",
    GateType.TRAP_GATE16: "16-bit Trap Gate",
    GateType.RESERVED_8: "Reserved (0x8)",
    GateType.TSS32_AVAILABLE: "Available 32-bit TSS",
    GateType.RESERVED_A: "Reserved (0xA)",
    GateType.TSS32_BUSY: "Busy 32-bit TSS",
    GateType.CALL_GATE32: "32-bit call-gate",
    GateType.RESERVED_D: "Reserved (0xD)",
    GateType.INTERRUPT_GATE32: "32-bit Interrupt Gate",
    GateType.TRAP_GATE32: "32-bit Trap Gate",
}

# code/data type nibble bits (S flag set)
TYPE_ACCESSED = 0x1
TYPE_RW = 0x2
TYPE_CONFORMING = 0x4
TYPE_EXECUTABLE = 0x8


@dataclass(frozen=True)
class Selector:
    index: int
    table_indicator: TableIndicator = TableIndicator.GDT
    rpl: int = 0

    def __post_init__(self):
        check_uint(self.index, 13, "selector index")
        check_ring(self.rpl, "rpl")
        object.__setattr__(self, "table_indicator", TableIndicator(self.table_indicator))

    @property
    def raw(self):
        return (self.index << 3) | (int(self.table_indicator) << 2) | self.rpl

    @classmethod
    def from_raw(cls, raw):
        raw = check_uint(raw, 16, "selector")
        return cls(raw >> 3, TableIndicator((raw >> 2) & 1), raw & 3)

    def with_rpl(self, rpl):
        return Selector(self.index, self.table_indicator, rpl)

    @property
    def is_null(self):
        return self.index == 0 and self.table_indicator is TableIndicator.GDT

    def __int__(self):
        return self.raw

    def __repr__(self):
        return f"Selector({self.raw:#06x}: index={self.index}, ti={self.table_indicator.name}, rpl={self.rpl})"


@dataclass(frozen=True)
class SegmentDescriptor:
    base: int = 0
    limit: int = 0
    type_field: int = 0
    s_flag: bool = False
    dpl: int = 0
    present: bool = False
    available: bool = False
    long_mode: bool = False
    default_size: bool = False
    granularity: bool = False

    def __post_init__(self):
        try:
            check_uint(self.base, 32, "base")
            check_uint(self.limit, 20, "limit")
            check_uint(self.type_field, 4, "type")
            check_ring(self.dpl, "dpl")
        except ValueError as exc:
            raise DescriptorError(str(exc)) from None

    @classmethod
    def code(cls, dpl, *, base=0, limit=0xFFFFF, conforming=False, readable=True,
             long_mode=True, present=True):
        type_field = TYPE_EXECUTABLE | TYPE_ACCESSED
        if conforming:
            type_field |= TYPE_CONFORMING
        if readable:
            type_field |= TYPE_RW
        return cls(base=base, limit=limit, type_field=type_field, s_flag=True, dpl=dpl,
                   present=present, long_mode=long_mode, default_size=not long_mode,
                   granularity=True)

    @classmethod
    def data(cls, dpl, *, base=0, limit=0xFFFFF, writable=True, present=True):
        type_field = TYPE_ACCESSED | (TYPE_RW if writable else 0)
        return cls(base=base, limit=limit, type_field=type_field, s_flag=True, dpl=dpl,
                   present=present, default_size=True, granularity=True)

    @property
    def is_null(self):
        return self == SegmentDescriptor()

    @property
    def is_system(self):
        return not self.s_flag

    @property
    def is_code(self):
        return self.s_flag and bool(self.type_field & TYPE_EXECUTABLE)

    @property
    def is_data(self):
        return self.s_flag and not self.type_field & TYPE_EXECUTABLE

    @property
    def conforming(self):
        return self.is_code and bool(self.type_field & TYPE_CONFORMING)

    @property
    def readable(self):
        return self.is_data or (self.is_code and bool(self.type_field & TYPE_RW))

    @property
    def gate_type(self):
        """Table-1 classification; None for code/data descriptors."""
        return None if self.s_flag else GateType(self.type_field)

    @property
    def loadable(self):
        if self.s_flag:
            return True
        return not GateType(self.type_field).reserved

    @property
    def byte_limit(self):
        return (self.limit << 12) | 0xFFF if self.granularity else self.limit

    @property
    def access_byte(self):
        return ((self.present << 7) | (self.dpl << 5) | (self.s_flag << 4)
                | self.type_field)


@dataclass(frozen=True)
class CallGateDescriptor:
    selector: Selector
    offset: int
    type_field: GateType = GateType.CALL_GATE32
    dpl: int = 3
    present: bool = True
    param_count: int = 0
    mode: OperatingMode = OperatingMode.LEGACY32

    def __post_init__(self):
        if not isinstance(self.selector, Selector):
            raise DescriptorError("selector must be a Selector")
        try:
            type_field = GateType(self.type_field)
        except ValueError:
            raise DescriptorError(f"type nibble {self.type_field!r} out of range") from None
        if not type_field.is_call_gate:
            raise DescriptorError(f"{type_field.meaning} is not a call-gate type")
        object.__setattr__(self, "type_field", type_field)
        object.__setattr__(self, "mode", OperatingMode(self.mode))
        try:
            check_ring(self.dpl, "dpl")
            check_uint(self.param_count, 5, "param_count")
            check_uint(self.offset, 64 if self.mode is OperatingMode.LONG64 else 32, "offset")
        except ValueError as exc:
            raise DescriptorError(str(exc)) from None
        if self.mode is OperatingMode.LONG64:
            if type_field is not GateType.CALL_GATE32:
                raise DescriptorError("long-mode call gates use type 0xC")
            if self.param_count:
                raise DescriptorError("long-mode call gates carry no parameter count")

    @property
    def offset0_15(self):
        return self.offset & 0xFFFF

    @property
    def offset16_31(self):
        return (self.offset >> 16) & 0xFFFF

    @property
    def offset32_63(self):
        return (self.offset >> 32) & 0xFFFFFFFF

    @property
    def size(self):
        return 16 if self.mode is OperatingMode.LONG64 else 8

    @property
    def access_byte(self):
        return (self.present << 7) | (self.dpl << 5) | int(self.type_field)

    @property
    def gate_type(self):
        return self.type_field


def _validate(d):
    # frozen dataclasses validate in __post_init__, but callers may bypass it
    # with object.__setattr__ or dataclasses.replace on a bad value
    try:
        d.__post_init__()
    except (TypeError, ValueError) as exc:
        raise DescriptorError(str(exc)) from None


def encode_descriptor(d):
    """Return the 8-byte (or 16-byte long-mode gate) image of ``d``."""
    _validate(d)
    if isinstance(d, CallGateDescriptor):
        low = struct.pack(
            "<HHBBH",
            d.offset0_15,
            d.selector.raw,
            d.param_count,
            d.access_byte,
            d.offset16_31,
        )
        if d.mode is OperatingMode.LEGACY32:
            return low
        return low + struct.pack("<II", d.offset32_63, 0)
    if isinstance(d, SegmentDescriptor):
        flags = ((d.granularity << 3) | (d.default_size << 2) | (d.long_mode << 1)
                 | int(d.available))
        return struct.pack(
            "<HHBBBB",
            d.limit & 0xFFFF,
            d.base & 0xFFFF,
            (d.base >> 16) & 0xFF,
            d.access_byte,
            (flags << 4) | (d.limit >> 16),
            (d.base >> 24) & 0xFF,
        )
    raise TypeError(f"cannot encode {type(d).__name__}")


def decode_descriptor(data, mode=OperatingMode.LEGACY32):
    """Decode an 8-byte slot, or a 16-byte long-mode call gate.

    In long mode an 8-byte input holding a call-gate type is rejected: the
    caller must supply both slots. Reserved system types decode to a
    ``SegmentDescriptor`` whose ``loadable`` is False.
    """
    data = bytes(data)
    mode = OperatingMode(mode)
    if len(data) not in (8, 16):
        raise DescriptorError(f"descriptor images are 8 or 16 bytes, got {len(data)}")
    access = data[5]
    s_flag = bool(access & 0x10)
    type_field = access & 0xF
    is_gate = not s_flag and GateType(type_field).is_call_gate

    if len(data) == 16:
        if mode is not OperatingMode.LONG64 or not is_gate or type_field != GateType.CALL_GATE32:
            raise DescriptorError("16-byte images are only defined for long-mode call gates")
    if is_gate:
        off_lo, sel, params, _, off_mid = struct.unpack_from("<HHBBH", data)
        if mode is OperatingMode.LONG64:
            if len(data) != 16:
                raise DescriptorError("long-mode call gates occupy 16 bytes")
            if type_field != GateType.CALL_GATE32:
                raise DescriptorError("16-bit call gates are invalid in long mode")
            (off_hi,) = struct.unpack_from("<I", data, 8)
            offset = (off_hi << 32) | (off_mid << 16) | off_lo
            param_count = 0
        else:
            offset = (off_mid << 16) | off_lo
            param_count = params & 0x1F
        return CallGateDescriptor(
            selector=Selector.from_raw(sel),
            offset=offset,
            type_field=GateType(type_field),
            dpl=(access >> 5) & 3,
            present=bool(access & 0x80),
            param_count=param_count,
            mode=mode,
        )

    limit_lo, base_lo, base_mid, _, flags_limit, base_hi = struct.unpack("<HHBBBB", data)
    flags = flags_limit >> 4
    return SegmentDescriptor(
        base=(base_hi << 24) | (base_mid << 16) | base_lo,
        limit=((flags_limit & 0xF) << 16) | limit_lo,
        type_field=type_field,
        s_flag=s_flag,
        dpl=(access >> 5) & 3,
        present=bool(access & 0x80),
        available=bool(flags & 1),
        long_mode=bool(flags & 2),
        default_size=bool(flags & 4),
        granularity=bool(flags & 8),
    )


def build_call_gate(target_offset, code_selector, dpl=3, mode=OperatingMode.LONG64, table=None):
    """Build a present call gate (type 0xC) that jumps to ``target_offset``.

    ``code_selector`` may be a Selector or a raw value (0x8 selects the
    ring-0 code segment of the simulated GDT). When ``table`` is given the
    selector is checked to name a present code segment there.
    """
    if not isinstance(code_selector, Selector):
        code_selector = Selector.from_raw(check_int(code_selector, "code_selector"))
    if table is not None:
        target = table.descriptor(code_selector.index, OperatingMode.LEGACY32)
        if not (isinstance(target, SegmentDescriptor) and target.is_code and target.present):
            raise DescriptorError(f"{code_selector!r} does not name a present code segment")
    return CallGateDescriptor(
        selector=code_selector,
        offset=target_offset,
        type_field=GateType.CALL_GATE32,
        dpl=dpl,
        present=True,
        param_count=0,
        mode=mode,
    )


class DescriptorTable:
    """A GDT, IDT or LDT as a run of raw 8-byte slots.

    ``data`` may be a bytearray shared with simulated memory; the table then
    sees every write made through that memory.
    """

    def __init__(self, data, base=0, kind=TableKind.GDT):
        if len(data) == 0 or len(data) % SLOT_SIZE:
            raise DescriptorError("table size must be a positive multiple of 8")
        self.data = data if isinstance(data, (bytearray, memoryview)) else bytearray(data)
        self.base = base
        self.kind = TableKind(kind)
        if self.kind is TableKind.GDT and any(self.data[:SLOT_SIZE]):
            raise DescriptorError("GDT slot 0 must be the null descriptor")

    @classmethod
    def empty(cls, slot_count=PAGE_SIZE // SLOT_SIZE, base=0, kind=TableKind.GDT):
        return cls(bytearray(slot_count * SLOT_SIZE), base, kind)

    @property
    def slot_count(self):
        return len(self.data) // SLOT_SIZE

    @property
    def limit(self):
        return SLOT_SIZE * self.slot_count - 1

    def __len__(self):
        return self.slot_count

    def slot(self, index):
        if not 0 <= index < self.slot_count:
            raise IndexError(f"slot {index} outside table of {self.slot_count}")
        return bytes(self.data[index * SLOT_SIZE:(index + 1) * SLOT_SIZE])

    def write_slot(self, index, raw):
        raw = bytes(raw)
        if len(raw) % SLOT_SIZE or index < 0 or index + len(raw) // SLOT_SIZE > self.slot_count:
            raise IndexError(f"{len(raw)} bytes do not fit at slot {index}")
        if self.kind is TableKind.GDT and index == 0 and any(raw[:SLOT_SIZE]):
            raise DescriptorError("GDT slot 0 must stay null")
        self.data[index * SLOT_SIZE:index * SLOT_SIZE + len(raw)] = raw

    def put(self, index, descriptor):
        self.write_slot(index, encode_descriptor(descriptor))

    def descriptor(self, index, mode=OperatingMode.LEGACY32):
        """Decode slot ``index``; long-mode call gates consume the next slot too."""
        mode = OperatingMode(mode)
        raw = self.slot(index)
        access = raw[5]
        is_gate = not access & 0x10 and GateType(access & 0xF).is_call_gate
        if mode is OperatingMode.LONG64 and is_gate:
            if index + 1 >= self.slot_count:
                raise DescriptorError("long-mode gate truncated by table end")
            raw = raw + self.slot(index + 1)
        return decode_descriptor(raw, mode)

    def hexdump(self):
        """16 bytes per line, slots in ascending (little-endian) order."""
        lines = []
        for off in range(0, len(self.data), 16):
            chunk = bytes(self.data[off:off + 16])
            lines.append(f"{self.base + off:016x}: {chunk.hex(' ')}")
        return "\n".join(lines)
