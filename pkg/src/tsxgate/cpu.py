"""Privilege-ring state machine for one simulated core.

Operations mutate a :class:`CpuCore` in place and raise a
:class:`~tsxgate.faults.Fault` on failure. Every check runs before any state
is committed, so a faulting operation leaves the core untouched. Each call
appends a :class:`TraceEvent` to ``cpu.trace``.
"""

import enum
import functools
from dataclasses import dataclass, field

from .descriptors import (
    CallGateDescriptor,
    DescriptorError,
    OperatingMode,
    SegmentDescriptor,
    Selector,
    TableIndicator,
)
from .faults import Fault, GeneralProtection, VmExit
from .validation import check_ring

CR0_PE = 1 << 0
CR4_UMIP = 1 << 11

DATA_SEGMENT_REGISTERS = ("ds", "es", "fs", "gs")


class TransferKind(enum.Enum):
    JMP = "JMP"
    CALL = "CALL"


class StoreInstruction(enum.Enum):
    SGDT = "SGDT"
    SIDT = "SIDT"
    SLDT = "SLDT"
    SMSW = "SMSW"
    STR = "STR"


class LoadInstruction(enum.Enum):
    LGDT = "LGDT"
    LIDT = "LIDT"
    LLDT = "LLDT"
    LTR = "LTR"


# descriptor-table exiting intercepts these; SMSW is UMIP-only
EXITING_STORES = frozenset({StoreInstruction.SGDT, StoreInstruction.SIDT,
                            StoreInstruction.SLDT, StoreInstruction.STR})


@dataclass(frozen=True)
class DescriptorCache:
    base: int = 0
    limit: int = 0
    access: int = 0

    @classmethod
    def from_descriptor(cls, desc):
        return cls(desc.base, desc.byte_limit, desc.access_byte)

    @property
    def dpl(self):
        return (self.access >> 5) & 3

    @property
    def present(self):
        return bool(self.access & 0x80)


@dataclass
class SegmentRegister:
    visible: Selector = field(default_factory=lambda: Selector(0))
    hidden: DescriptorCache = field(default_factory=DescriptorCache)


@dataclass(frozen=True)
class TableRegister:
    base: int
    limit: int


@dataclass(frozen=True)
class RingStack:
    selector: Selector
    pointer: int


@dataclass
class Tss:
    ring_stacks: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TraceEvent:
    operation: str
    cpl_before: int
    cpl_after: int
    fault: str = None

    def to_dict(self):
        return {"operation": self.operation, "cpl_before": self.cpl_before,
                "cpl_after": self.cpl_after, "fault": self.fault}


@dataclass
class CpuCore:
    core_id: int = 0
    mode: OperatingMode = OperatingMode.LONG64
    cs: SegmentRegister = field(default_factory=SegmentRegister)
    ss: SegmentRegister = field(default_factory=SegmentRegister)
    ds: SegmentRegister = field(default_factory=SegmentRegister)
    es: SegmentRegister = field(default_factory=SegmentRegister)
    fs: SegmentRegister = field(default_factory=SegmentRegister)
    gs: SegmentRegister = field(default_factory=SegmentRegister)
    gdtr: TableRegister = TableRegister(0, 0)
    idtr: TableRegister = TableRegister(0, 0)
    ldtr: Selector = field(default_factory=lambda: Selector(0))
    tr: Selector = field(default_factory=lambda: Selector(0))
    tss: Tss = field(default_factory=Tss)
    cr0: int = CR0_PE
    cr4: int = 0
    sp: int = 0
    instruction_pointer: int = 0
    msr_lstar: int = 0
    stack_memory: dict = field(default_factory=dict)
    elevated_token: bool = False
    trace: list = field(default_factory=list)

    @property
    def cpl(self):
        return self.cs.visible.rpl

    @property
    def cr4_umip(self):
        return bool(self.cr4 & CR4_UMIP)

    @cr4_umip.setter
    def cr4_umip(self, value):
        self.cr4 = (self.cr4 | CR4_UMIP) if value else (self.cr4 & ~CR4_UMIP)

    @property
    def word_size(self):
        return self.mode.word_size

    def push(self, value):
        self.sp -= self.word_size
        self.stack_memory[self.sp] = value & ((1 << (8 * self.word_size)) - 1)

    def read_stack(self, address):
        try:
            return self.stack_memory[address]
        except KeyError:
            raise GeneralProtection(f"stack read at {address:#x} outside pushed frame") from None

    def peek(self, count):
        w = self.word_size
        return [self.read_stack(self.sp + i * w) for i in range(count)]

    def register_state(self):
        """Snapshot of architectural registers (excludes stack memory and trace)."""
        return (
            self.cs.visible.raw, self.cs.hidden,
            self.ss.visible.raw, self.ss.hidden,
            tuple((getattr(self, r).visible.raw, getattr(self, r).hidden)
                  for r in DATA_SEGMENT_REGISTERS),
            self.gdtr, self.idtr, self.ldtr.raw, self.tr.raw,
            self.cr0, self.cr4, self.sp, self.instruction_pointer,
        )


def _traced(fn):
    @functools.wraps(fn)
    def wrapper(cpu, *args, **kwargs):
        label = fn.__name__
        for arg in list(args) + list(kwargs.values()):
            if isinstance(arg, (StoreInstruction, LoadInstruction, TransferKind)):
                label = f"{label}:{arg.value}"
        before = cpu.cpl
        try:
            result = fn(cpu, *args, **kwargs)
        except Fault as exc:
            cpu.trace.append(TraceEvent(label, before, cpu.cpl, str(exc)))
            raise
        cpu.trace.append(TraceEvent(label, before, cpu.cpl))
        return result

    return wrapper


def _fetch(table, sel, mode):
    if sel.table_indicator is not TableIndicator.GDT:
        raise GeneralProtection(f"{sel!r}: LDT selectors are not modeled")
    if sel.index >= table.slot_count:
        raise GeneralProtection(f"{sel!r} beyond table limit {table.limit:#x}")
    try:
        return table.descriptor(sel.index, mode)
    except DescriptorError as exc:
        raise GeneralProtection(f"{sel!r}: {exc}") from None


def _fetch_code(table, sel, mode):
    if sel.is_null:
        raise GeneralProtection("null code selector")
    desc = _fetch(table, sel, mode)
    if not (isinstance(desc, SegmentDescriptor) and desc.is_code):
        raise GeneralProtection(f"{sel!r} is not a code segment")
    if not desc.present:
        raise GeneralProtection(f"{sel!r} code segment not present")
    return desc


def _stack_segment(table, sel, ring, mode):
    """Validate a stack selector for ``ring``; long mode allows a null SS at ring 0."""
    if sel.is_null:
        if mode is OperatingMode.LONG64 and ring < 3:
            return SegmentRegister(sel.with_rpl(ring), DescriptorCache())
        raise GeneralProtection("null stack selector")
    desc = _fetch(table, sel, mode)
    if not (isinstance(desc, SegmentDescriptor) and desc.is_data
            and desc.type_field & 0x2 and desc.present and desc.dpl == ring):
        raise GeneralProtection(f"{sel!r} is not a writable ring-{ring} stack segment")
    return SegmentRegister(sel.with_rpl(ring), DescriptorCache.from_descriptor(desc))


@_traced
def load_data_segment(cpu, table, sel, register="ds"):
    if register not in DATA_SEGMENT_REGISTERS:
        raise ValueError(f"register must be one of {DATA_SEGMENT_REGISTERS}")
    if sel.is_null:
        setattr(cpu, register, SegmentRegister(sel, DescriptorCache()))
        return
    desc = _fetch(table, sel, cpu.mode)
    if not isinstance(desc, SegmentDescriptor) or desc.is_system:
        raise GeneralProtection(f"{sel!r} names a system descriptor")
    if not desc.readable:
        raise GeneralProtection(f"{sel!r} is execute-only")
    if not desc.conforming:
        epl = max(cpu.cpl, sel.rpl)
        if desc.dpl < epl:
            raise GeneralProtection(f"dpl {desc.dpl} < max(cpl {cpu.cpl}, rpl {sel.rpl})")
    if not desc.present:
        raise GeneralProtection(f"{sel!r} not present")
    setattr(cpu, register, SegmentRegister(sel, DescriptorCache.from_descriptor(desc)))


@_traced
def far_transfer_direct(cpu, table, sel, kind=TransferKind.CALL, offset=0):
    """Far JMP/CALL naming a code segment directly (a gate selector is routed through the gate)."""
    kind = TransferKind(kind)
    desc = _fetch(table, sel, cpu.mode)
    if isinstance(desc, CallGateDescriptor):
        return _gate_transfer(cpu, table, sel, kind)
    desc = _fetch_code(table, sel, cpu.mode)
    if desc.conforming:
        if desc.dpl > cpu.cpl:
            raise GeneralProtection(f"conforming dpl {desc.dpl} > cpl {cpu.cpl}")
    elif desc.dpl != cpu.cpl or sel.rpl > cpu.cpl:
        raise GeneralProtection(f"nonconforming dpl {desc.dpl} != cpl {cpu.cpl}")
    if kind is TransferKind.CALL:
        cpu.push(cpu.cs.visible.raw)
        cpu.push(cpu.instruction_pointer)
    cpu.cs = SegmentRegister(sel.with_rpl(cpu.cpl), DescriptorCache.from_descriptor(desc))
    cpu.instruction_pointer = offset


@_traced
def far_call_through_gate(cpu, table, sel, kind=TransferKind.CALL):
    return _gate_transfer(cpu, table, sel, TransferKind(kind))


def _gate_transfer(cpu, table, sel, kind):
    gate = _fetch(table, sel, cpu.mode)
    if not isinstance(gate, CallGateDescriptor):
        raise GeneralProtection(f"{sel!r} is not a call gate")
    if not gate.present:
        raise GeneralProtection(f"{sel!r} call gate not present")
    epl = max(cpu.cpl, sel.rpl)
    if epl > gate.dpl:
        raise GeneralProtection(f"max(cpl {cpu.cpl}, rpl {sel.rpl}) > gate dpl {gate.dpl}")
    target = _fetch_code(table, gate.selector, cpu.mode)
    if target.dpl > cpu.cpl:
        raise GeneralProtection(f"gate target dpl {target.dpl} > cpl {cpu.cpl}")

    new_cpl = cpu.cpl if target.conforming else target.dpl
    new_cs = SegmentRegister(gate.selector.with_rpl(new_cpl),
                             DescriptorCache.from_descriptor(target))
    if new_cpl < cpu.cpl:
        if kind is TransferKind.JMP:
            raise GeneralProtection("far JMP through a gate cannot change privilege")
        ring_stack = cpu.tss.ring_stacks.get(new_cpl)
        if ring_stack is None:
            raise GeneralProtection(f"TSS has no ring-{new_cpl} stack")
        new_ss = _stack_segment(table, ring_stack.selector, new_cpl, cpu.mode)
        w = cpu.word_size
        params = [cpu.read_stack(cpu.sp + i * w) for i in range(gate.param_count)]
        old_ss, old_sp = cpu.ss.visible.raw, cpu.sp
        old_cs, old_ip = cpu.cs.visible.raw, cpu.instruction_pointer

        cpu.ss = new_ss
        cpu.sp = ring_stack.pointer
        cpu.push(old_ss)
        cpu.push(old_sp)
        for value in reversed(params):
            cpu.push(value)
        cpu.push(old_cs)
        cpu.push(old_ip)
    elif kind is TransferKind.CALL:
        cpu.push(cpu.cs.visible.raw)
        cpu.push(cpu.instruction_pointer)
    cpu.cs = new_cs
    cpu.instruction_pointer = gate.offset


@_traced
def far_return(cpu, table, discard_bytes=0):
    """``lret`` / ``lret $n``: pop CS:IP, drop ``discard_bytes``, pop SS:SP on an outward return."""
    if discard_bytes < 0:
        raise ValueError("discard_bytes must be >= 0")
    w = cpu.word_size
    ip = cpu.read_stack(cpu.sp)
    cs_sel = Selector.from_raw(cpu.read_stack(cpu.sp + w) & 0xFFFF)
    if cs_sel.rpl < cpu.cpl:
        raise GeneralProtection(f"return to ring {cs_sel.rpl} from ring {cpu.cpl} is inward")
    desc = _fetch_code(table, cs_sel, cpu.mode)
    if desc.conforming:
        if desc.dpl > cs_sel.rpl:
            raise GeneralProtection("conforming return target dpl > rpl")
    elif desc.dpl != cs_sel.rpl:
        raise GeneralProtection(f"return target dpl {desc.dpl} != rpl {cs_sel.rpl}")
    new_cs = SegmentRegister(cs_sel, DescriptorCache.from_descriptor(desc))
    sp = cpu.sp + 2 * w + discard_bytes

    if cs_sel.rpl > cpu.cpl:
        new_sp = cpu.read_stack(sp)
        ss_sel = Selector.from_raw(cpu.read_stack(sp + w) & 0xFFFF)
        new_ss = _stack_segment(table, ss_sel, cs_sel.rpl, cpu.mode)
        cpu.ss = new_ss
        cpu.sp = new_sp
    else:
        cpu.sp = sp
    cpu.cs = new_cs
    cpu.instruction_pointer = ip


def store_value(cpu, which):
    """The value ``which`` produces when nothing intercepts it."""
    which = StoreInstruction(which)
    if which is StoreInstruction.SGDT:
        return cpu.gdtr
    if which is StoreInstruction.SIDT:
        return cpu.idtr
    if which is StoreInstruction.SLDT:
        return cpu.ldtr.raw
    if which is StoreInstruction.STR:
        return cpu.tr.raw
    return cpu.cr0 & 0xFFFF


@_traced
def exec_store_instruction(cpu, which, policy=None):
    """Execute SGDT/SIDT/SLDT/SMSW/STR.

    ``policy`` is any object with ``descriptor_table_exiting`` and
    ``umip_precedes_exiting`` attributes (a MitigationConfig); None means no
    hypervisor. UMIP itself is read from ``cpu.cr4``.
    """
    which = StoreInstruction(which)
    exiting = bool(getattr(policy, "descriptor_table_exiting", False))
    umip_first = bool(getattr(policy, "umip_precedes_exiting", True))
    umip_blocks = cpu.cr4_umip and cpu.cpl > 0
    exits = exiting and which in EXITING_STORES
    if umip_blocks and (umip_first or not exits):
        raise GeneralProtection(f"{which.value} at cpl {cpu.cpl} with CR4.UMIP set")
    if exits:
        raise VmExit(which.value, true_value=store_value(cpu, which))
    return store_value(cpu, which)


def apply_table_load(cpu, which, value):
    """Commit an LGDT/LIDT/LLDT/LTR without any checks (used by the VMM on pass-through)."""
    which = LoadInstruction(which)
    if which is LoadInstruction.LGDT:
        cpu.gdtr = _as_table_register(value)
    elif which is LoadInstruction.LIDT:
        cpu.idtr = _as_table_register(value)
    elif which is LoadInstruction.LLDT:
        cpu.ldtr = value if isinstance(value, Selector) else Selector.from_raw(value)
    else:
        cpu.tr = value if isinstance(value, Selector) else Selector.from_raw(value)


def _as_table_register(value):
    if isinstance(value, TableRegister):
        return value
    base, limit = value
    return TableRegister(base, limit)


@_traced
def exec_load_table_instruction(cpu, which, value, policy=None):
    which = LoadInstruction(which)
    if cpu.cpl > 0:
        raise GeneralProtection(f"{which.value} is privileged (cpl {cpu.cpl})")
    if getattr(policy, "descriptor_table_exiting", False):
        raise VmExit(which.value, operand=value)
    apply_table_load(cpu, which, value)


def force_cpl(cpu, ring):
    """Rewrite CS.RPL without a transfer; scenario setup only."""
    check_ring(ring)
    cpu.cs = SegmentRegister(cpu.cs.visible.with_rpl(ring), cpu.cs.hidden)
