"""Post-discovery chain: plant a call gate, enter ring 0, return, clean up.

The write-what-where primitive is assumed (the threat model grants it); it
can only write, through the kernel view, at kernel privilege. Shellcode is
a boolean effect, not bytes.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .cpu import (
    CpuCore,
    DescriptorCache,
    RingStack,
    SegmentRegister,
    TableRegister,
    Tss,
    far_call_through_gate,
    far_return,
)
from .descriptors import (
    SLOT_SIZE,
    CallGateDescriptor,
    OperatingMode,
    Selector,
    build_call_gate,
    encode_descriptor,
)
from .faults import Bugcheck, Fault, GeneralProtection
from .layout import (
    KERNEL_CS,
    KERNEL_DS,
    OS_GDT_SLOTS,
    TSS_SELECTOR,
    USER_CS,
    USER_DS,
    USER_STACK_TOP,
    PageView,
)
from .validation import PAGE_SIZE, check_int, check_positive, hex64, page_of

PATCHGUARD_INTERVAL = (180.0, 600.0)
MARKER = b"RING0OK!"

# key for PatchGuard streams so they never collide with the search streams
_STREAM_PATCHGUARD = 2


class ShellcodeEffect(enum.Enum):
    ELEVATE_TOKEN = "ElevateToken"
    CLEAR_PT_SUPERVISOR = "ClearPtSupervisor"
    MARKER_ONLY = "MarkerOnly"


class WwwPrimitive:
    """Write-what-where: ``write(addr, data)`` in KernelView at ring 0.

    Each write is one trip into the kernel; ``on_kernel_exit`` callbacks run
    after it, as they would on the return to user mode.
    """

    def __init__(self, layout, on_kernel_exit=()):
        self.layout = layout
        self.on_kernel_exit = list(on_kernel_exit)
        self.writes = 0

    def write(self, addr, data):
        try:
            self.layout.write(addr, bytes(data), view=PageView.KERNEL, privilege=0)
            self.writes += 1
        finally:
            for hook in self.on_kernel_exit:
                hook(self.layout)


@dataclass
class InstalledGate:
    gdt_base: int
    slot_index: int
    gate: CallGateDescriptor
    prior: bytes
    page_before: bytes

    @property
    def address(self):
        return self.gdt_base + SLOT_SIZE * self.slot_index

    @property
    def selector(self):
        return Selector(self.slot_index, rpl=3)


def _slot_present(raw):
    return bool(raw[5] & 0x80)


def install_gate(www, gdt_base, slot_index, gate):
    """Write ``gate`` into slot ``slot_index`` of the GDT at ``gdt_base``.

    The prior slot bytes and the page image are captured by the simulator
    (not by the attacker, who has no read primitive) so the shellcode can
    restore them and the outcome can report whether it did.
    """
    slot_index = check_int(slot_index, "slot_index")
    encoded = encode_descriptor(gate)
    if slot_index < 1 or slot_index * SLOT_SIZE + len(encoded) > PAGE_SIZE:
        raise ValueError(f"slot {slot_index} does not fit a {len(encoded)}-byte gate")
    addr = gdt_base + SLOT_SIZE * slot_index
    layout = www.layout
    page = page_of(gdt_base)
    # unmapped or non-canonical gdt_base faults here, exactly as the write would
    page_before = layout.read(page, PAGE_SIZE)
    prior = layout.read(addr, len(encoded))
    if any(_slot_present(prior[i:i + SLOT_SIZE]) for i in range(0, len(prior), SLOT_SIZE)):
        raise ValueError(f"slot {slot_index} at {hex64(addr)} is already in use")
    www.write(addr, encoded)
    return InstalledGate(gdt_base, slot_index, gate, prior, page_before)


def payload_gate(layout, mode=OperatingMode.LONG64, dpl=3):
    """The injected gate: DPL 3, ring-0 code selector 0x8, target = shellcode."""
    return build_call_gate(layout.shellcode_address(), KERNEL_CS, dpl=dpl, mode=mode)


def boot_cpu(layout, core=0, mode=OperatingMode.LONG64, gdt_base=None):
    """A core running user code at ring 3 against the GDT at ``gdt_base``."""
    gdt_base = layout.gdt_base(core) if gdt_base is None else gdt_base
    table = layout.table_at(gdt_base)
    user_cs = Selector.from_raw(USER_CS)
    user_ds = Selector.from_raw(USER_DS)
    cpu = CpuCore(core_id=core, mode=mode)
    cpu.cs = SegmentRegister(user_cs, DescriptorCache.from_descriptor(table.descriptor(user_cs.index)))
    ds_cache = DescriptorCache.from_descriptor(table.descriptor(user_ds.index))
    cpu.ss = SegmentRegister(user_ds, ds_cache)
    for reg in ("ds", "es"):
        setattr(cpu, reg, SegmentRegister(user_ds, ds_cache))
    cpu.gdtr = TableRegister(gdt_base, PAGE_SIZE - 1)
    cpu.idtr = TableRegister(layout.idt_base(core), 256 * 16 - 1)
    cpu.tr = Selector.from_raw(TSS_SELECTOR)
    cpu.tss = Tss({0: RingStack(Selector.from_raw(KERNEL_DS), layout.kernel_stack_top(core))})
    cpu.sp = USER_STACK_TOP
    cpu.instruction_pointer = 0x1000
    cpu.msr_lstar = layout.msr_lstar
    return cpu


def apply_effect(cpu, layout, effect):
    effect = ShellcodeEffect(effect)
    if cpu.cpl != 0:
        raise GeneralProtection(f"shellcode effect {effect.value} attempted at cpl {cpu.cpl}")
    if effect is ShellcodeEffect.ELEVATE_TOKEN:
        cpu.elevated_token = True
    elif effect is ShellcodeEffect.CLEAR_PT_SUPERVISOR:
        for page in layout.pt_region_pages():
            layout.set_supervisor_bit(page, False)
    else:
        layout.write(layout.marker_address(), MARKER, view=PageView.KERNEL, privilege=0)


@dataclass
class ExploitOutcome:
    success: bool
    cpl_trace: list
    fault: Fault = None
    effects_applied: set = field(default_factory=set)
    gdt_restored: bool = False
    simulated_time: float = 0.0
    failed_at: str = None

    @property
    def failing_step(self):
        if self.fault is None:
            return None
        return f"{self.failed_at} {self.fault.kind.value}"

    def to_dict(self):
        return {
            "success": self.success,
            "cpl_trace": list(self.cpl_trace),
            "fault": None if self.fault is None else self.fault.to_dict(),
            "effects": sorted(e.value for e in self.effects_applied),
            "gdt_restored": self.gdt_restored,
            "simulated_time": round(self.simulated_time, 1),
        }


def run_exploit(cpu, layout, gate_selector, effect=ShellcodeEffect.ELEVATE_TOKEN,
                restore=True, installed=None, patchguard=None):
    """Far call through the planted gate, apply ``effect`` at ring 0, ``lret``.

    With ``restore`` the shellcode writes ``installed.prior`` back over the
    gate before returning. Faults end the run and land in the outcome.
    """
    if restore and installed is None:
        raise ValueError("restore needs the InstalledGate record")
    effect = ShellcodeEffect(effect)
    table = layout.table_at(cpu.gdtr.base)
    trace = [cpu.cpl]
    applied = set()
    step = "far call"
    fault = None
    try:
        far_call_through_gate(cpu, table, gate_selector)
        trace.append(cpu.cpl)
        step = "shellcode"
        apply_effect(cpu, layout, effect)
        applied.add(effect)
        if restore:
            step = "restore"
            layout.write(installed.address, installed.prior, view=PageView.KERNEL, privilege=0)
        step = "far return"
        far_return(cpu, table, 0)
        trace.append(cpu.cpl)
    except Fault as exc:
        fault = exc
    restored = False
    if installed is not None:
        restored = layout.read(page_of(installed.gdt_base), PAGE_SIZE) == installed.page_before
    success = fault is None and trace[0] == 3 and trace[-1] == 3 and 0 in trace
    return ExploitOutcome(
        success=success,
        cpl_trace=trace,
        fault=fault,
        effects_applied=applied,
        gdt_restored=restored,
        simulated_time=patchguard.now if patchguard is not None else 0.0,
        failed_at=None if fault is None else step,
    )


def exploit_chain(layout, gdt_base, core=0, effect=ShellcodeEffect.ELEVATE_TOKEN, restore=True,
                  slot_index=OS_GDT_SLOTS, www=None, cpu=None):
    """install_gate + run_exploit against a discovered ``gdt_base``.

    The slot defaults to the first pair above the OS-populated entries,
    which the attacker knows without reading the table. An install fault is
    reported as a failed outcome rather than raised.
    """
    www = www if www is not None else WwwPrimitive(layout)
    cpu = cpu if cpu is not None else boot_cpu(layout, core)
    gate = payload_gate(layout, cpu.mode)
    try:
        installed = install_gate(www, gdt_base, slot_index, gate)
    except Fault as exc:
        return ExploitOutcome(False, [cpu.cpl], exc, failed_at="install_gate")
    return run_exploit(cpu, layout, installed.selector, effect, restore, installed)


class PatchGuard:
    """Periodic GDT integrity check on simulated time.

    ``arm`` snapshots the GDT page and draws the next check uniformly from
    [180, 600] s ahead (millisecond grid, both ends reachable). Checks only
    happen inside :meth:`advance_time`.
    """

    def __init__(self, layout, gdt_base=None, core=0, rng=None, interval=PATCHGUARD_INTERVAL):
        self.layout = layout
        self.gdt_base = layout.gdt_base(core) if gdt_base is None else gdt_base
        if rng is None:
            rng = np.random.default_rng(
                np.random.SeedSequence(layout.seed, spawn_key=(_STREAM_PATCHGUARD, core)))
        self.rng = rng
        lo, hi = interval
        if not 0 < lo <= hi:
            raise ValueError("interval must satisfy 0 < lo <= hi")
        self.interval = (lo, hi)
        self.now = 0.0
        self.snapshot = None
        self.next_check = None
        self.armed = False
        self.halted = False
        self.checks = 0

    def _draw(self):
        lo, hi = (int(round(v * 1000)) for v in self.interval)
        return int(self.rng.integers(lo, hi + 1)) / 1000.0

    def _page(self):
        return self.layout.read(page_of(self.gdt_base), PAGE_SIZE)

    def arm(self):
        self.snapshot = self._page()
        self.next_check = self.now + self._draw()
        self.armed = True
        return self

    def tampered(self):
        return self._page() != self.snapshot

    def advance_time(self, seconds):
        """Move the clock; every crossed check compares the GDT to the snapshot."""
        seconds = check_positive(seconds, "seconds", strict=False)
        if self.halted:
            raise Bugcheck("machine already bugchecked")
        end = self.now + seconds
        while self.armed and self.next_check <= end:
            self.now = self.next_check
            self.checks += 1
            if self.tampered():
                self.halted = True
                self.armed = False
                raise Bugcheck(f"GDT at {hex64(self.gdt_base)} modified (check at {self.now:.1f} s)")
            self.next_check = self.now + self._draw()
        self.now = end


def advance_time(patchguard, layout, seconds):
    if layout is not patchguard.layout:
        raise ValueError("patchguard guards a different layout")
    patchguard.advance_time(seconds)
