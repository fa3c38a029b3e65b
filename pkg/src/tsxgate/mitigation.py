"""Defenses against the chain and the attack-outcome matrix.

UMIP and descriptor-table exiting only guard the store instructions
(SGDT and friends). The timing search never executes one, so it is blind
to both. The dual-GDT defense gives the kernel its own GDT copy that is off
the leak surface; the copy the search can find is either read-only
(``READ_ONLY``, the install write faults) or re-synced from the kernel copy
on every return to user mode (``RESYNC``, the far call finds no gate).
"""

import csv
import enum
import io
import itertools
from dataclasses import dataclass, field

from .cpu import (
    DescriptorCache,
    LoadInstruction,
    SegmentRegister,
    StoreInstruction,
    TableRegister,
    apply_table_load,
    exec_load_table_instruction,
    exec_store_instruction,
    load_data_segment,
)
from .descriptors import Selector
from .exploit import ShellcodeEffect, WwwPrimitive, boot_cpu, exploit_chain
from .faults import GeneralProtection, VmExit
from .layout import (
    IDT_TO_GDT,
    KERNEL_CS,
    KERNEL_GDT_REGION_BASE,
    SPOOF_REGION_BASE,
    USER_DS,
    USER_TEB,
    generate_layout,
)
from .search import SearchConfig, locate_tables
from .timing import NoiseModel, TimerKind
from .validation import PAGE_SIZE, is_canonical


class VmmPolicy(enum.Enum):
    PASS_THROUGH = "PassThrough"
    SPOOF = "Spoof"
    DENY = "Deny"

    @classmethod
    def parse(cls, text):
        if isinstance(text, cls):
            return text
        key = str(text).replace("-", "").replace("_", "").lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        raise ValueError(f"unknown VMM policy {text!r}; expected passthrough, spoof or deny")


class DualGdtMode(enum.Enum):
    READ_ONLY = "ReadOnly"
    RESYNC = "Resync"


@dataclass(frozen=True)
class MitigationConfig:
    """Defense switches. ``spoof_base`` is the fake IDT; the fake GDT sits 0x2000 above."""

    umip: bool = False
    descriptor_table_exiting: bool = False
    vmm_policy: VmmPolicy = VmmPolicy.PASS_THROUGH
    kaiser: bool = False
    dual_gdt: bool = False
    dual_gdt_mode: DualGdtMode = DualGdtMode.READ_ONLY
    umip_precedes_exiting: bool = True
    spoof_base: int = SPOOF_REGION_BASE

    def __post_init__(self):
        object.__setattr__(self, "vmm_policy", VmmPolicy.parse(self.vmm_policy))
        object.__setattr__(self, "dual_gdt_mode", DualGdtMode(self.dual_gdt_mode))
        if not is_canonical(self.spoof_base):
            raise ValueError("spoof_base must be canonical")

    def label(self):
        on = [name for name, flag in (("umip", self.umip), ("dte", self.descriptor_table_exiting),
                                      ("kaiser", self.kaiser), ("dual-gdt", self.dual_gdt)) if flag]
        return "+".join(on) or "baseline"


BASELINE = MitigationConfig()


@dataclass
class DualGdtState:
    user_gdt_base: int
    kernel_gdt_base: int
    mode: DualGdtMode = DualGdtMode.READ_ONLY
    reload_on_ring_switch: bool = True


class Vmm:
    """Hypervisor side of descriptor-table exiting."""

    def __init__(self, policy, spoof_base=SPOOF_REGION_BASE):
        self.policy = VmmPolicy.parse(policy)
        self.spoof_base = spoof_base
        self.exits = 0

    def handle_store(self, exit_):
        self.exits += 1
        which = StoreInstruction(exit_.instruction)
        if self.policy is VmmPolicy.PASS_THROUGH:
            return exit_.true_value
        if self.policy is VmmPolicy.DENY:
            return TableRegister(0, 0) if which in (StoreInstruction.SGDT, StoreInstruction.SIDT) else 0
        if which is StoreInstruction.SIDT:
            return TableRegister(self.spoof_base, exit_.true_value.limit)
        if which is StoreInstruction.SGDT:
            return TableRegister(self.spoof_base + IDT_TO_GDT, exit_.true_value.limit)
        # selectors carry no address; nothing worth faking
        return exit_.true_value

    def handle_load(self, cpu, exit_):
        self.exits += 1
        which = LoadInstruction(exit_.instruction)
        if self.policy is VmmPolicy.DENY and which in (LoadInstruction.LGDT, LoadInstruction.LIDT):
            return
        apply_table_load(cpu, which, exit_.operand)


class Scenario:
    """A layout and its cores with a MitigationConfig applied."""

    def __init__(self, config, layout, cpus):
        self.config = config
        self.layout = layout
        self.cpus = list(cpus)
        self.vmm = Vmm(config.vmm_policy, config.spoof_base) if config.descriptor_table_exiting else None
        self.dual = {}
        self.kernel_exit_hooks = []

    def www(self):
        return WwwPrimitive(self.layout, self.kernel_exit_hooks)

    def store(self, core, which):
        """Run a store instruction on ``core``; exits are resolved by the VMM."""
        cpu = self.cpus[core]
        try:
            return exec_store_instruction(cpu, which, self.config)
        except VmExit as exit_:
            return self.vmm.handle_store(exit_)

    def load(self, core, which, value):
        cpu = self.cpus[core]
        try:
            exec_load_table_instruction(cpu, which, value, self.config)
        except VmExit as exit_:
            self.vmm.handle_load(cpu, exit_)

    def syscall(self, core):
        """Round trip into the kernel and back; swaps GDTR under dual-GDT.

        Only CS/SS change across the trip. Data segment registers keep their
        hidden parts, so they keep working whichever GDT is current.
        """
        cpu = self.cpus[core]
        saved = (cpu.cs, cpu.ss, cpu.gdtr)
        state = self.dual.get(core)
        if state is not None:
            cpu.gdtr = TableRegister(state.kernel_gdt_base, PAGE_SIZE - 1)
        kernel_table = self.layout.table_at(cpu.gdtr.base)
        cpu.cs = SegmentRegister(Selector.from_raw(KERNEL_CS),
                                 DescriptorCache.from_descriptor(kernel_table.descriptor(KERNEL_CS >> 3)))
        cpu.ss = SegmentRegister(Selector(0), DescriptorCache())
        cpu.cs, cpu.ss, cpu.gdtr = saved
        for hook in self.kernel_exit_hooks:
            hook(self.layout)


def _resync_hook(pairs):
    def resync(layout):
        for state in pairs:
            kernel = layout.read(state.kernel_gdt_base, PAGE_SIZE)
            layout.page_buffer(state.user_gdt_base)[:] = kernel
    return resync


def apply(config, layout, cpus):
    """Configure ``layout`` and ``cpus`` in place and return the Scenario."""
    scenario = Scenario(config, layout, cpus)
    for cpu in scenario.cpus:
        cpu.cr4_umip = config.umip
    if config.dual_gdt:
        for core in range(layout.n_cores):
            user_base = layout.gdt_base(core)
            kernel_base = KERNEL_GDT_REGION_BASE + core * PAGE_SIZE
            layout.map_private(kernel_base, layout.read(user_base, PAGE_SIZE))
            if config.dual_gdt_mode is DualGdtMode.READ_ONLY:
                layout.set_writable(user_base, False)
            scenario.dual[core] = DualGdtState(user_base, kernel_base, config.dual_gdt_mode)
        if config.dual_gdt_mode is DualGdtMode.RESYNC:
            scenario.kernel_exit_hooks.append(_resync_hook(list(scenario.dual.values())))
    return scenario


@dataclass
class AttackOutcome:
    address_found: bool
    sgdt_leaks_truth: bool
    exploit_success: bool
    failing_step: str = None
    sgdt_result: str = None
    report: object = field(default=None, repr=False, compare=False)
    exploit: object = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {
            "address_found": self.address_found,
            "sgdt_leaks_truth": self.sgdt_leaks_truth,
            "sgdt_result": self.sgdt_result,
            "exploit_success": self.exploit_success,
            "failing_step": self.failing_step,
            "search": None if self.report is None else self.report.to_dict(),
            "exploit": None if self.exploit is None else self.exploit.to_dict(),
        }


def _sgdt_attempt(scenario, core):
    try:
        value = scenario.store(core, StoreInstruction.SGDT)
    except GeneralProtection:
        return False, "GeneralProtection"
    return value.base == scenario.layout.gdt_base(core), f"{value.base:016x}"


def build_scenario(config, seed, n_cores=1):
    layout = generate_layout(seed, n_cores, kaiser=config.kaiser)
    cpus = [boot_cpu(layout, core) for core in range(n_cores)]
    return apply(config, layout, cpus)


def evaluate(config, seed, *, n_cores=1, core=0, noise=NoiseModel(), probes=16,
             timer=TimerKind.RDTSCP_TSX, effect=ShellcodeEffect.ELEVATE_TOKEN, restore=True):
    """SGDT shortcut attempt, timing search, install, exploit; failures are outcomes."""
    scenario = build_scenario(config, seed, n_cores)
    layout = scenario.layout
    leaks, sgdt_result = _sgdt_attempt(scenario, core)
    search_cfg = SearchConfig(cores=(core,), probes_per_address=probes, timer=timer, noise=noise,
                              stop_on_first=True, seed=seed)
    report = locate_tables(layout, search_cfg)
    pair = report.findings.get(core)
    found = pair == (layout.idt_base(core), layout.gdt_base(core))
    if pair is None:
        return AttackOutcome(False, leaks, False, "search", sgdt_result, report)
    outcome = exploit_chain(layout, pair[1], core, effect, restore,
                            www=scenario.www(), cpu=scenario.cpus[core])
    return AttackOutcome(
        address_found=found,
        sgdt_leaks_truth=leaks,
        exploit_success=outcome.success and found,
        failing_step=outcome.failing_step,
        sgdt_result=sgdt_result,
        report=report,
        exploit=outcome,
    )


def config_lattice(vmm_policy=VmmPolicy.SPOOF, dual_gdt_mode=DualGdtMode.READ_ONLY):
    """The 16 on/off combinations of (umip, dte, kaiser, dual_gdt), in that bit order."""
    return [
        MitigationConfig(umip=u, descriptor_table_exiting=d, vmm_policy=vmm_policy, kaiser=k,
                         dual_gdt=g, dual_gdt_mode=dual_gdt_mode)
        for u, d, k, g in itertools.product((False, True), repeat=4)
    ]


@dataclass
class MatrixRow:
    config: MitigationConfig
    seed: int
    outcome: AttackOutcome


MATRIX_COLUMNS = ("umip", "dte", "vmm_policy", "kaiser", "dual_gdt", "seed",
                  "address_found", "sgdt_truth", "exploit_success", "failing_step")


def outcome_matrix(seeds, vmm_policy=VmmPolicy.SPOOF, dual_gdt_mode=DualGdtMode.READ_ONLY, **kwargs):
    seeds = list(seeds)
    if not seeds:
        raise ValueError("outcome_matrix needs at least one seed")
    return [MatrixRow(cfg, seed, evaluate(cfg, seed, **kwargs))
            for cfg in config_lattice(vmm_policy, dual_gdt_mode) for seed in seeds]


def _flag(value):
    return "true" if value else "false"


def matrix_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MATRIX_COLUMNS)
    for row in rows:
        c, o = row.config, row.outcome
        writer.writerow([_flag(c.umip), _flag(c.descriptor_table_exiting), c.vmm_policy.value.lower(),
                         _flag(c.kaiser), _flag(c.dual_gdt), row.seed, _flag(o.address_found),
                         _flag(o.sgdt_leaks_truth), _flag(o.exploit_success), o.failing_step or ""])
    return buf.getvalue()


def benign_workload(scenario, core=0, syscalls=8):
    """Ordinary ring-3 work with no far calls: segment loads and system calls.

    Returns what user code can observe: the register state and the hidden
    base/limit of each data segment after every system call.
    """
    cpu = scenario.cpus[core]
    table = scenario.layout.table_at(cpu.gdtr.base)
    load_data_segment(cpu, table, Selector.from_raw(USER_DS), "ds")
    load_data_segment(cpu, table, Selector.from_raw(USER_TEB), "fs")
    load_data_segment(cpu, table, Selector(0), "gs")
    seen = []
    for _ in range(syscalls):
        scenario.syscall(core)
        seen.append(tuple((r, getattr(cpu, r).hidden) for r in ("ds", "fs", "gs")))
    # reload from whatever table ring 3 sees after the last switch
    table = scenario.layout.table_at(cpu.gdtr.base)
    load_data_segment(cpu, table, Selector.from_raw(USER_DS), "es")
    return cpu.register_state(), seen
