import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsxgate.cpu import far_call_through_gate
from tsxgate.descriptors import CallGateDescriptor, OperatingMode, decode_descriptor
from tsxgate.exploit import (
    MARKER,
    PatchGuard,
    ShellcodeEffect,
    WwwPrimitive,
    advance_time,
    apply_effect,
    boot_cpu,
    exploit_chain,
    install_gate,
    payload_gate,
    run_exploit,
)
from tsxgate.faults import Bugcheck, GeneralProtection, PageFault
from tsxgate.layout import KERNEL_CS, OS_GDT_SLOTS, PageView, generate_layout
from tsxgate.mitigation import MitigationConfig, build_scenario
from tsxgate.search import SearchConfig, locate_tables
from tsxgate.validation import PAGE_SIZE


@pytest.fixture
def layout():
    return generate_layout(17)


def installed_gate(layout, slot=OS_GDT_SLOTS):
    www = WwwPrimitive(layout)
    return install_gate(www, layout.gdt_base(0), slot, payload_gate(layout))


def test_install_slot_100_decodes_to_gate(layout):
    gate = payload_gate(layout)
    inst = install_gate(WwwPrimitive(layout), layout.gdt_base(0), 100, gate)
    raw = layout.read(layout.gdt_base(0) + 8 * 100, 16)
    back = decode_descriptor(raw, OperatingMode.LONG64)
    assert isinstance(back, CallGateDescriptor)
    assert back == gate
    assert back.selector.raw == KERNEL_CS and back.dpl == 3
    assert back.offset == layout.shellcode_address()
    assert inst.prior == bytes(16)
    assert inst.selector.index == 100 and inst.selector.rpl == 3


def test_install_off_by_page_faults(layout):
    with pytest.raises(PageFault):
        install_gate(WwwPrimitive(layout), layout.gdt_base(0) + PAGE_SIZE, 100, payload_gate(layout))


def test_install_refuses_present_slot(layout):
    with pytest.raises(ValueError):
        install_gate(WwwPrimitive(layout), layout.gdt_base(0), 1, payload_gate(layout))


def test_install_under_dual_gdt_faults():
    scenario = build_scenario(MitigationConfig(dual_gdt=True), seed=17)
    lay = scenario.layout
    with pytest.raises(PageFault):
        install_gate(scenario.www(), lay.gdt_base(0), OS_GDT_SLOTS, payload_gate(lay))


def test_www_counts_and_runs_hooks(layout):
    seen = []
    www = WwwPrimitive(layout, on_kernel_exit=[lambda lay: seen.append(lay)])
    www.write(layout.gdt_base(0) + 0x80, b"\x00" * 8)
    assert www.writes == 1 and seen == [layout]
    assert not hasattr(www, "read")


def test_baseline_exploit_success_and_identity(layout):
    cpu = boot_cpu(layout)
    gdt_page = layout.read(layout.gdt_base(0), PAGE_SIZE)
    regs = cpu.register_state()
    out = exploit_chain(layout, layout.gdt_base(0), cpu=cpu)
    assert out.success
    assert out.cpl_trace == [3, 0, 3]
    assert out.effects_applied == {ShellcodeEffect.ELEVATE_TOKEN}
    assert cpu.elevated_token
    assert out.gdt_restored
    assert layout.read(layout.gdt_base(0), PAGE_SIZE) == gdt_page
    assert cpu.register_state() == regs


def test_no_restore_leaves_gate(layout):
    out = exploit_chain(layout, layout.gdt_base(0), restore=False)
    assert out.success and not out.gdt_restored


def test_gate_dpl_zero_faults_at_far_call(layout):
    cpu = boot_cpu(layout)
    inst = install_gate(WwwPrimitive(layout), layout.gdt_base(0), OS_GDT_SLOTS,
                        payload_gate(layout, dpl=0))
    out = run_exploit(cpu, layout, inst.selector, installed=inst)
    assert not out.success
    assert isinstance(out.fault, GeneralProtection)
    assert out.failing_step == "far call GeneralProtection"
    assert out.cpl_trace == [3] and not cpu.elevated_token


def test_clear_pt_supervisor_effect(layout):
    page = layout.pt_region_pages()[0]
    with pytest.raises(PageFault):
        layout.access(page, PageView.USER, 3)
    out = exploit_chain(layout, layout.gdt_base(0), effect=ShellcodeEffect.CLEAR_PT_SUPERVISOR)
    assert out.success
    layout.access(page, PageView.USER, 3, data=b"\x42")
    assert layout.read(page, 1, view=PageView.USER, privilege=3) == b"\x42"


def test_marker_effect(layout):
    assert exploit_chain(layout, layout.gdt_base(0), effect="MarkerOnly").success
    assert layout.read(layout.marker_address(), len(MARKER)) == MARKER


@pytest.mark.parametrize("effect", list(ShellcodeEffect))
def test_effects_refused_outside_ring0(layout, effect):
    cpu = boot_cpu(layout)
    before = layout.fingerprint()
    with pytest.raises(GeneralProtection):
        apply_effect(cpu, layout, effect)
    assert not cpu.elevated_token
    assert layout.fingerprint() == before


def test_restore_requires_record(layout):
    with pytest.raises(ValueError):
        run_exploit(boot_cpu(layout), layout, installed_gate(layout).selector, restore=True)


def test_outcome_json_shape(layout):
    d = exploit_chain(layout, layout.gdt_base(0)).to_dict()
    assert set(d) == {"success", "cpl_trace", "fault", "effects", "gdt_restored", "simulated_time"}
    assert d["effects"] == ["ElevateToken"] and d["fault"] is None


# --- PatchGuard ----------------------------------------------------------------

def test_patchguard_unrestored_gate_bugchecks(layout):
    pg = PatchGuard(layout).arm()
    exploit_chain(layout, layout.gdt_base(0), restore=False)
    with pytest.raises(Bugcheck):
        advance_time(pg, layout, 601)
    with pytest.raises(Bugcheck):
        advance_time(pg, layout, 1)


def test_patchguard_restored_gate_is_quiet(layout):
    pg = PatchGuard(layout).arm()
    assert exploit_chain(layout, layout.gdt_base(0), restore=True).success
    advance_time(pg, layout, 601)
    assert pg.checks >= 1


def test_patchguard_untouched_is_quiet(layout):
    pg = PatchGuard(layout).arm()
    advance_time(pg, layout, 100_000)
    assert pg.checks >= 100_000 // 600


def test_patchguard_interval_bounds():
    lay = generate_layout(2)
    pg = PatchGuard(lay, rng=np.random.default_rng(0)).arm()
    draws = []
    for _ in range(2000):
        draws.append(pg.next_check - pg.now)
        pg.advance_time(draws[-1])
    assert min(draws) >= 180 and max(draws) <= 600
    assert pg.checks == 2000


def test_patchguard_wrong_layout(layout):
    with pytest.raises(ValueError):
        advance_time(PatchGuard(layout).arm(), generate_layout(18), 1)


OPS = st.lists(st.one_of(st.just(("install",)), st.just(("restore",)),
                         st.tuples(st.just("advance"), st.floats(0, 900))), max_size=25)


@settings(max_examples=150, deadline=None)
@given(ops=OPS, seed=st.integers(0, 2**32))
def test_patchguard_bugchecks_iff_check_sees_tamper(ops, seed):
    lay = generate_layout(3)
    www = WwwPrimitive(lay)
    pg = PatchGuard(lay, rng=np.random.default_rng(seed)).arm()
    # independent replay of the check schedule
    oracle_rng = np.random.default_rng(seed)

    def draw():
        return int(oracle_rng.integers(180_000, 600_001)) / 1000.0

    now, next_check, tampered, inst = 0.0, draw(), False, None
    for op in ops:
        if op[0] == "install":
            if inst is None:
                inst = install_gate(www, lay.gdt_base(0), OS_GDT_SLOTS, payload_gate(lay))
                tampered = True
        elif op[0] == "restore":
            if inst is not None:
                www.write(inst.address, inst.prior)
                inst, tampered = None, False
        else:
            end = now + op[1]
            expect_bugcheck = False
            while next_check <= end:
                if tampered:
                    expect_bugcheck = True
                    break
                next_check += draw()
            if expect_bugcheck:
                with pytest.raises(Bugcheck):
                    pg.advance_time(op[1])
                return
            pg.advance_time(op[1])
            now = end
            assert pg.next_check == pytest.approx(next_check)


@settings(max_examples=100, deadline=None)
@given(pauses=st.lists(st.floats(0, 2000), max_size=10), seed=st.integers(0, 2**32))
def test_restore_before_check_never_bugchecks(pauses, seed):
    lay = generate_layout(3)
    pg = PatchGuard(lay, rng=np.random.default_rng(seed)).arm()
    for pause in pauses:
        out = exploit_chain(lay, lay.gdt_base(0), restore=True)
        assert out.success and out.gdt_restored
        pg.advance_time(pause)


# --- search to exploit ----------------------------------------------------------

def test_search_to_exploit_composition_100_seeds():
    for seed in range(100):
        lay = generate_layout(seed)
        report = locate_tables(lay, SearchConfig(stop_on_first=True))
        idt, gdt = report.findings[0]
        cpu = boot_cpu(lay)
        before = lay.read(gdt, PAGE_SIZE)
        out = exploit_chain(lay, gdt, cpu=cpu)
        assert out.success and out.cpl_trace == [3, 0, 3]
        assert lay.read(gdt, PAGE_SIZE) == before


def test_far_call_after_restore_faults(layout):
    # restored slot is empty again, so reusing the selector fails
    cpu = boot_cpu(layout)
    inst = installed_gate(layout)
    run_exploit(cpu, layout, inst.selector, installed=inst)
    with pytest.raises(GeneralProtection):
        far_call_through_gate(cpu, layout.table_at(layout.gdt_base(0)), inst.selector)
