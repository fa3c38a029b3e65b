"""One pass/fail line per acceptance criterion, printed straight to the terminal."""

import itertools
import random
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsxgate.cli import main as cli_main
from tsxgate.cpu import (
    CpuCore,
    DescriptorCache,
    SegmentRegister,
    StoreInstruction,
    load_data_segment,
)
from tsxgate.descriptors import (
    CallGateDescriptor,
    DescriptorTable,
    GateType,
    OperatingMode,
    SegmentDescriptor,
    Selector,
    decode_descriptor,
    encode_descriptor,
)
from tsxgate.exploit import PatchGuard, WwwPrimitive, boot_cpu, exploit_chain, install_gate, payload_gate
from tsxgate.faults import Bugcheck, GeneralProtection
from tsxgate.layout import OS_GDT_SLOTS, PageView, generate_layout
from tsxgate.mitigation import (
    DualGdtMode,
    MitigationConfig,
    VmmPolicy,
    build_scenario,
    evaluate,
    outcome_matrix,
)
from tsxgate.search import SearchConfig, locate_tables, locate_tables_multicore
from tsxgate.timing import NoiseModel, draw_cycles
from tsxgate.validation import PAGE_SIZE


@pytest.fixture
def verdict(capsys):
    def emit(number, text, ok):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {text}")
        assert ok, text
    return emit


def test_criterion_01_timing_bands(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    layout = generate_layout(1, kaiser=True)
    idt = layout.idt_base(0)
    mapped = draw_cycles(rng, layout.is_mapped(idt, PageView.USER), 10_000)
    unmapped = draw_cycles(rng, layout.is_mapped(idt - PAGE_SIZE, PageView.USER), 10_000)
    elapsed = time.perf_counter() - start
    ok = (mapped.min() >= 190 and mapped.max() <= 197 and unmapped.min() >= 220
          and unmapped.max() <= 234 and elapsed < 1.0)
    verdict(1, f"mapped [{mapped.min()}, {mapped.max()}], unmapped [{unmapped.min()}, {unmapped.max()}]"
               f" in {elapsed:.3f} s", ok)


def test_criterion_02_search_time(verdict):
    report = locate_tables(generate_layout(1), SearchConfig(rate=10.0))
    minutes = report.simulated_seconds / 60
    ok = report.simulated_seconds == pytest.approx(6553.6) and abs(minutes - 109) <= 1
    verdict(2, f"single-core scan {report.simulated_seconds:.1f} s = {minutes:.1f} min", ok)


def test_criterion_03_multicore_speedup(verdict):
    layout = generate_layout(1, 8)
    single = locate_tables(layout, SearchConfig(cores=(0,)))
    multi = locate_tables_multicore(layout, SearchConfig(cores=(0,), parallel_workers=8))
    ok = multi.simulated_seconds == single.simulated_seconds / 8 and multi.findings == single.findings
    verdict(3, f"8 workers {multi.simulated_seconds:.1f} s vs single {single.simulated_seconds:.1f} s", ok)


def test_criterion_04_noisy_search_accuracy(verdict):
    start = time.perf_counter()
    correct = 0
    for seed in range(100):
        layout = generate_layout(seed)
        report = locate_tables(layout, SearchConfig(probes_per_address=16, noise=NoiseModel(sigma=3.0)))
        correct += report.findings[0] == (layout.idt_base(0), layout.gdt_base(0))
    elapsed = time.perf_counter() - start
    verdict(4, f"{correct}/100 layouts recovered in {elapsed:.1f} s", correct >= 99 and elapsed < 120)


def test_criterion_05_privilege_oracle(verdict):
    deviations = 0
    for cpl, rpl, dpl in itertools.product(range(4), repeat=3):
        table = DescriptorTable.empty(16)
        table.put(1, SegmentDescriptor.code(cpl, long_mode=True))
        table.put(2, SegmentDescriptor.data(dpl))
        cpu = CpuCore()
        code = Selector(1, rpl=cpl)
        cpu.cs = SegmentRegister(code, DescriptorCache.from_descriptor(table.descriptor(1)))
        try:
            load_data_segment(cpu, table, Selector(2, rpl=rpl))
            allowed = True
        except GeneralProtection:
            allowed = False
        deviations += allowed != (dpl >= max(cpl, rpl))
    verdict(5, f"64 (CPL, RPL, DPL) cases, {deviations} deviations", deviations == 0)


def _random_descriptor(rng):
    kind = rng.randrange(3)
    if kind == 0:
        return SegmentDescriptor(
            base=rng.getrandbits(32), limit=rng.getrandbits(20), type_field=rng.getrandbits(4),
            s_flag=True, dpl=rng.randrange(4), present=bool(rng.getrandbits(1)),
            available=bool(rng.getrandbits(1)), long_mode=bool(rng.getrandbits(1)),
            default_size=bool(rng.getrandbits(1)), granularity=bool(rng.getrandbits(1)))
    if kind == 1:
        return CallGateDescriptor(
            Selector.from_raw(rng.getrandbits(16)), rng.getrandbits(32),
            rng.choice([GateType.CALL_GATE16, GateType.CALL_GATE32]), dpl=rng.randrange(4),
            present=bool(rng.getrandbits(1)), param_count=rng.getrandbits(5),
            mode=OperatingMode.LEGACY32)
    return CallGateDescriptor(Selector.from_raw(rng.getrandbits(16)), rng.getrandbits(64),
                              dpl=rng.randrange(4), present=bool(rng.getrandbits(1)),
                              mode=OperatingMode.LONG64)


def test_criterion_06_descriptor_roundtrip(verdict):
    rng = random.Random(6)
    failures = 0
    for _ in range(10_000):
        d = _random_descriptor(rng)
        failures += decode_descriptor(encode_descriptor(d), d.mode if isinstance(d, CallGateDescriptor)
                                      else OperatingMode.LEGACY32) != d
    nibbles_ok = 0
    for nibble in range(16):
        if GateType(nibble).is_call_gate:
            d = CallGateDescriptor(Selector.from_raw(0x8), 0x1000, type_field=nibble)
        else:
            d = SegmentDescriptor(base=0x1000, limit=0x67, type_field=nibble, present=True)
        raw = encode_descriptor(d)
        nibbles_ok += raw[5] & 0xF == nibble and decode_descriptor(raw) == d
    gate = CallGateDescriptor(Selector.from_raw(0x8), 0x12345678, GateType.CALL_GATE32, dpl=3)
    image = encode_descriptor(gate).hex()
    ok = failures == 0 and nibbles_ok == 16 and image == "7856080000ec3412"
    verdict(6, f"{failures} roundtrip failures in 10000, {nibbles_ok}/16 type nibbles, "
               f"payload image {image}", ok)


def test_criterion_07_end_to_end_chain(verdict):
    good = 0
    for seed in range(100):
        layout = generate_layout(seed)
        idt, gdt = locate_tables(layout, SearchConfig(stop_on_first=True)).findings[0]
        before = layout.read(gdt, PAGE_SIZE)
        out = exploit_chain(layout, gdt, cpu=boot_cpu(layout))
        good += (out.success and out.cpl_trace == [3, 0, 3] and out.gdt_restored
                 and layout.read(gdt, PAGE_SIZE) == before)
    verdict(7, f"{good}/100 seeds: trace [3, 0, 3] with byte-identical GDT", good == 100)


def test_criterion_08_umip_exiting_bypass(verdict):
    noise = NoiseModel(sigma=3.0)
    reports, sgdt = [], {}
    for umip, dte, policy in itertools.product((False, True), (False, True), list(VmmPolicy)):
        cfg = MitigationConfig(umip=umip, descriptor_table_exiting=dte, vmm_policy=policy,
                               umip_precedes_exiting=False)
        out = evaluate(cfg, 21, noise=noise)
        reports.append((out.report.to_dict(), out.report.findings, out.report.hits))
        sgdt[(umip, dte, policy)] = out.sgdt_result
    truth = f"{generate_layout(21).gdt_base(0):016x}"
    umip_only = build_scenario(MitigationConfig(umip=True), 21)
    try:
        umip_only.store(0, StoreInstruction.SGDT)
        umip_gp = False
    except GeneralProtection:
        umip_gp = True
    identical = all(r == reports[0] for r in reports)
    spoofed = sgdt[(False, True, VmmPolicy.SPOOF)] not in (truth, "GeneralProtection")
    ok = identical and umip_gp and spoofed and sgdt[(False, False, VmmPolicy.SPOOF)] == truth
    verdict(8, f"search reports identical across 12 settings: {identical}; SGDT under UMIP -> "
               f"{'GP' if umip_gp else 'value'}; under exiting/spoof -> "
               f"{sgdt[(False, True, VmmPolicy.SPOOF)]} (true {truth})", ok)


def test_criterion_09_dual_gdt_defeat(verdict):
    seeds = range(10)
    rows = outcome_matrix(seeds) + [r for r in outcome_matrix(seeds, dual_gdt_mode=DualGdtMode.RESYNC)
                                   if r.config.dual_gdt]
    dual = [r for r in rows if r.config.dual_gdt]
    base = [r for r in rows if not r.config.dual_gdt]
    dual_ok = all(not r.outcome.exploit_success and r.outcome.failing_step for r in dual)
    base_ok = all(r.outcome.exploit_success for r in base)
    steps = sorted({r.outcome.failing_step for r in dual})
    verdict(9, f"{len(dual)} dual-GDT rows fail at {steps}; {len(base)} other rows succeed: {base_ok}",
            dual_ok and base_ok)


_ops = st.lists(st.one_of(st.just("install"), st.just("restore"), st.floats(0, 900)), max_size=20)


def test_criterion_10_patchguard(verdict):
    failures = []

    @settings(max_examples=300, deadline=None, database=None)
    @given(ops=_ops, seed=st.integers(0, 2**32))
    def prop(ops, seed):
        layout = generate_layout(5)
        www = WwwPrimitive(layout)
        pg = PatchGuard(layout, rng=np.random.default_rng(seed)).arm()
        schedule = np.random.default_rng(seed)
        nxt = int(schedule.integers(180_000, 600_001)) / 1000.0
        now, inst = 0.0, None
        for op in ops:
            if op == "install" and inst is None:
                inst = install_gate(www, layout.gdt_base(0), OS_GDT_SLOTS, payload_gate(layout))
            elif op == "restore" and inst is not None:
                www.write(inst.address, inst.prior)
                inst = None
            elif isinstance(op, float):
                end, expect = now + op, False
                while nxt <= end:
                    if inst is not None:
                        expect = True
                        break
                    nxt += int(schedule.integers(180_000, 600_001)) / 1000.0
                try:
                    pg.advance_time(op)
                    got = False
                except Bugcheck:
                    got = True
                if got != expect:
                    failures.append((ops, seed))
                assert got == expect
                if got:
                    return
                now = end

    prop()
    draws = [int(v) / 1000 for v in np.random.default_rng(0).integers(180_000, 600_001, 10_000)]
    in_range = min(draws) >= 180 and max(draws) <= 600
    verdict(10, f"300 random interleavings, {len(failures)} mismatches; intervals within "
                f"[180, 600] s: {in_range}", not failures and in_range)


def test_criterion_11_cli_determinism(verdict, tmp_path, capsys):
    commands = [["layout", "--cores", "4"], ["probe"], ["search", "--noise", "3"],
                ["exploit", "--mitigation", "umip,dte", "--vmm", "spoof"],
                ["exploit", "--dual-gdt"], ["matrix", "--seeds", "2"],
                ["search", "--format", "csv", "--cores", "2", "--workers", "2"]]
    mismatched = []
    for i, cmd in enumerate(commands):
        blobs = []
        for run in range(2):
            out_dir = tmp_path / f"c{i}r{run}"
            cli_main(cmd + ["--seed", "7", "--out", str(out_dir)])
            path = capsys.readouterr().out.strip()
            blobs.append(open(path, "rb").read())
        if blobs[0] != blobs[1]:
            mismatched.append(" ".join(cmd))
    verdict(11, f"{len(commands)} CLI artifacts, byte mismatches: {mismatched or 'none'}", not mismatched)
