import csv
import io
import itertools

import pytest

from tsxgate.cpu import (
    LoadInstruction,
    StoreInstruction,
    TableRegister,
    exec_store_instruction,
    force_cpl,
)
from tsxgate.exploit import boot_cpu
from tsxgate.faults import GeneralProtection
from tsxgate.layout import KERNEL_GDT_REGION_BASE, PageView, generate_layout
from tsxgate.mitigation import (
    BASELINE,
    MATRIX_COLUMNS,
    DualGdtMode,
    MitigationConfig,
    VmmPolicy,
    apply,
    benign_workload,
    build_scenario,
    config_lattice,
    evaluate,
    matrix_csv,
    outcome_matrix,
)
from tsxgate.search import candidate_set
from tsxgate.timing import NoiseModel
from tsxgate.validation import PAGE_SIZE

DUAL_FAILURES = {"install_gate PageFault", "far call GeneralProtection"}


@pytest.fixture(scope="module")
def matrix_rows():
    return outcome_matrix(range(10))


def test_all_false_matches_baseline_layout():
    scenario = build_scenario(BASELINE, seed=6)
    assert scenario.layout == generate_layout(6, kaiser=False)
    assert scenario.vmm is None and not scenario.dual


def test_umip_faults_sgdt_on_every_core():
    scenario = build_scenario(MitigationConfig(umip=True), seed=6, n_cores=4)
    for core in range(4):
        with pytest.raises(GeneralProtection):
            scenario.store(core, StoreInstruction.SGDT)


@pytest.mark.parametrize("kaiser", [True, False])
def test_kernel_gdt_hidden_from_user_view(kaiser):
    scenario = build_scenario(MitigationConfig(dual_gdt=True, kaiser=kaiser), seed=6, n_cores=2)
    for core, state in scenario.dual.items():
        assert state.kernel_gdt_base == KERNEL_GDT_REGION_BASE + core * PAGE_SIZE
        assert not scenario.layout.is_mapped(state.kernel_gdt_base, PageView.USER)
        assert scenario.layout.is_mapped(state.kernel_gdt_base, PageView.KERNEL)
        assert state.user_gdt_base == scenario.layout.gdt_base(core)
        assert state.reload_on_ring_switch
        low = scenario.layout.cores[core].low_const
        assert state.kernel_gdt_base not in set(candidate_set(low))


def test_vmm_policies_on_sgdt():
    truth = generate_layout(6).gdt_base(0)
    expect = {
        VmmPolicy.PASS_THROUGH: truth,
        VmmPolicy.SPOOF: 0xFFFFF84000002000,
        VmmPolicy.DENY: 0,
    }
    for policy, base in expect.items():
        scenario = build_scenario(MitigationConfig(descriptor_table_exiting=True, vmm_policy=policy), 6)
        assert scenario.store(0, StoreInstruction.SGDT).base == base
        assert scenario.vmm.exits == 1


def test_umip_precedes_exiting_by_default():
    cfg = MitigationConfig(umip=True, descriptor_table_exiting=True, vmm_policy="spoof")
    with pytest.raises(GeneralProtection):
        build_scenario(cfg, 6).store(0, StoreInstruction.SGDT)
    later = MitigationConfig(umip=True, descriptor_table_exiting=True, vmm_policy="spoof",
                             umip_precedes_exiting=False)
    assert build_scenario(later, 6).store(0, StoreInstruction.SGDT).base == 0xFFFFF84000002000


def test_deny_drops_table_loads():
    scenario = build_scenario(MitigationConfig(descriptor_table_exiting=True, vmm_policy="deny"), 6)
    cpu = scenario.cpus[0]
    before = cpu.gdtr
    force_cpl(cpu, 0)
    scenario.load(0, LoadInstruction.LGDT, TableRegister(0x1000, 0xFF))
    assert cpu.gdtr == before


def test_evaluate_baseline():
    out = evaluate(BASELINE, 3)
    assert (out.address_found, out.sgdt_leaks_truth, out.exploit_success) == (True, True, True)
    assert out.failing_step is None


def test_evaluate_umip_and_exiting_spoof():
    cfg = MitigationConfig(umip=True, descriptor_table_exiting=True, vmm_policy="spoof",
                           umip_precedes_exiting=False)
    out = evaluate(cfg, 3)
    assert (out.sgdt_leaks_truth, out.address_found, out.exploit_success) == (False, True, True)


@pytest.mark.parametrize("mode", list(DualGdtMode))
def test_evaluate_dual_gdt_fails(mode):
    out = evaluate(MitigationConfig(dual_gdt=True, dual_gdt_mode=mode), 3)
    assert out.address_found and not out.exploit_success
    assert out.failing_step in DUAL_FAILURES
    assert 0 not in out.exploit.cpl_trace
    expected = "install_gate PageFault" if mode is DualGdtMode.READ_ONLY else "far call GeneralProtection"
    assert out.failing_step == expected


def test_exploit_success_implies_address_found(matrix_rows):
    for row in matrix_rows:
        assert not row.outcome.exploit_success or row.outcome.address_found


def test_matrix_160_rows(matrix_rows):
    assert len(matrix_rows) == 160
    assert len({(r.config, r.seed) for r in matrix_rows}) == 160
    for row in matrix_rows:
        if row.config.dual_gdt:
            assert not row.outcome.exploit_success
            assert row.outcome.failing_step in DUAL_FAILURES
        else:
            assert row.outcome.exploit_success
            assert row.outcome.address_found


def test_matrix_csv_columns(matrix_rows):
    text = matrix_csv(matrix_rows)
    reader = list(csv.reader(io.StringIO(text)))
    assert tuple(reader[0]) == MATRIX_COLUMNS
    assert len(reader) == 161
    assert reader[1][:6] == ["false", "false", "spoof", "false", "false", "0"]


def test_kaiser_alone_never_changes_address_found(matrix_rows):
    by_key = {(r.config.umip, r.config.descriptor_table_exiting, r.config.dual_gdt, r.seed, r.config.kaiser):
              r.outcome for r in matrix_rows}
    for (u, d, g, seed, k), outcome in by_key.items():
        if k:
            assert outcome.address_found == by_key[(u, d, g, seed, False)].address_found


def test_lattice_order():
    lattice = config_lattice()
    assert len(lattice) == 16
    bits = [(c.umip, c.descriptor_table_exiting, c.kaiser, c.dual_gdt) for c in lattice]
    assert bits == list(itertools.product((False, True), repeat=4))


def test_bypass_invariant_report_identical():
    noise = NoiseModel(3.0)
    reports = []
    for umip, dte, policy in itertools.product((False, True), (False, True), list(VmmPolicy)):
        cfg = MitigationConfig(umip=umip, descriptor_table_exiting=dte, vmm_policy=policy)
        out = evaluate(cfg, 12, noise=noise)
        reports.append((out.report.to_dict(), out.report.findings, out.report.hits,
                        out.report.misclassifications, out.exploit_success))
    assert all(r == reports[0] for r in reports)


def test_spoof_honesty():
    cfg = MitigationConfig(descriptor_table_exiting=True, vmm_policy=VmmPolicy.SPOOF)
    scenario = build_scenario(cfg, 12)
    returned = scenario.store(0, StoreInstruction.SGDT).base
    assert returned != scenario.layout.gdt_base(0)
    out = evaluate(cfg, 12)
    assert out.report.findings[0][1] == generate_layout(12).gdt_base(0)
    assert not out.sgdt_leaks_truth and out.exploit_success


@pytest.mark.parametrize("mode", list(DualGdtMode))
def test_benign_workload_unaffected_by_dual_gdt(mode):
    off = benign_workload(build_scenario(BASELINE, 8))
    on = benign_workload(build_scenario(MitigationConfig(dual_gdt=True, dual_gdt_mode=mode), 8))
    assert on == off


def test_resync_undoes_user_gdt_writes():
    cfg = MitigationConfig(dual_gdt=True, dual_gdt_mode=DualGdtMode.RESYNC)
    scenario = build_scenario(cfg, 8)
    lay = scenario.layout
    before = lay.read(lay.gdt_base(0), PAGE_SIZE)
    scenario.www().write(lay.gdt_base(0) + 0x100, b"\xff" * 8)
    assert lay.read(lay.gdt_base(0), PAGE_SIZE) == before


def test_apply_sets_cr4_on_supplied_cpus():
    lay = generate_layout(2, 2)
    cpus = [boot_cpu(lay, c) for c in range(2)]
    apply(MitigationConfig(umip=True), lay, cpus)
    assert all(cpu.cr4_umip for cpu in cpus)
    with pytest.raises(GeneralProtection):
        exec_store_instruction(cpus[1], StoreInstruction.SIDT, MitigationConfig(umip=True))


def test_config_label_and_parse():
    assert BASELINE.label() == "baseline"
    assert MitigationConfig(umip=True, dual_gdt=True).label() == "umip+dual-gdt"
    assert VmmPolicy.parse("pass-through") is VmmPolicy.PASS_THROUGH
    with pytest.raises(ValueError):
        VmmPolicy.parse("lie")
    with pytest.raises(ValueError):
        outcome_matrix([])
