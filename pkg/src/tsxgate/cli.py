"""Command-line scenario runner.

Every artifact is a pure function of the flags (and the optional key=value
config file, which flags override), so two runs of one config write the
same bytes. Exit status: 0 for a completed run whatever the attack outcome,
2 for usage errors, 1 for I/O errors.
"""

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .exploit import ShellcodeEffect
from .faults import Fault
from .layout import generate_layout
from .mitigation import (
    DualGdtMode,
    MitigationConfig,
    VmmPolicy,
    evaluate,
    matrix_csv,
    outcome_matrix,
)
from .search import PRECISE_RATE, SearchConfig, locate_tables_multicore
from .timing import NoiseModel, TimerKind, measure
from .validation import PAGE_SIZE, hex64, parse_hex_address

DEFAULTS = {
    "seed": 1,
    "cores": 1,
    "noise_sigma": 0.0,
    "contention": 0.0,
    "samples": 16,
    "timer": "rdtscp",
    "rate": PRECISE_RATE,
    "workers": 1,
    "stop_on_first": False,
    "umip": False,
    "dte": False,
    "vmm": "passthrough",
    "kaiser": False,
    "dual_gdt": False,
    "dual_gdt_mode": "readonly",
    "mitigation": "",
    "seeds": 10,
    "effect": "ElevateToken",
    "address": None,
    "scan": "all",
    "out": None,
    "format": None,
}

DEFAULT_FORMAT = {"layout": "json", "probe": "csv", "search": "json", "exploit": "json", "matrix": "csv"}
MITIGATION_NAMES = {"umip": "umip", "dte": "dte", "kaiser": "kaiser", "dual-gdt": "dual_gdt",
                    "dual_gdt": "dual_gdt"}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

# stream keys for probe noise, disjoint from search/patchguard keys
_STREAM_PROBE = 3


class UsageError(ValueError):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _int(text, name, minimum=None):
    try:
        value = int(str(text), 0)
    except ValueError:
        raise UsageError(f"{name} must be an integer, got {text!r}") from None
    if minimum is not None and value < minimum:
        raise UsageError(f"{name} must be >= {minimum}, got {value}")
    return value


def _float(text, name, minimum=0.0, strict=False):
    try:
        value = float(text)
    except ValueError:
        raise UsageError(f"{name} must be a number, got {text!r}") from None
    if value < minimum or (strict and value == minimum):
        raise UsageError(f"{name} must be {'>' if strict else '>='} {minimum}, got {value}")
    return value


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--seed")
    common.add_argument("--cores", help="number of cores in the layout")
    common.add_argument("--noise-sigma", "--noise", dest="noise_sigma")
    common.add_argument("--contention", help="probability of a contention outlier per sample")
    common.add_argument("--samples", help="probes per address (min-of-n)")
    common.add_argument("--timer", help="rdtscp | cpuid | thread")
    common.add_argument("--rate", help="probes per simulated second")
    common.add_argument("--workers")
    common.add_argument("--stop-on-first", dest="stop_on_first", action="store_const", const=True)
    common.add_argument("--umip", action="store_const", const=True)
    common.add_argument("--dte", action="store_const", const=True,
                        help="descriptor-table exiting")
    common.add_argument("--vmm", help="passthrough | spoof | deny")
    common.add_argument("--kaiser", action="store_const", const=True)
    common.add_argument("--dual-gdt", dest="dual_gdt", action="store_const", const=True)
    common.add_argument("--dual-gdt-mode", dest="dual_gdt_mode", help="readonly | resync")
    common.add_argument("--mitigation", help="comma list of umip, dte, kaiser, dual-gdt")
    common.add_argument("--out", help="output directory (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"))

    parser = argparse.ArgumentParser(prog="tsxgate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("layout", parents=[common], help="dump a generated address-space layout")
    probe = sub.add_parser("probe", parents=[common], help="per-sample timing CSV for addresses")
    probe.add_argument("--address", action="append", help="hex address; repeatable")
    search = sub.add_parser("search", parents=[common], help="pattern search for IDT/GDT pages")
    search.add_argument("--scan", help="comma list of core ids whose candidate sets are scanned "
                                       "(default: all); workers share whatever is scanned")
    exploit = sub.add_parser("exploit", parents=[common], help="full chain under a mitigation config")
    exploit.add_argument("--effect", help="ElevateToken | ClearPtSupervisor | MarkerOnly")
    matrix = sub.add_parser("matrix", parents=[common], help="16-config outcome matrix")
    matrix.add_argument("--seeds", help="number of seeds, starting at --seed")
    return parser


def resolve(args):
    """Merge defaults < config file < flags and validate."""
    merged = dict(DEFAULTS)
    if args.config:
        merged.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    s = {}
    s["seed"] = _int(merged["seed"], "seed", 0)
    s["cores"] = _int(merged["cores"], "cores", 1)
    s["samples"] = _int(merged["samples"], "samples", 1)
    s["workers"] = _int(merged["workers"], "workers", 1)
    s["seeds"] = _int(merged["seeds"], "seeds", 1)
    s["noise"] = NoiseModel(_float(merged["noise_sigma"], "noise sigma"),
                            _float(merged["contention"], "contention"))
    if s["noise"].contention_rate > 1:
        raise UsageError("contention must be <= 1")
    s["rate"] = _float(merged["rate"], "rate", strict=True)
    try:
        s["timer"] = TimerKind.parse(str(merged["timer"]))
        s["vmm"] = VmmPolicy.parse(merged["vmm"])
        mode = str(merged["dual_gdt_mode"]).replace("-", "").replace("_", "").lower()
        s["dual_gdt_mode"] = {"readonly": DualGdtMode.READ_ONLY, "resync": DualGdtMode.RESYNC}[mode]
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    flags = {name: _bool(merged[name]) for name in ("umip", "dte", "kaiser", "dual_gdt")}
    for item in filter(None, (p.strip().lower() for p in str(merged["mitigation"]).split(","))):
        if item not in MITIGATION_NAMES:
            raise UsageError(f"unknown mitigation {item!r}")
        flags[MITIGATION_NAMES[item]] = True
    s.update(flags)
    s["stop_on_first"] = _bool(merged["stop_on_first"])
    try:
        s["effect"] = ShellcodeEffect(merged["effect"])
    except ValueError:
        raise UsageError(f"unknown effect {merged['effect']!r}") from None
    s["address"] = merged["address"]
    scan = str(merged["scan"]).strip().lower()
    if scan == "all":
        s["scan"] = tuple(range(s["cores"]))
    else:
        s["scan"] = tuple(_int(part.strip(), "scan core", 0) for part in scan.split(","))
        if any(c >= s["cores"] for c in s["scan"]):
            raise UsageError(f"--scan names a core outside 0..{s['cores'] - 1}")
    s["out"] = merged["out"]
    s["format"] = merged["format"] or DEFAULT_FORMAT[args.command]
    if s["format"] not in ("csv", "json"):
        raise UsageError("format must be csv or json")
    return s


def mitigation_config(s):
    return MitigationConfig(umip=s["umip"], descriptor_table_exiting=s["dte"], vmm_policy=s["vmm"],
                            kaiser=s["kaiser"], dual_gdt=s["dual_gdt"],
                            dual_gdt_mode=s["dual_gdt_mode"])


def _json(obj):
    return json.dumps(obj, indent=2) + "\n"


def _csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def cmd_layout(s):
    layout = generate_layout(s["seed"], s["cores"], kaiser=s["kaiser"])
    if s["format"] == "json":
        return layout.dumps()
    return _csv(("core", "idt", "gdt", "low_const"),
                [(c.core, hex64(c.idt_base), hex64(c.gdt_base), f"{c.low_const:05x}")
                 for c in layout.cores])


def cmd_probe(s):
    layout = generate_layout(s["seed"], s["cores"], kaiser=s["kaiser"])
    if s["address"]:
        raw = s["address"] if isinstance(s["address"], list) else str(s["address"]).split(",")
        try:
            addresses = [parse_hex_address(a.strip()) for a in raw]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        idt = layout.idt_base(0)
        addresses = [idt, idt - PAGE_SIZE]
    results = []
    for i, addr in enumerate(addresses):
        rng = np.random.default_rng(np.random.SeedSequence(s["seed"], spawn_key=(_STREAM_PROBE, i)))
        try:
            results.append(measure(layout, addr, s["samples"], s["timer"], s["noise"], rng,
                                   keep_samples=True))
        except Fault as exc:
            raise UsageError(f"cannot probe {addr:#x}: {exc}") from None
    if s["format"] == "json":
        return _json([{"address": hex64(r.address), "statistic": r.statistic,
                       "class": r.classification.value, "samples": r.per_sample} for r in results])
    rows = [(hex64(r.address), j, cycles) for r in results for j, cycles in enumerate(r.per_sample)]
    return _csv(("address", "sample_index", "cycles"), rows)


def cmd_search(s):
    layout = generate_layout(s["seed"], s["cores"], kaiser=s["kaiser"])
    cfg = SearchConfig(cores=s["scan"], probes_per_address=s["samples"], rate=s["rate"],
                       timer=s["timer"], noise=s["noise"], parallel_workers=s["workers"],
                       stop_on_first=s["stop_on_first"])
    report = locate_tables_multicore(layout, cfg)
    truth = {c.core: (c.idt_base, c.gdt_base) for c in layout.cores}
    out = report.to_dict()
    out["seed"] = s["seed"]
    out["simulated_minutes"] = round(report.simulated_seconds / 60, 1)
    for entry in out["cores"]:
        entry["correct"] = report.findings[entry["core"]] == truth[entry["core"]]
    if s["format"] == "json":
        return _json(out)
    rows = [(e["core"], e["idt"] or "", e["gdt"] or "", str(e["correct"]).lower()) for e in out["cores"]]
    text = _csv(("core", "idt", "gdt", "correct"), rows)
    return text + _csv(("candidates_probed", "simulated_seconds", "workers"),
                       [(out["candidates_probed"], f"{report.simulated_seconds:.1f}", out["workers"])])


def cmd_exploit(s):
    cfg = mitigation_config(s)
    outcome = evaluate(cfg, s["seed"], n_cores=s["cores"], noise=s["noise"], probes=s["samples"],
                       timer=s["timer"], effect=s["effect"])
    out = {"seed": s["seed"], "mitigations": cfg.label(), **outcome.to_dict()}
    if s["format"] == "json":
        return _json(out)
    return _csv(("seed", "mitigations", "address_found", "sgdt_truth", "exploit_success", "failing_step"),
                [(s["seed"], cfg.label(), str(outcome.address_found).lower(),
                  str(outcome.sgdt_leaks_truth).lower(), str(outcome.exploit_success).lower(),
                  outcome.failing_step or "")])


def cmd_matrix(s):
    seeds = range(s["seed"], s["seed"] + s["seeds"])
    rows = outcome_matrix(seeds, vmm_policy=s["vmm"], dual_gdt_mode=s["dual_gdt_mode"],
                          noise=s["noise"], probes=s["samples"], timer=s["timer"])
    if s["format"] == "csv":
        return matrix_csv(rows)
    return _json([{"config": r.config.label(), "vmm_policy": r.config.vmm_policy.value, "seed": r.seed,
                   "address_found": r.outcome.address_found,
                   "sgdt_truth": r.outcome.sgdt_leaks_truth,
                   "exploit_success": r.outcome.exploit_success,
                   "failing_step": r.outcome.failing_step} for r in rows])


COMMANDS = {"layout": cmd_layout, "probe": cmd_probe, "search": cmd_search,
            "exploit": cmd_exploit, "matrix": cmd_matrix}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = resolve(args)
        text = COMMANDS[args.command](settings)
    except ValueError as exc:
        # UsageError and library-side validation errors are both configuration errors
        parser.error(str(exc))
    except OSError as exc:
        print(f"tsxgate: {exc}", file=sys.stderr)
        return 1
    if settings["out"] is None:
        sys.stdout.write(text)
        return 0
    path = Path(settings["out"]) / f"{args.command}.{settings['format']}"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        print(f"tsxgate: cannot write {path}: {exc}", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
