"""Deterministic simulator of a TSX timing side channel against descriptor tables.

A pattern-constrained timing search finds each core's IDT and GDT pages;
a write-what-where primitive plants a call gate in the GDT; a far call
through it reaches ring 0. The mitigation lab measures which defenses
stop which step.
"""

from .descriptors import (
    CallGateDescriptor,
    DescriptorTable,
    GateType,
    OperatingMode,
    SegmentDescriptor,
    Selector,
    build_call_gate,
    decode_descriptor,
    encode_descriptor,
)
from .exploit import PatchGuard, ShellcodeEffect, WwwPrimitive, install_gate, run_exploit
from .faults import Bugcheck, Fault, GeneralProtection, PageFault, VmExit
from .layout import AddressSpaceLayout, PageView, generate_layout
from .mitigation import MitigationConfig, VmmPolicy, evaluate, outcome_matrix
from .search import SearchConfig, TableLocator, locate_tables, locate_tables_multicore
from .timing import LatencyThresholdClassifier, NoiseModel, TimerKind, calibrate, measure

__version__ = "0.1.0"

__all__ = [
    "AddressSpaceLayout", "Bugcheck", "CallGateDescriptor", "DescriptorTable", "Fault",
    "GateType", "GeneralProtection", "LatencyThresholdClassifier", "MitigationConfig",
    "NoiseModel", "OperatingMode", "PageFault", "PageView", "PatchGuard", "SearchConfig",
    "SegmentDescriptor", "Selector", "ShellcodeEffect", "TableLocator", "TimerKind", "VmExit",
    "VmmPolicy", "WwwPrimitive", "build_call_gate", "calibrate", "decode_descriptor",
    "encode_descriptor", "evaluate", "generate_layout", "install_gate", "locate_tables",
    "locate_tables_multicore", "measure", "outcome_matrix", "run_exploit",
]
