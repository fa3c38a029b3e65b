"""Architectural faults raised by the simulated machine.

Operations that the hardware would abort raise one of these instead of
returning a status value. ``Bugcheck`` is terminal: the scenario that raised
it must not continue.
"""

import enum


class FaultKind(enum.Enum):
    GENERAL_PROTECTION = "GeneralProtection"
    PAGE_FAULT = "PageFault"
    VM_EXIT = "VmExit"
    BUGCHECK = "Bugcheck"


class Fault(Exception):
    kind = None

    def __init__(self, detail=""):
        super().__init__(detail)
        self.detail = detail

    def __str__(self):
        return f"{self.kind.value}: {self.detail}" if self.detail else self.kind.value

    def to_dict(self):
        return {"kind": self.kind.value, "detail": self.detail}


class GeneralProtection(Fault):
    kind = FaultKind.GENERAL_PROTECTION


class PageFault(Fault):
    kind = FaultKind.PAGE_FAULT

    def __init__(self, detail="", address=None):
        super().__init__(detail)
        self.address = address


class VmExit(Fault):
    """Raised when a descriptor-table instruction traps to the hypervisor.

    The hypervisor can read guest state, so the exit carries the value the
    instruction would have produced natively.
    """

    kind = FaultKind.VM_EXIT

    def __init__(self, instruction, true_value=None, operand=None):
        super().__init__(f"{instruction} intercepted by descriptor-table exiting")
        self.instruction = instruction
        self.true_value = true_value
        self.operand = operand


class Bugcheck(Fault):
    kind = FaultKind.BUGCHECK
