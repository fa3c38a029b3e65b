"""Input validation helpers shared by the simulator modules."""

import numbers

PAGE_SIZE = 0x1000
PAGE_MASK = ~(PAGE_SIZE - 1) & 0xFFFFFFFFFFFFFFFF
ADDRESS_MASK = 0xFFFFFFFFFFFFFFFF


def check_int(value, name):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    return int(value)


def check_uint(value, bits, name):
    value = check_int(value, name)
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name}={value:#x} does not fit in {bits} bits")
    return value


def check_ring(value, name="ring"):
    value = check_int(value, name)
    if not 0 <= value <= 3:
        raise ValueError(f"{name} must be in 0..3, got {value}")
    return value


def check_positive(value, name, strict=True):
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a number")
    if value < 0 or (strict and value == 0):
        bound = "> 0" if strict else ">= 0"
        raise ValueError(f"{name} must be {bound}, got {value}")
    return value


def check_probability(value, name):
    check_positive(value, name, strict=False)
    if value > 1:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def is_canonical(addr):
    """True when bits 63..47 are all equal (48-bit virtual addressing)."""
    top = (addr >> 47) & 0x1FFFF
    return top == 0 or top == 0x1FFFF


def check_address(addr, name="address"):
    addr = check_uint(addr, 64, name)
    if not is_canonical(addr):
        raise ValueError(f"{name}={addr:#018x} is not canonical")
    return addr


def page_of(addr):
    return addr & PAGE_MASK


def parse_hex_address(text):
    """Parse ``fffff8036385b000`` or ``0xFFFFF803...``; backticks/underscores ignored."""
    cleaned = text.strip().strip("`").replace("_", "").lower()
    if cleaned.startswith("0x"):
        cleaned = cleaned[2:]
    if not cleaned or len(cleaned) > 16:
        raise ValueError(f"malformed address {text!r}")
    try:
        return int(cleaned, 16)
    except ValueError:
        raise ValueError(f"malformed address {text!r}") from None


def hex64(addr):
    return f"{addr:016x}"
