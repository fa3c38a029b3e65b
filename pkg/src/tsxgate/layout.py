"""Seeded KASLR address space with KAISER user/kernel page views.

Per core ``c`` the IDT page sits at::

    0xFFFFF80 (bits 63..36) | X_c (bits 35..20) | low_c (bits 19..0)

with ``X_c`` uniform over 0..0xFFFF and ``low_0 == 0x5B000``; the GDT page is
``idt + 0x2000`` and the page between them is unmapped. The IDT, GDT, syscall
entry page, interrupt/syscall shadow stubs and the page-table self-map stay
mapped in the user view even with KAISER on; everything else in the kernel
is kernel-view only.
"""

import copy
import enum
import json
import struct
from dataclasses import dataclass

import numpy as np

from .descriptors import (
    DescriptorTable,
    GateType,
    SegmentDescriptor,
    TableKind,
)
from .faults import PageFault
from .validation import (
    PAGE_SIZE,
    check_int,
    check_ring,
    check_uint,
    hex64,
    is_canonical,
    page_of,
)

PATTERN_BASE = 0xFFFFF80 << 36
CORE0_LOW_CONSTANT = 0x5B000
IDT_TO_GDT = 0x2000
CANDIDATES_PER_CORE = 1 << 16
MAX_CORES = 64

# candidates cover PATTERN_BASE .. PATTERN_BASE + 2**36; stubs live well past that
STUB_REGION_BASE = 0xFFFFF82000000000
KERNEL_GDT_REGION_BASE = 0xFFFFF83000000000
SPOOF_REGION_BASE = 0xFFFFF84000000000

USER_IMAGE_BASE = 0x0000000000001000
USER_IMAGE_PAGES = 16
USER_STACK_TOP = 0x00007FFFFFFF0000
USER_STACK_PAGES = 4

# pages 0x10.. hold per-core ring-0 stacks, 0x10 + MAX_CORES.. per-core TSSs
KERNEL_IMAGE_PAGES = 0x10 + 2 * MAX_CORES
STUB_PAGES = 4
PT_REGION_PAGES = 4
LSTAR_ENTRY_OFFSET = 0x140

# simulated OS GDT (selectors)
KERNEL_CS = 0x08
KERNEL_DS = 0x10
USER_CS = 0x1B
USER_DS = 0x23
TSS_SELECTOR = 0x28
USER_TEB = 0x3B
OS_GDT_SLOTS = 8


class PageView(enum.Enum):
    USER = "UserView"
    KERNEL = "KernelView"


@dataclass
class PagePermission:
    supervisor_only: bool
    writable: bool


@dataclass(frozen=True)
class CoreTables:
    core: int
    x: int
    low_const: int

    @property
    def idt_base(self):
        return pattern_address(self.x, self.low_const)

    @property
    def gdt_base(self):
        return self.idt_base + IDT_TO_GDT


class LayoutError(ValueError):
    pass


def pattern_address(x, low_const):
    return PATTERN_BASE | (x << 20) | low_const


def sign_extend48(addr):
    addr &= (1 << 48) - 1
    return addr | (0xFFFF << 48) if addr & (1 << 47) else addr


class AddressSpaceLayout:
    """Mapped pages, permissions and backing bytes for one simulated machine.

    Build with :func:`generate_layout`. Mutation goes through :meth:`access`
    and :meth:`set_supervisor_bit`; the scenario driver serializes callers.
    """

    def __init__(self, seed, kaiser):
        self.seed = seed
        self.kaiser = kaiser
        self.cores = []
        self.msr_lstar_page = 0
        self.page_table_region = (0, 0)
        self.shadow_stub_pages = []
        self.kernel_image_base = 0
        self.user_pages = set()
        self.leak_pages = set()
        self.kernel_pages = set()
        # never in a user page table, KAISER or not (dual-GDT kernel copies)
        self.private_pages = set()
        self.page_permissions = {}
        self.backing_bytes = {}
        self.tss_addresses = {}

    @property
    def n_cores(self):
        return len(self.cores)

    @property
    def msr_lstar(self):
        return self.msr_lstar_page + LSTAR_ENTRY_OFFSET

    def idt_base(self, core=0):
        return self.cores[core].idt_base

    def gdt_base(self, core=0):
        return self.cores[core].gdt_base

    def low_constants(self):
        return [c.low_const for c in self.cores]

    def kernel_stack_top(self, core):
        return self.kernel_image_base + (0x10 + core) * PAGE_SIZE + PAGE_SIZE

    def shellcode_address(self):
        return self.kernel_image_base + 0x1000

    def marker_address(self):
        return self.kernel_image_base + 0x2000

    def pt_region_pages(self):
        start, end = self.page_table_region
        return list(range(start, end, PAGE_SIZE))

    # --- views -----------------------------------------------------------

    def mapped_pages(self, view):
        view = PageView(view)
        if view is PageView.KERNEL:
            return self.user_pages | self.leak_pages | self.kernel_pages | self.private_pages
        if not self.kaiser:
            return self.user_pages | self.leak_pages | self.kernel_pages
        return self.user_pages | self.leak_pages

    def user_view_pages(self):
        return frozenset(self.mapped_pages(PageView.USER))

    def is_mapped(self, addr, view):
        check_uint(addr, 64, "address")
        if not is_canonical(addr):
            raise PageFault(f"{addr:#018x} is not canonical", address=addr)
        page = page_of(addr)
        if page in self.user_pages or page in self.leak_pages:
            return True
        if PageView(view) is PageView.KERNEL:
            return page in self.kernel_pages or page in self.private_pages
        return not self.kaiser and page in self.kernel_pages

    def _map(self, page, *, supervisor_only, writable, leak=False, user=False, private=False):
        if private:
            self.private_pages.add(page)
        elif user:
            self.user_pages.add(page)
        elif leak:
            self.leak_pages.add(page)
        else:
            self.kernel_pages.add(page)
        self.page_permissions[page] = PagePermission(supervisor_only, writable)

    def page_buffer(self, page):
        buf = self.backing_bytes.get(page)
        if buf is None:
            buf = self.backing_bytes[page] = bytearray(PAGE_SIZE)
        return buf

    # --- access ----------------------------------------------------------

    def access(self, addr, view, privilege, data=None, size=8):
        """Read ``size`` bytes (``data`` None) or write ``data`` at ``addr``.

        Raises PageFault when a touched page is unmapped in ``view``, is
        supervisor-only and ``privilege`` is 3, or is read-only on a write.
        Returns the bytes read or written.
        """
        check_ring(privilege, "privilege")
        view = PageView(view)
        length = size if data is None else len(data)
        if length <= 0:
            raise ValueError("access length must be positive")
        pages = range(page_of(addr), page_of(addr + length - 1) + 1, PAGE_SIZE)
        for page in pages:
            if not self.is_mapped(page, view):
                raise PageFault(f"{page:#018x} not mapped in {view.value}", address=addr)
            perm = self.page_permissions[page]
            if perm.supervisor_only and privilege == 3:
                raise PageFault(f"{page:#018x} is supervisor-only", address=addr)
            if data is not None and not perm.writable:
                raise PageFault(f"{page:#018x} is read-only", address=addr)
        out = bytearray()
        pos = addr
        remaining = length
        while remaining:
            page = page_of(pos)
            off = pos - page
            n = min(remaining, PAGE_SIZE - off)
            buf = self.page_buffer(page)
            if data is None:
                out += buf[off:off + n]
            else:
                done = length - remaining
                buf[off:off + n] = data[done:done + n]
            pos += n
            remaining -= n
        return bytes(out) if data is None else bytes(data)

    def read(self, addr, size, view=PageView.KERNEL, privilege=0):
        return self.access(addr, view, privilege, size=size)

    def write(self, addr, data, view=PageView.KERNEL, privilege=0):
        return self.access(addr, view, privilege, data=data)

    def set_supervisor_bit(self, page, value):
        if page != page_of(page):
            raise LayoutError(f"{page:#x} is not page aligned")
        if not self.is_mapped(page, PageView.KERNEL):
            raise LayoutError(f"{page:#018x} is not mapped")
        self.page_permissions[page].supervisor_only = bool(value)

    def set_writable(self, page, value):
        if page != page_of(page):
            raise LayoutError(f"{page:#x} is not page aligned")
        if not self.is_mapped(page, PageView.KERNEL):
            raise LayoutError(f"{page:#018x} is not mapped")
        self.page_permissions[page].writable = bool(value)

    def map_private(self, page, data=None, writable=True):
        """Map a supervisor page that only the kernel view can ever see."""
        if page != page_of(page):
            raise LayoutError(f"{page:#x} is not page aligned")
        if self.is_mapped(page, PageView.KERNEL):
            raise LayoutError(f"{page:#018x} is already mapped")
        self._map(page, supervisor_only=True, writable=writable, private=True)
        if data is not None:
            self.backing_bytes[page] = bytearray(data)

    def table_at(self, base, kind=TableKind.GDT):
        """A DescriptorTable that aliases the page holding ``base``."""
        page = page_of(base)
        if not self.is_mapped(page, PageView.KERNEL):
            raise PageFault(f"no table page at {base:#018x}", address=base)
        view = memoryview(self.page_buffer(page))[base - page:]
        return DescriptorTable(view, base=base, kind=kind)

    def copy(self):
        return copy.deepcopy(self)

    # --- serialization ---------------------------------------------------

    def to_dict(self):
        start, end = self.page_table_region
        return {
            "seed": self.seed,
            "kaiser": self.kaiser,
            "cores": [
                {"idt": hex64(c.idt_base), "gdt": hex64(c.gdt_base),
                 "low_const": f"{c.low_const:05x}"}
                for c in self.cores
            ],
            "lstar": hex64(self.msr_lstar),
            "pt_region": [hex64(start), hex64(end)],
            "stubs": [hex64(p) for p in self.shadow_stub_pages],
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def fingerprint(self):
        """Everything that defines the layout, for equality checks."""
        return (
            self.seed, self.kaiser, tuple(self.cores), self.msr_lstar_page,
            self.page_table_region, tuple(self.shadow_stub_pages), self.kernel_image_base,
            frozenset(self.user_pages), frozenset(self.leak_pages), frozenset(self.kernel_pages),
            frozenset(self.private_pages),
            tuple(sorted((p, (v.supervisor_only, v.writable)) for p, v in self.page_permissions.items())),
            tuple(sorted((p, bytes(b)) for p, b in self.backing_bytes.items())),
        )

    def __eq__(self, other):
        if not isinstance(other, AddressSpaceLayout):
            return NotImplemented
        return self.fingerprint() == other.fingerprint()

    __hash__ = None


def _draw_low_constants(rng, n_cores):
    """Core 0 gets 0x5B000; others get distinct page-aligned 20-bit constants.

    Each core claims pages low, low+0x1000, low+0x2000 of its 1 MiB slot;
    claimed triples never overlap so the IDT/gap/GDT pattern of one core is
    never disturbed by another core sharing the same X.
    """
    lows = [CORE0_LOW_CONSTANT]
    taken = {CORE0_LOW_CONSTANT >> 12, (CORE0_LOW_CONSTANT >> 12) + 1,
             (CORE0_LOW_CONSTANT >> 12) + 2}
    # keep low + 0x2000 inside the 1 MiB slot
    for page_no in rng.permutation(0xFE):
        if len(lows) == n_cores:
            break
        triple = {int(page_no), int(page_no) + 1, int(page_no) + 2}
        if triple & taken:
            continue
        taken |= triple
        lows.append(int(page_no) << 12)
    if len(lows) < n_cores:
        raise LayoutError(f"cannot place {n_cores} disjoint per-core table pages")
    return lows


def _gdt_image(tss_address):
    table = DescriptorTable.empty()
    table.put(KERNEL_CS >> 3, SegmentDescriptor.code(0))
    table.put(KERNEL_DS >> 3, SegmentDescriptor.data(0))
    table.put(USER_CS >> 3, SegmentDescriptor.code(3))
    table.put(USER_DS >> 3, SegmentDescriptor.data(3))
    tss = SegmentDescriptor(base=tss_address & 0xFFFFFFFF, limit=0x67,
                            type_field=GateType.TSS32_AVAILABLE, present=True)
    table.put(TSS_SELECTOR >> 3, tss)
    table.write_slot((TSS_SELECTOR >> 3) + 1, struct.pack("<II", tss_address >> 32, 0))
    table.put(USER_TEB >> 3, SegmentDescriptor.data(3, limit=0xFFF, present=True))
    return bytes(table.data)


def _idt_image(handler_base):
    out = bytearray()
    for vector in range(256):
        offset = handler_base + vector * 0x40
        dpl = 3 if vector in (0x03, 0x04, 0x2C, 0x2D, 0x2E) else 0
        access = 0x80 | (dpl << 5) | GateType.INTERRUPT_GATE32
        out += struct.pack("<HHBBHII", offset & 0xFFFF, KERNEL_CS, 0, access,
                           (offset >> 16) & 0xFFFF, offset >> 32, 0)
    return bytes(out)


def generate_layout(seed, n_cores=1, kaiser=True, planted=None):
    """Build a deterministic layout from ``seed``.

    ``planted`` optionally fixes the X value of given cores (``{0: 0x3638}``);
    the random stream is consumed identically either way.
    """
    seed = check_int(seed, "seed")
    n_cores = check_int(n_cores, "n_cores")
    if not 1 <= n_cores <= MAX_CORES:
        raise ValueError(f"n_cores must be in 1..{MAX_CORES}, got {n_cores}")
    planted = dict(planted or {})
    for core, x in planted.items():
        if not 0 <= core < n_cores:
            raise ValueError(f"planted core {core} outside 0..{n_cores - 1}")
        check_uint(x, 16, f"planted X for core {core}")

    rng = np.random.default_rng(np.random.SeedSequence(seed & ((1 << 64) - 1)))
    xs = [int(v) for v in rng.integers(0, CANDIDATES_PER_CORE, size=n_cores)]
    for core, x in planted.items():
        xs[core] = x
    lows = _draw_low_constants(rng, n_cores)

    layout = AddressSpaceLayout(seed, bool(kaiser))
    layout.cores = [CoreTables(c, xs[c], lows[c]) for c in range(n_cores)]

    while True:
        kx = int(rng.integers(0, CANDIDATES_PER_CORE))
        if kx not in xs:
            break
    layout.kernel_image_base = pattern_address(kx, 0x80000)
    stub_base = STUB_REGION_BASE | (int(rng.integers(0, 1 << 20)) << 12)
    pt_index = int(rng.integers(0x100, 0x1F0))
    pxe = sign_extend48((pt_index << 39) | (pt_index << 30) | (pt_index << 21) | (pt_index << 12))

    for i in range(USER_IMAGE_PAGES):
        layout._map(USER_IMAGE_BASE + i * PAGE_SIZE, supervisor_only=False, writable=True, user=True)
    for i in range(1, USER_STACK_PAGES + 1):
        layout._map(USER_STACK_TOP - i * PAGE_SIZE, supervisor_only=False, writable=True, user=True)

    for i in range(KERNEL_IMAGE_PAGES):
        layout._map(layout.kernel_image_base + i * PAGE_SIZE, supervisor_only=True, writable=True)

    layout.msr_lstar_page = stub_base
    layout._map(stub_base, supervisor_only=True, writable=False, leak=True)
    layout.shadow_stub_pages = [stub_base + (i + 1) * PAGE_SIZE for i in range(STUB_PAGES)]
    for page in layout.shadow_stub_pages:
        layout._map(page, supervisor_only=True, writable=False, leak=True)

    layout.page_table_region = (pxe, pxe + PT_REGION_PAGES * PAGE_SIZE)
    for page in layout.pt_region_pages():
        layout._map(page, supervisor_only=True, writable=True, leak=True)

    handler_base = layout.shadow_stub_pages[0]
    for core in layout.cores:
        tss_address = layout.kernel_image_base + (0x10 + MAX_CORES + core.core) * PAGE_SIZE
        layout.tss_addresses[core.core] = tss_address
        layout._map(core.idt_base, supervisor_only=True, writable=False, leak=True)
        layout._map(core.gdt_base, supervisor_only=True, writable=True, leak=True)
        layout.backing_bytes[core.idt_base] = bytearray(_idt_image(handler_base))
        layout.backing_bytes[core.gdt_base] = bytearray(_gdt_image(tss_address))
    return layout


def first_free_slot_pair(table, start=OS_GDT_SLOTS):
    """Lowest slot index >= ``start`` whose slot and successor are both non-present."""
    for index in range(start, table.slot_count - 1):
        if not table.slot(index)[5] & 0x80 and not table.slot(index + 1)[5] & 0x80:
            return index
    raise LayoutError("no free slot pair in table")
