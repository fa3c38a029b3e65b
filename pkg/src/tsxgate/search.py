"""Pattern-constrained scan for the IDT/GDT pages of each core.

Every candidate ``0xFFFFF80 | k << 20 | low`` is classified with the timing
model. A candidate is reported as an IDT when it reads as mapped, the page
0x2000 above it (the GDT) reads as mapped and the page between them reads
as unmapped.

Noise draws are keyed by (seed, core, candidate chunk) rather than by
worker, so each candidate's measurement is the same whatever the worker
count. Workers advance in lockstep simulated time, one candidate per tick;
with ``stop_on_first`` a confirmed hit cancels the remaining candidates of
its core at the next tick boundary.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .layout import (
    CANDIDATES_PER_CORE,
    IDT_TO_GDT,
    PATTERN_BASE,
    PageView,
    pattern_address,
)
from .timing import (
    DEFAULT_BANDS,
    NoiseModel,
    ProbeClass,
    TimerKind,
    default_threshold,
    draw_cycles,
)
from .validation import PAGE_SIZE, check_int, check_positive, hex64

PRECISE_RATE = 10.0
FAST_RATE = 20.0
CHUNK = 4096

_STREAM_CANDIDATES = 0
_STREAM_CONFIRM = 1


def candidate_set(low_const):
    """All 65,536 pattern addresses for one core, ascending."""
    low_const = check_int(low_const, "low_const")
    if low_const & (PAGE_SIZE - 1) or not 0 <= low_const < (1 << 20):
        raise ValueError(f"low constant {low_const:#x} must be a page-aligned 20-bit value")
    return [PATTERN_BASE | (k << 20) | low_const for k in range(CANDIDATES_PER_CORE)]


@dataclass(frozen=True)
class SearchConfig:
    cores: tuple = (0,)
    probes_per_address: int = 16
    rate: float = PRECISE_RATE
    timer: TimerKind = TimerKind.RDTSCP_TSX
    noise: NoiseModel = NoiseModel()
    parallel_workers: int = 1
    stop_on_first: bool = False
    low_constants: dict = None
    threshold: float = None
    seed: int = None
    fast_ratio: int = 2
    charge_confirmations: bool = False
    record_candidates: bool = False
    bands: object = DEFAULT_BANDS
    profile: object = None

    def __post_init__(self):
        check_positive(self.rate, "rate")
        if check_int(self.probes_per_address, "probes_per_address") < 1:
            raise ValueError("probes_per_address must be >= 1")
        if check_int(self.parallel_workers, "parallel_workers") < 1:
            raise ValueError("parallel_workers must be >= 1")
        if check_int(self.fast_ratio, "fast_ratio") < 1:
            raise ValueError("fast_ratio must be >= 1")
        object.__setattr__(self, "timer", TimerKind.parse(self.timer))
        if self.cores is not None:
            object.__setattr__(self, "cores", tuple(sorted(set(self.cores))))

    @property
    def effective_probes(self):
        """Samples per address; runs faster than the precise rate trade samples for speed."""
        if self.rate > PRECISE_RATE:
            return max(1, self.probes_per_address // self.fast_ratio)
        return self.probes_per_address

    @property
    def effective_threshold(self):
        if self.threshold is not None:
            return self.threshold
        return default_threshold(self.timer, self.bands, self.profile)


@dataclass
class SearchReport:
    findings: dict
    hits: dict
    candidates_probed: int
    confirmation_probes: int
    simulated_seconds: float
    rate: float
    misclassifications: int
    worker_assignment: dict
    worker_probed: list
    candidate_rows: list = field(default=None, repr=False)

    def found(self, core=0):
        return self.findings.get(core) is not None

    def to_dict(self):
        return {
            "cores": [
                {"core": core,
                 "idt": hex64(pair[0]) if pair else None,
                 "gdt": hex64(pair[1]) if pair else None}
                for core, pair in sorted(self.findings.items())
            ],
            "candidates_probed": self.candidates_probed,
            "confirmation_probes": self.confirmation_probes,
            "simulated_seconds": round(self.simulated_seconds, 1),
            "rate": self.rate,
            "workers": len(self.worker_probed),
            "worker_probed": list(self.worker_probed),
        }


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _mapped_indices(layout, low_const):
    """Candidate indices k whose page is mapped in the user view."""
    out = []
    for page in layout.mapped_pages(PageView.USER):
        if (page >> 36) == (PATTERN_BASE >> 36) and (page & 0xFFFFF) == low_const:
            out.append((page >> 20) & 0xFFFF)
    return out


class _CoreScan:
    """Per-candidate statistics and pairing verdicts for one core."""

    def __init__(self, layout, core, low_const, cfg, seed):
        self.core = core
        self.low = low_const
        n = cfg.effective_probes
        truth = np.zeros(CANDIDATES_PER_CORE, dtype=bool)
        truth[_mapped_indices(layout, low_const)] = True
        stats = np.empty(CANDIDATES_PER_CORE, dtype=np.int64)
        for chunk in range(CANDIDATES_PER_CORE // CHUNK):
            sl = slice(chunk * CHUNK, (chunk + 1) * CHUNK)
            rng = _rng(seed, _STREAM_CANDIDATES, core, chunk)
            samples = draw_cycles(rng, truth[sl], n, cfg.timer, cfg.noise, cfg.bands, cfg.profile)
            stats[sl] = samples.min(axis=1)
        threshold = cfg.effective_threshold
        self.truth = truth
        self.stats = stats
        self.classified = stats < threshold
        self.hit = np.zeros(CANDIDATES_PER_CORE, dtype=bool)
        self.confirm_probes = {}
        for k in np.flatnonzero(self.classified):
            k = int(k)
            idt = pattern_address(k, low_const)
            rng = _rng(seed, _STREAM_CONFIRM, core, k)
            pair_addrs = np.array([layout.is_mapped(idt + IDT_TO_GDT, PageView.USER),
                                   layout.is_mapped(idt + PAGE_SIZE, PageView.USER)])
            conf = draw_cycles(rng, pair_addrs, n, cfg.timer, cfg.noise, cfg.bands,
                               cfg.profile).min(axis=1)
            gdt_mapped, gap_mapped = conf < threshold
            self.hit[k] = bool(gdt_mapped and not gap_mapped)
            self.confirm_probes[k] = 2


def _split(total, workers):
    # contiguous ranges whose sizes differ by at most one
    sizes = [total // workers + (1 if w < total % workers else 0) for w in range(workers)]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(starts[w]), int(starts[w + 1])) for w in range(workers)]


def locate_tables_multicore(layout, cfg):
    """Scan the configured cores' candidate sets with ``cfg.parallel_workers`` workers.

    The work list is the concatenation of the selected cores' candidate sets
    (core-major, ascending k), split evenly into contiguous worker ranges.
    ``simulated_seconds`` is the busiest worker's probe count divided by the
    rate, so W workers finish a full scan in 1/W of the single-worker time.
    """
    cores = cfg.cores if cfg.cores is not None else tuple(range(layout.n_cores))
    for core in cores:
        if not 0 <= core < layout.n_cores:
            raise ValueError(f"core {core} not present in layout with {layout.n_cores} cores")
    lows = dict(cfg.low_constants) if cfg.low_constants else {}
    seed = layout.seed if cfg.seed is None else cfg.seed
    scans = [_CoreScan(layout, c, lows.get(c, layout.cores[c].low_const), cfg, seed)
             for c in cores]

    total = len(scans) * CANDIDATES_PER_CORE
    ranges = _split(total, cfg.parallel_workers)
    hit_flat = np.concatenate([s.hit for s in scans])
    core_of = np.repeat(np.arange(len(scans)), CANDIDATES_PER_CORE)

    probed = np.zeros(total, dtype=bool)
    found_at = {}  # scan position -> global index of reported hit
    if cfg.stop_on_first:
        pointers = [start for start, _ in ranges]
        ticks = [0] * len(ranges)
        while True:
            # next pending items per worker, skipping cores already found
            pending = []
            for w, (start, end) in enumerate(ranges):
                items = np.arange(pointers[w], end)
                items = items[~np.isin(core_of[items], list(found_at))]
                pending.append(items)
            firsts = [np.flatnonzero(hit_flat[items]) for items in pending]
            steps = [int(f[0]) + 1 for f in firsts if f.size]
            if not steps:
                for w, items in enumerate(pending):
                    probed[items] = True
                    ticks[w] += len(items)
                    pointers[w] = ranges[w][1]
                break
            delta = min(steps)
            newly = {}
            for w, items in enumerate(pending):
                take = items[:delta]
                probed[take] = True
                ticks[w] += len(take)
                pointers[w] = int(take[-1]) + 1 if take.size else ranges[w][1]
                if take.size == delta and hit_flat[take[-1]]:
                    g = int(take[-1])
                    pos = int(core_of[g])
                    newly[pos] = min(newly.get(pos, g), g)
            found_at.update(newly)
        worker_probed = ticks
    else:
        probed[:] = True
        worker_probed = [end - start for start, end in ranges]
        for pos in range(len(scans)):
            ks = np.flatnonzero(scans[pos].hit)
            if ks.size:
                found_at[pos] = pos * CANDIDATES_PER_CORE + int(ks[0])

    findings, hits = {}, {}
    misclassified = 0
    confirmations = 0
    per_worker_conf = [0] * len(ranges)
    rows = [] if cfg.record_candidates else None
    for pos, scan in enumerate(scans):
        mask = probed[pos * CANDIDATES_PER_CORE:(pos + 1) * CANDIDATES_PER_CORE]
        misclassified += int(np.count_nonzero((scan.classified != scan.truth) & mask))
        probed_ks = [k for k in scan.confirm_probes if mask[k]]
        for k in probed_ks:
            g = pos * CANDIDATES_PER_CORE + k
            w = next(i for i, (s, e) in enumerate(ranges) if s <= g < e)
            per_worker_conf[w] += scan.confirm_probes[k]
        confirmations += sum(scan.confirm_probes[k] for k in probed_ks)
        hits[scan.core] = [pattern_address(int(k), scan.low)
                           for k in np.flatnonzero(scan.hit & mask)]
        if pos in found_at:
            k = found_at[pos] - pos * CANDIDATES_PER_CORE
            idt = pattern_address(k, scan.low)
            findings[scan.core] = (idt, idt + IDT_TO_GDT)
        else:
            findings[scan.core] = None
        if rows is not None:
            for k in np.flatnonzero(mask):
                cls = ProbeClass.MAPPED if scan.classified[k] else ProbeClass.UNMAPPED
                rows.append((pattern_address(int(k), scan.low), int(scan.stats[k]), cls.value))

    busiest = max(
        p + (per_worker_conf[w] if cfg.charge_confirmations else 0)
        for w, p in enumerate(worker_probed)
    )
    assignment = {}
    for w, (start, end) in enumerate(ranges):
        segs = []
        for pos in sorted(set(core_of[start:end].tolist())) if end > start else []:
            lo = max(start, pos * CANDIDATES_PER_CORE) - pos * CANDIDATES_PER_CORE
            hi = min(end, (pos + 1) * CANDIDATES_PER_CORE) - pos * CANDIDATES_PER_CORE
            segs.append((scans[pos].core, lo, hi))
        assignment[w] = segs

    return SearchReport(
        findings=findings,
        hits=hits,
        candidates_probed=int(sum(worker_probed)),
        confirmation_probes=confirmations,
        simulated_seconds=busiest / cfg.rate,
        rate=cfg.rate,
        misclassifications=misclassified,
        worker_assignment=assignment,
        worker_probed=list(worker_probed),
        candidate_rows=rows,
    )


def locate_tables(layout, cfg):
    """Single-worker scan: cores in ascending order, candidates ascending."""
    if cfg.parallel_workers != 1:
        cfg = replace(cfg, parallel_workers=1)
    return locate_tables_multicore(layout, cfg)


class TableLocator(BaseEstimator):
    """Estimator wrapper around :func:`locate_tables_multicore`.

    ``fit(layout)`` runs the scan and stores ``report_`` and ``findings_``;
    ``score(layout)`` is the fraction of scanned cores whose reported
    (IDT, GDT) pair matches the layout.
    """

    def __init__(self, cores=(0,), probes_per_address=16, rate=PRECISE_RATE,
                 timer="rdtscp", sigma=0.0, contention_rate=0.0, outlier_shift=60.0,
                 parallel_workers=1, stop_on_first=False, threshold=None, random_state=None):
        self.cores = cores
        self.probes_per_address = probes_per_address
        self.rate = rate
        self.timer = timer
        self.sigma = sigma
        self.contention_rate = contention_rate
        self.outlier_shift = outlier_shift
        self.parallel_workers = parallel_workers
        self.stop_on_first = stop_on_first
        self.threshold = threshold
        self.random_state = random_state

    def to_config(self):
        return SearchConfig(
            cores=self.cores,
            probes_per_address=self.probes_per_address,
            rate=self.rate,
            timer=TimerKind.parse(self.timer),
            noise=NoiseModel(self.sigma, self.contention_rate, self.outlier_shift),
            parallel_workers=self.parallel_workers,
            stop_on_first=self.stop_on_first,
            threshold=self.threshold,
            seed=self.random_state,
        )

    def fit(self, layout, y=None):
        self.report_ = locate_tables_multicore(layout, self.to_config())
        self.findings_ = dict(self.report_.findings)
        return self

    def score(self, layout, y=None):
        check_is_fitted(self, "report_")
        correct = sum(
            pair == (layout.idt_base(core), layout.gdt_base(core))
            for core, pair in self.findings_.items()
        )
        return correct / max(1, len(self.findings_))
