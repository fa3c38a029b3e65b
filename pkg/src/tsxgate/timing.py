"""Latency model of a transactional (TSX) probe of a kernel address.

The probed load always aborts the transaction, so no fault reaches the
kernel. What leaks is how long the abort takes: a page present in the
user-view page tables aborts faster than an unmapped one. Samples are drawn
uniformly from the configured bands, shifted by timer overhead, then
perturbed by Gaussian noise and occasional positive contention outliers.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .layout import PageView
from .validation import check_int, check_positive, check_probability


class TimerKind(enum.Enum):
    RDTSCP_TSX = "RdtscpTsx"
    CPUID_RDTSC_TSX = "CpuidRdtscTsx"
    COUNTER_THREAD = "CounterThread"

    @classmethod
    def parse(cls, text):
        aliases = {"rdtscp": cls.RDTSCP_TSX, "cpuid": cls.CPUID_RDTSC_TSX,
                   "thread": cls.COUNTER_THREAD}
        if isinstance(text, cls):
            return text
        try:
            return aliases[text.lower()]
        except KeyError:
            return cls(text)


class ProbeClass(enum.Enum):
    MAPPED = "Mapped"
    UNMAPPED = "Unmapped"


@dataclass(frozen=True)
class TimerProfile:
    """Constant overhead, uniform jitter in [0, jitter] and output tick, in cycles."""

    overhead: int = 0
    jitter: int = 0
    tick: int = 1


DEFAULT_PROFILES = {
    TimerKind.RDTSCP_TSX: TimerProfile(),
    TimerKind.CPUID_RDTSC_TSX: TimerProfile(overhead=40, jitter=12),
    TimerKind.COUNTER_THREAD: TimerProfile(tick=2),
}


@dataclass(frozen=True)
class LatencyBands:
    mapped: tuple = (190, 197)
    unmapped: tuple = (220, 234)
    label: str = "6th-gen Intel (i7-6820HQ)"

    def __post_init__(self):
        (mlo, mhi), (ulo, uhi) = self.mapped, self.unmapped
        if not (mlo <= mhi and ulo <= uhi):
            raise ValueError("band endpoints must be ordered")


DEFAULT_BANDS = LatencyBands()


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    contention_rate: float = 0.0
    outlier_shift: float = 60.0

    def __post_init__(self):
        check_positive(self.sigma, "sigma", strict=False)
        check_probability(self.contention_rate, "contention_rate")
        check_positive(self.outlier_shift, "outlier_shift", strict=False)

    @property
    def silent(self):
        return self.sigma == 0 and self.contention_rate == 0


@dataclass
class ProbeResult:
    address: int
    samples: int
    statistic: int
    classification: ProbeClass
    threshold: float
    per_sample: list = field(default=None, repr=False)


class CalibrationError(RuntimeError):
    """The two calibration anchors produced overlapping latency clouds."""


def _profile(timer, profile):
    return profile if profile is not None else DEFAULT_PROFILES[TimerKind.parse(timer)]


def draw_cycles(rng, mapped, n_samples, timer=TimerKind.RDTSCP_TSX, noise=NoiseModel(),
                bands=DEFAULT_BANDS, profile=None):
    """Vectorized sampler: returns int64 cycles of shape ``mapped.shape + (n_samples,)``."""
    prof = _profile(timer, profile)
    mapped = np.asarray(mapped, dtype=bool)
    shape = mapped.shape + (n_samples,)
    (mlo, mhi), (ulo, uhi) = bands.mapped, bands.unmapped
    fast = rng.integers(mlo, mhi + 1, size=shape)
    slow = rng.integers(ulo, uhi + 1, size=shape)
    cycles = np.where(mapped[..., None], fast, slow).astype(np.float64)
    cycles += prof.overhead
    if prof.jitter:
        cycles += rng.integers(0, prof.jitter + 1, size=shape)
    if noise.sigma > 0:
        cycles += rng.normal(0.0, noise.sigma, size=shape)
    if noise.contention_rate > 0:
        cycles += (rng.random(size=shape) < noise.contention_rate) * noise.outlier_shift
    cycles = np.rint(cycles)
    if prof.tick > 1:
        cycles = np.floor(cycles / prof.tick) * prof.tick
    return cycles.astype(np.int64)


def default_threshold(timer=TimerKind.RDTSCP_TSX, bands=DEFAULT_BANDS, profile=None):
    """Midpoint of the gap between the shifted bands (208 for the default timer)."""
    prof = _profile(timer, profile)
    upper_fast = bands.mapped[1] + prof.overhead + prof.jitter
    lower_slow = bands.unmapped[0] + prof.overhead
    return (upper_fast + lower_slow) // 2


def probe_once(layout, addr, timer, noise, rng, bands=DEFAULT_BANDS, profile=None):
    """One aborted transactional access to ``addr`` from ring 3; never faults."""
    mapped = layout.is_mapped(addr, PageView.USER)
    return int(draw_cycles(rng, mapped, 1, timer, noise, bands, profile)[0])


def measure(layout, addr, n_samples, timer, noise, rng, threshold=None,
            bands=DEFAULT_BANDS, profile=None, keep_samples=False):
    n_samples = check_int(n_samples, "n_samples")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if threshold is None:
        threshold = default_threshold(timer, bands, profile)
    mapped = layout.is_mapped(addr, PageView.USER)
    samples = draw_cycles(rng, mapped, n_samples, timer, noise, bands, profile)
    stat = int(samples.min())
    return ProbeResult(
        address=addr,
        samples=n_samples,
        statistic=stat,
        classification=ProbeClass.MAPPED if stat < threshold else ProbeClass.UNMAPPED,
        threshold=threshold,
        per_sample=samples.tolist() if keep_samples else None,
    )


class LatencyThresholdClassifier(ClassifierMixin, BaseEstimator):
    """Mapped/unmapped classifier over per-address latency samples.

    Each row of ``X`` holds the cycle samples of one address. The decision
    statistic is the row minimum; a row is predicted mapped (1) when its
    minimum falls below ``threshold_``.

    Parameters
    ----------
    threshold : float or None
        Fixed decision threshold. When None, ``fit`` places it at the
        integer midpoint of the gap between the largest sample of any mapped
        row and the smallest sample of any unmapped row.

    Attributes
    ----------
    threshold_ : float
    classes_ : ndarray of shape (2,)
    """

    def __init__(self, threshold=None):
        self.threshold = threshold

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.array([0, 1])
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("labels must be 0 (unmapped) or 1 (mapped)")
        if self.threshold is not None:
            self.threshold_ = float(self.threshold)
            return self
        fast, slow = X[y == 1], X[y == 0]
        if fast.size == 0 or slow.size == 0:
            raise ValueError("fit needs at least one mapped and one unmapped row")
        upper, lower = fast.max(), slow.min()
        if upper >= lower:
            raise CalibrationError(
                f"mapped samples reach {upper:.0f} cycles but unmapped start at {lower:.0f}")
        self.threshold_ = float((int(upper) + int(lower)) // 2)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "threshold_")
        X = check_array(X, dtype=np.float64)
        return self.threshold_ - X.min(axis=1)

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)


def calibrate(layout, known_mapped, known_unmapped, n, timer=TimerKind.RDTSCP_TSX,
              noise=NoiseModel(), rng=None, bands=DEFAULT_BANDS, profile=None):
    """Fit a threshold from one known-mapped and one known-unmapped address."""
    n = check_int(n, "n")
    if n < 1:
        raise ValueError("n must be >= 1")
    if rng is None:
        # own stream per layout so repeated calls agree
        rng = np.random.default_rng([layout.seed, 4])
    mapped = [layout.is_mapped(known_mapped, PageView.USER),
              layout.is_mapped(known_unmapped, PageView.USER)]
    X = draw_cycles(rng, np.array(mapped), n, timer, noise, bands, profile)
    clf = LatencyThresholdClassifier().fit(X, np.array([1, 0]))
    return int(clf.threshold_)
