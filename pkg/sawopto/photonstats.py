"""Photon correlation and lifetime analysis on time-tagged detections (ps)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np
from lmfit import Parameters, minimize
from lmfit.models import ConstantModel, ExponentialModel

from sawopto.errors import ConvergenceError, DomainError, NoSignalError
from sawopto.report import FitReport, input_digest
from sawopto.units import PS_PER_S

logger = logging.getLogger(__name__)

# a-channel events processed per block when enumerating pairs.
_PAIR_BLOCK = 200_000
# Below this many far-wing coincidences the normalization cross-check is skipped.
MIN_WING_COUNTS = 100


@dataclass(frozen=True)
class PhotonRecord:
    channel: int
    time: int

    def __post_init__(self) -> None:
        if self.channel < 0:
            raise DomainError("channel must be non-negative")
        if self.time < 0:
            raise DomainError("time must be non-negative")


@dataclass
class CorrelationHistogram:
    tau_edges: np.ndarray
    counts: np.ndarray
    normalization: float
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.tau_edges = np.asarray(self.tau_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.size != self.tau_edges.size - 1:
            raise DomainError("counts length must equal number of edges minus one")
        if np.any(self.counts < 0):
            raise DomainError("counts must be non-negative")

    @property
    def tau_centers(self) -> np.ndarray:
        return 0.5 * (self.tau_edges[:-1] + self.tau_edges[1:])

    @property
    def bin_width(self) -> float:
        return float(self.tau_edges[1] - self.tau_edges[0])

    @property
    def g2(self) -> np.ndarray:
        return self.counts / self.normalization

    @property
    def g2_err(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.counts, 1)) / self.normalization

    def merge(self, other: "CorrelationHistogram") -> "CorrelationHistogram":
        """Combine histograms from disjoint time segments."""
        if not np.array_equal(self.tau_edges, other.tau_edges):
            raise DomainError("cannot merge histograms with different delay bins")
        return CorrelationHistogram(
            self.tau_edges,
            self.counts + other.counts,
            self.normalization + other.normalization,
            self.warnings + other.warnings,
        )


@dataclass
class DecayHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.size != self.bin_edges.size - 1:
            raise DomainError("counts length must equal number of edges minus one")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise DomainError("bin edges must be strictly increasing")

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def channel_times(records: Iterable[PhotonRecord], channel: int) -> np.ndarray:
    times = np.fromiter((r.time for r in records if r.channel == channel), dtype=float)
    return np.sort(times, kind="stable")


def _delay_index(delays: np.ndarray, bin_width: float) -> np.ndarray:
    # Round half away from zero so that index(-d) == -index(d) exactly.
    return (np.sign(delays) * np.floor(np.abs(delays) / bin_width + 0.5)).astype(np.int64)


def _pair_delays(ta: np.ndarray, tb: np.ndarray, reach: float, same: bool) -> Iterable[np.ndarray]:
    for start in range(0, ta.size, _PAIR_BLOCK):
        block = ta[start : start + _PAIR_BLOCK]
        lo = np.searchsorted(tb, block - reach, side="left")
        hi = np.searchsorted(tb, block + reach, side="right")
        n_pairs = hi - lo
        total = int(n_pairs.sum())
        if total == 0:
            continue
        ia = np.repeat(np.arange(block.size), n_pairs)
        first = np.repeat(np.cumsum(n_pairs) - n_pairs, n_pairs)
        ib = np.repeat(lo, n_pairs) + (np.arange(total) - first)
        delays = tb[ib] - block[ia]
        if same:
            delays = delays[ib != ia + start]
        yield delays


def correlate(
    records: Sequence[PhotonRecord],
    ch_a: int,
    ch_b: int,
    window: float,
    bin_width: float,
    duration: Optional[float] = None,
    wing_fraction: float = 0.8,
    tolerance: float = 0.1,
) -> CorrelationHistogram:
    """Histogram of all pairwise delays t_b - t_a within the window.

    Bins are centred on multiples of bin_width; the window is extended to the
    outer edge of the last bin so every bin is fully sampled. Normalization is
    the uncorrelated expectation r_a·r_b·T·bin_width.
    """
    if not window > bin_width > 0:
        raise DomainError("correlate requires window > bin_width > 0")
    ta = channel_times(records, ch_a)
    tb = channel_times(records, ch_b)
    for channel, times in ((ch_a, ta), (ch_b, tb)):
        if times.size == 0:
            raise NoSignalError(f"channel {channel} has no detections")

    if duration is None:
        duration = float(max(ta[-1], tb[-1]) - min(ta[0], tb[0]))
    if not duration > 0:
        raise DomainError("observation time must be positive")

    n = int(np.floor(window / bin_width))
    reach = (n + 0.5) * bin_width
    edges = (np.arange(-n, n + 2) - 0.5) * bin_width
    counts = np.zeros(2 * n + 1, dtype=np.int64)
    for delays in _pair_delays(ta, tb, reach, same=ch_a == ch_b):
        index = _delay_index(delays, bin_width) + n
        keep = (index >= 0) & (index <= 2 * n)
        counts += np.bincount(index[keep], minlength=2 * n + 1)

    normalization = ta.size * tb.size * bin_width / duration
    hist = CorrelationHistogram(edges, counts, normalization)

    wing = np.abs(hist.tau_centers) > wing_fraction * reach
    if wing.any() and counts[wing].sum() >= MIN_WING_COUNTS:
        ratio = counts[wing].mean() / normalization
        if abs(ratio - 1.0) > tolerance:
            message = f"far-wing level differs from rate normalization by {100 * (ratio - 1):.1f}%"
            logger.warning(message)
            hist.warnings.append(message)
    return hist


def _antibunching(tau, g2_0, tau0):
    return 1.0 - (1.0 - g2_0) * np.exp(-np.abs(tau) / tau0)


def _tau0_guess(hist: CorrelationHistogram) -> float:
    tau = hist.tau_centers
    g = hist.g2
    zero = int(np.argmin(np.abs(tau)))
    dip = 1.0 - g[zero]
    if dip > 0.05:
        target = 1.0 - dip / np.e
        for offset in range(1, tau.size):
            left, right = zero - offset, zero + offset
            if left < 0 or right >= tau.size:
                break
            if 0.5 * (g[left] + g[right]) >= target:
                return float(abs(tau[right]))
    return float(np.max(np.abs(tau))) / 10.0


def fit_g2(
    hist: CorrelationHistogram,
    tau0_guess: Optional[float] = None,
    max_iterations: int = 200,
) -> FitReport:
    """Fit g2(τ) = 1 − (1 − g2_0)·exp(−|τ|/τ0) to the normalized histogram."""
    tau = hist.tau_centers
    g = hist.g2
    sigma = hist.g2_err
    guess = tau0_guess if tau0_guess is not None else _tau0_guess(hist)
    if not guess > 0:
        raise DomainError("tau0 guess must be positive")
    if np.max(np.abs(tau)) < 5 * guess:
        raise DomainError("histogram must span at least 5 tau0")

    params = Parameters()
    params.add("g2_0", value=float(np.clip(g[np.argmin(np.abs(tau))], 0.0, 2.0)), min=0.0)
    params.add("tau0", value=guess, min=hist.bin_width * 1e-3)

    def residual(p):
        v = p.valuesdict()
        return (_antibunching(tau, v["g2_0"], v["tau0"]) - g) / sigma

    result = minimize(residual, params, method="leastsq", max_nfev=max_iterations * 3)
    if not result.success:
        raise ConvergenceError(f"g2 fit did not converge: {result.message}", last_iterate=result.params.valuesdict())

    report = FitReport(
        model_name="antibunching",
        residual_norm=float(np.sqrt(result.chisqr)),
        n_points=int(tau.size),
        converged=True,
        input_digest=input_digest(hist.tau_edges, hist.counts),
        config_snapshot={"tau0_guess": str(guess), "normalization": format(hist.normalization, ".9g")},
    )
    report.warnings.extend(hist.warnings)
    report.add("g2_0", result.params["g2_0"].value, result.params["g2_0"].stderr)
    report.add("tau0", result.params["tau0"].value, result.params["tau0"].stderr, "ps")
    report.flags["single_emitter"] = str(bool(result.params["g2_0"].value < 0.5)).lower()
    return report


def pulsed_g2(hist: CorrelationHistogram, period: float, n_side: int = 4) -> FitReport:
    """Pulsed-excitation g2(0): centre peak area over the mean side-peak area."""
    tau = hist.tau_centers
    reach = float(np.max(np.abs(tau)))
    usable = min(n_side, int(np.floor(reach / period - 0.5)))
    if usable < 1:
        raise DomainError("histogram must cover at least one side peak on each side")

    def area(k: int) -> float:
        return float(hist.counts[np.abs(tau - k * period) < period / 2].sum())

    centre = area(0)
    sides = [area(k) for k in range(-usable, usable + 1) if k != 0]
    side_total = sum(sides)
    if side_total <= 0:
        raise NoSignalError("no coincidences in side peaks")
    value = centre / (side_total / len(sides))
    stderr = value * np.sqrt((1.0 / centre if centre > 0 else 0.0) + 1.0 / side_total)

    report = FitReport(
        model_name="pulsed_g2",
        n_points=int(tau.size),
        input_digest=input_digest(hist.tau_edges, hist.counts),
        config_snapshot={"period": str(period), "n_side": str(usable)},
    )
    report.add("g2_0", value, stderr)
    report.flags["single_emitter"] = str(bool(value < 0.5)).lower()
    return report


def decay_from_timetags(
    records: Sequence[PhotonRecord],
    sync_channel: int,
    signal_channel: int,
    bin_width: float,
    n_bins: int,
) -> DecayHistogram:
    """Start-stop histogram of signal delays after the preceding sync event."""
    sync = channel_times(records, sync_channel)
    signal = channel_times(records, signal_channel)
    if sync.size == 0 or signal.size == 0:
        raise NoSignalError("sync and signal channels must both have events")
    last = np.searchsorted(sync, signal, side="right") - 1
    valid = last >= 0
    delays = signal[valid] - sync[last[valid]]
    edges = np.arange(n_bins + 1) * bin_width
    counts, _ = np.histogram(delays, bins=edges)
    return DecayHistogram(edges, counts)


def fit_lifetime(decay: DecayHistogram, start_offset: int = 2) -> FitReport:
    """Fit A·exp(−t/τ) + B to the tail after the histogram maximum."""
    counts = decay.counts
    peak = int(np.argmax(counts))
    if counts.size - peak - 1 < 10:
        raise DomainError("decay needs at least 10 bins past the peak")
    start = min(peak + start_offset, counts.size - 10)
    tail = counts[start:]
    t = decay.bin_centers[start:] - decay.bin_centers[start]
    if not np.any(tail > 0):
        raise NoSignalError("no decay detected: tail is empty")

    quarter = max(tail.size // 4, 1)
    head_mean, foot_mean = tail[:quarter].mean(), tail[-quarter:].mean()
    spread = np.sqrt(max(head_mean, 1e-12) / quarter + max(foot_mean, 1e-12) / quarter)
    if head_mean - foot_mean <= 3 * spread:
        raise NoSignalError("no decay detected")

    background = float(np.min(tail))
    amplitude = float(tail[0] - background)
    below = np.nonzero(tail - background < amplitude / np.e)[0]
    tau_guess = float(t[below[0]]) if below.size and t[below[0]] > 0 else float(t[-1]) / 3

    model = ExponentialModel(prefix="decay_") + ConstantModel(prefix="bg_")
    params = model.make_params(decay_amplitude=amplitude, decay_decay=tau_guess, bg_c=background)
    params["decay_decay"].set(min=float(np.min(np.diff(decay.bin_edges))) * 1e-3)
    params["decay_amplitude"].set(min=0.0)
    result = model.fit(tail, params, x=t, weights=1.0 / np.sqrt(np.maximum(tail, 1.0)))
    if not result.success:
        raise ConvergenceError(f"lifetime fit did not converge: {result.message}", last_iterate=result.best_values)

    report = FitReport(
        model_name="exponential_decay",
        residual_norm=float(np.sqrt(result.chisqr)),
        n_points=int(tail.size),
        converged=True,
        input_digest=input_digest(decay.bin_edges, counts),
        config_snapshot={"start_offset": str(start_offset), "fit_start_bin": str(start)},
    )
    report.add("tau", result.params["decay_decay"].value, result.params["decay_decay"].stderr, "ps")
    report.add("amplitude", result.params["decay_amplitude"].value, result.params["decay_amplitude"].stderr, "counts")
    report.add("background", result.params["bg_c"].value, result.params["bg_c"].stderr, "counts")
    return report


def _generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def simulate_poisson_stream(rate: float, duration: float, channel: int = 0, seed: int = 0) -> List[PhotonRecord]:
    """Uncorrelated detections at ``rate`` counts/s over ``duration`` seconds."""
    rng = _generator(seed)
    n = rng.poisson(rate * duration)
    times = np.sort(rng.uniform(0.0, duration * PS_PER_S, n))
    return [PhotonRecord(channel, int(t)) for t in np.rint(times)]


def simulate_antibunched_stream(
    emission_rate: float,
    tau0: float,
    duration: float,
    seed: int = 0,
    efficiency: float = 1.0,
    split: float = 0.5,
) -> List[PhotonRecord]:
    """Two-level emitter under CW pumping split by a beamsplitter onto channels 0/1.

    Inter-photon intervals are the sum of an excitation wait and a decay
    time, giving g2(τ) = 1 − exp(−|τ|/τ0) with τ0 in ps.
    """
    tau0_s = tau0 / PS_PER_S
    # Pump rate r and decay rate γ solve 1/r + 1/γ = 1/R and r + γ = 1/τ0.
    total = 1.0 / tau0_s
    product = emission_rate * total
    disc = total**2 - 4 * product
    if disc < 0:
        raise DomainError("emission rate too high for this antibunching time (need R <= 1/(4 tau0))")
    pump = 0.5 * (total + np.sqrt(disc))
    decay = total - pump

    rng = _generator(seed)
    expected = int(emission_rate * duration * 1.1) + 100
    intervals = rng.exponential(1.0 / pump, expected) + rng.exponential(1.0 / decay, expected)
    times = np.cumsum(intervals)
    times = times[times < duration]
    detected = rng.uniform(size=times.size) < efficiency
    channels = (rng.uniform(size=times.size) >= split).astype(int)
    times_ps = np.rint(times[detected] * PS_PER_S).astype(np.int64)
    return [PhotonRecord(int(c), int(t)) for c, t in zip(channels[detected], times_ps)]
