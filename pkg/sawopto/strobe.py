"""Stroboscopic photon counting through a bandpass filter.

Times are in seconds inside this module; photon records leave it in ps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from lmfit import Parameters, minimize
from scipy.integrate import trapezoid

from sawopto.emitter import ModulatedEmitter, instantaneous_center
from sawopto.errors import ConvergenceError, DomainError, NoSignalError
from sawopto.photonstats import PhotonRecord
from sawopto.report import FitReport, input_digest
from sawopto.units import PS_PER_S

logger = logging.getLogger(__name__)

DETECTOR_CHANNEL = 0
# Energy samples used to integrate soft-edged passbands.
_EDGE_SAMPLES = 2001
# ΔE below this many no-signal RMS radii is reported as unresolved.
RESOLVED_RADII = 2.0


@dataclass(frozen=True)
class BandpassFilter:
    omega_low: float
    omega_high: float
    edge_width: float = 0.0

    def __post_init__(self) -> None:
        if not self.omega_low < self.omega_high:
            raise DomainError("filter requires omega_low < omega_high")
        if self.edge_width < 0:
            raise DomainError("edge_width must be non-negative")

    @classmethod
    def around(cls, center: float, width: float, edge_width: float = 0.0) -> "BandpassFilter":
        return cls(center - width / 2, center + width / 2, edge_width)

    @property
    def center(self) -> float:
        return 0.5 * (self.omega_low + self.omega_high)

    @property
    def bandwidth(self) -> float:
        return self.omega_high - self.omega_low

    def is_symmetric_about(self, omega0: float, tol: float = 1e-12) -> bool:
        return abs(self.center - omega0) <= tol * max(1.0, abs(omega0))

    def transmission(self, omega):
        """Ideal step edges, or raised-cosine edges of total width edge_width."""
        omega = np.asarray(omega, dtype=float)
        if self.edge_width == 0:
            return ((omega >= self.omega_low) & (omega <= self.omega_high)).astype(float)
        half = self.edge_width / 2
        rise = np.clip((omega - (self.omega_low - half)) / self.edge_width, 0.0, 1.0)
        fall = np.clip(((self.omega_high + half) - omega) / self.edge_width, 0.0, 1.0)
        return np.minimum(0.5 * (1 - np.cos(np.pi * rise)), 0.5 * (1 - np.cos(np.pi * fall)))


@dataclass
class StrobeHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    total_emitted: int = 0
    total_detected: int = 0

    def __post_init__(self) -> None:
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.size != self.bin_edges.size - 1:
            raise DomainError("counts length must equal number of edges minus one")
        if np.any(self.counts < 0):
            raise DomainError("counts must be non-negative")
        if self.total_detected != int(self.counts.sum()):
            raise DomainError("total_detected must equal the histogram sum")
        if self.total_detected > self.total_emitted:
            raise DomainError("more photons detected than emitted")

    @classmethod
    def empty(cls, f_rf: float, n_bins: int) -> "StrobeHistogram":
        return cls(np.linspace(0.0, 1.0 / f_rf, n_bins + 1), np.zeros(n_bins, dtype=np.int64))

    @property
    def period(self) -> float:
        return float(self.bin_edges[-1] - self.bin_edges[0])

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def merge(self, other: "StrobeHistogram") -> "StrobeHistogram":
        if not np.array_equal(self.bin_edges, other.bin_edges):
            raise DomainError("cannot merge histograms with different bin edges")
        return StrobeHistogram(
            self.bin_edges,
            self.counts + other.counts,
            self.total_emitted + other.total_emitted,
            self.total_detected + other.total_detected,
        )


@dataclass(frozen=True)
class StrobeConfig:
    n_pulses: int
    pulse_period: float
    lifetime: float
    seed: int = 0
    n_bins: int = 128
    excitation: str = "cw"
    jitter_sigma: float = 0.0
    chunk_size: int = 100_000
    n_workers: int = 1

    def __post_init__(self) -> None:
        if self.n_pulses < 0:
            raise DomainError("n_pulses must be non-negative")
        if not self.pulse_period > 0 or not self.lifetime > 0:
            raise DomainError("pulse_period and lifetime must be positive")
        if self.n_bins < 1 or self.chunk_size < 1 or self.n_workers < 1:
            raise DomainError("n_bins, chunk_size and n_workers must be >= 1")
        if self.excitation not in ("cw", "pulsed"):
            raise DomainError("excitation must be 'cw' or 'pulsed'")
        if self.jitter_sigma < 0:
            raise DomainError("jitter_sigma must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise DomainError("seed must fit in 64 unsigned bits")


@dataclass
class StrobeRun:
    times_ps: np.ndarray
    histogram: StrobeHistogram
    channels: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.channels is None:
            self.channels = np.full(self.times_ps.size, DETECTOR_CHANNEL, dtype=np.uint8)

    @property
    def acceptance(self) -> float:
        h = self.histogram
        return h.total_detected / h.total_emitted if h.total_emitted else 0.0

    def records(self) -> List[PhotonRecord]:
        return [PhotonRecord(int(c), int(t)) for c, t in zip(self.channels, self.times_ps)]


@dataclass(frozen=True)
class HarmonicReport:
    magnitudes: Dict[int, float]
    phases: Dict[int, float]
    dominant: str


def _band_fraction(centers, gamma: float, filt: BandpassFilter) -> np.ndarray:
    """Fraction of a unit-area Lorentzian (half-width gamma) transmitted by the filter."""
    centers = np.asarray(centers, dtype=float)
    if filt.edge_width == 0:
        upper = np.arctan((filt.omega_high - centers) / gamma)
        lower = np.arctan((filt.omega_low - centers) / gamma)
        return (upper - lower) / np.pi
    half = filt.edge_width / 2
    omega = np.linspace(filt.omega_low - half, filt.omega_high + half, _EDGE_SAMPLES)
    weight = filt.transmission(omega)
    detuning = omega[None, :] - centers.reshape(-1, 1)
    density = (gamma / np.pi) / (gamma**2 + detuning**2)
    return trapezoid(weight * density, omega, axis=1).reshape(centers.shape)


def acceptance_probability(emitter: ModulatedEmitter, filt: BandpassFilter, t) -> np.ndarray:
    return _band_fraction(instantaneous_center(emitter, t), emitter.gamma, filt)


def analytic_count_rate(emitter: ModulatedEmitter, filt: BandpassFilter, t):
    """Instantaneous lineshape integrated over the passband.

    For ideal edges this is the arctangent antiderivative of the Lorentzian.
    """
    rate = emitter.amplitude * np.pi * emitter.gamma * acceptance_probability(emitter, filt, t)
    return float(rate) if np.ndim(rate) == 0 else rate


def _bin_average(edges: np.ndarray, fn, subsamples: int) -> np.ndarray:
    widths = np.diff(edges)
    offsets = (np.arange(subsamples) + 0.5) / subsamples
    t = edges[:-1, None] + widths[:, None] * offsets[None, :]
    return fn(t).mean(axis=1)


def expected_histogram(
    emitter: ModulatedEmitter,
    filt: BandpassFilter,
    n_pulses: int,
    edges,
    subsamples: int = 64,
) -> np.ndarray:
    """Expected bin counts for emission phases uniform over the SAW period."""
    edges = np.asarray(edges, dtype=float)
    period = edges[-1] - edges[0]
    mean_acceptance = _bin_average(edges, lambda t: acceptance_probability(emitter, filt, t), subsamples)
    return n_pulses * mean_acceptance * np.diff(edges) / period


def fold_times(times, period: float, n_bins: int) -> np.ndarray:
    """Histogram of arrival times folded modulo one period."""
    phase = np.mod(np.asarray(times, dtype=float), period) / period
    index = np.minimum((phase * n_bins).astype(np.int64), n_bins - 1)
    return np.bincount(index, minlength=n_bins).astype(np.int64)


def _chunk_generator(seed: int, chunk_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk_index,))))


def _simulate_chunk(
    emitter: ModulatedEmitter,
    filt: BandpassFilter,
    config: StrobeConfig,
    chunk_index: int,
    first_pulse: int,
    n: int,
) -> Tuple[np.ndarray, np.ndarray]:
    rng = _chunk_generator(config.seed, chunk_index)
    # Draw order is fixed so a chunk's output depends only on (seed, chunk_index).
    slot = rng.uniform(0.0, config.pulse_period, n)
    delay = rng.exponential(config.lifetime, n)
    spread = rng.standard_cauchy(n)
    gate = rng.uniform(0.0, 1.0, n)

    excitation = (first_pulse + np.arange(n)) * config.pulse_period
    if config.excitation == "cw":
        excitation = excitation + slot
    t_emit = excitation + delay
    energy = instantaneous_center(emitter, t_emit) + emitter.gamma * spread
    if filt.edge_width == 0:
        accepted = (energy >= filt.omega_low) & (energy <= filt.omega_high)
    else:
        accepted = gate < filt.transmission(energy)

    t_detect = t_emit[accepted]
    if config.jitter_sigma > 0:
        t_detect = np.maximum(t_detect + rng.normal(0.0, config.jitter_sigma, t_detect.size), 0.0)
    counts = fold_times(t_detect, emitter.period, config.n_bins)
    return t_detect, counts


def simulate_photon_stream(
    emitter: ModulatedEmitter,
    filt: BandpassFilter,
    config: StrobeConfig,
) -> StrobeRun:
    """Monte Carlo of one emitted photon per excitation pulse.

    Each chunk of pulses draws from its own Philox substream, so the output
    does not depend on n_workers.
    """
    edges = np.linspace(0.0, emitter.period, config.n_bins + 1)
    histogram = StrobeHistogram(edges, np.zeros(config.n_bins, dtype=np.int64))
    if config.n_pulses == 0:
        return StrobeRun(np.zeros(0, dtype=np.int64), histogram)

    starts = list(range(0, config.n_pulses, config.chunk_size))
    jobs = (
        delayed(_simulate_chunk)(emitter, filt, config, k, start, min(config.chunk_size, config.n_pulses - start))
        for k, start in enumerate(starts)
    )
    parts = Parallel(n_jobs=config.n_workers)(jobs)

    times = []
    for k, (t_detect, counts) in enumerate(parts):
        n = min(config.chunk_size, config.n_pulses - starts[k])
        histogram = histogram.merge(StrobeHistogram(edges, counts, n, int(counts.sum())))
        times.append(t_detect)
    times_ps = np.rint(np.concatenate(times) * PS_PER_S).astype(np.int64)
    logger.info(
        "simulate_photon_stream: %d of %d photons detected (%.3g%%)",
        histogram.total_detected,
        histogram.total_emitted,
        100.0 * histogram.total_detected / histogram.total_emitted,
    )
    return StrobeRun(times_ps, histogram)


def harmonic_analysis(h: StrobeHistogram, f_rf: float) -> HarmonicReport:
    if h.counts.size < 8:
        raise DomainError("harmonic analysis needs at least 8 bins")
    if h.total_detected <= 0:
        raise NoSignalError("no detected photons")
    period = 1.0 / f_rf
    if not math.isclose(h.period, period, rel_tol=1e-9):
        raise DomainError("histogram does not span one SAW period")
    phase = 2 * np.pi * (h.bin_centers - h.bin_edges[0]) / period
    coefficients = {k: np.sum(h.counts * np.exp(-1j * k * phase)) for k in (0, 1, 2)}
    dc = coefficients[0].real
    magnitudes = {k: float(abs(coefficients[k]) / dc) for k in (1, 2)}
    phases = {k: float(np.angle(coefficients[k])) for k in (1, 2)}
    dominant = "f_rf" if magnitudes[1] >= magnitudes[2] else "2f_rf"
    return HarmonicReport(magnitudes, phases, dominant)


def fit_strobe(
    h: StrobeHistogram,
    emitter_guess: ModulatedEmitter,
    filt: BandpassFilter,
    subsamples: int = 8,
    max_iterations: int = 200,
    tolerance: float = 1e-10,
) -> FitReport:
    """Fit ΔE, phase0 and a count scale to a phase-folded histogram.

    The modulation ΔE·sin(θ + φ) is fitted as a·sinθ + b·cosθ, which stays
    well conditioned when ΔE is near zero.
    """
    if h.total_detected <= 0:
        raise NoSignalError("histogram is empty")
    counts = h.counts.astype(float)
    sigma = np.sqrt(np.maximum(counts, 1.0))
    edges = h.bin_edges
    omega0, gamma, f_rf = emitter_guess.omega0, emitter_guess.gamma, emitter_guess.f_rf

    def shape(a: float, b: float) -> np.ndarray:
        def fraction(t):
            theta = 2 * np.pi * f_rf * t
            return _band_fraction(omega0 + a * np.sin(theta) + b * np.cos(theta), gamma, filt)

        return _bin_average(edges, fraction, subsamples)

    a0 = emitter_guess.delta_e * np.cos(emitter_guess.phase0)
    b0 = emitter_guess.delta_e * np.sin(emitter_guess.phase0)
    start = shape(a0, b0)
    params = Parameters()
    params.add("a", value=a0)
    params.add("b", value=b0)
    params.add("scale", value=counts.sum() / max(start.sum(), np.finfo(float).tiny), min=0.0)

    def residual(p):
        v = p.valuesdict()
        return (v["scale"] * shape(v["a"], v["b"]) - counts) / sigma

    result = minimize(
        residual, params, method="leastsq", max_nfev=max_iterations * 4, xtol=tolerance, ftol=tolerance
    )
    if not result.success:
        raise ConvergenceError(f"strobe fit did not converge: {result.message}", last_iterate=result.params.valuesdict())

    v = result.params.valuesdict()
    a, b = v["a"], v["b"]
    delta_e = float(np.hypot(a, b))
    phase0 = float(np.mod(np.arctan2(b, a), 2 * np.pi))

    report = FitReport(
        model_name="strobe_rate",
        residual_norm=float(np.sqrt(result.chisqr)),
        n_points=int(counts.size),
        converged=True,
        input_digest=input_digest(edges, counts),
        config_snapshot={
            "omega_low": str(filt.omega_low),
            "omega_high": str(filt.omega_high),
            "edge_width": str(filt.edge_width),
            "subsamples": str(subsamples),
        },
    )
    err_delta, err_phase, resolved = _polar_errors(result, a, b, delta_e)
    if err_delta is None:
        report.warn("covariance unavailable; uncertainties set to zero")
    elif not resolved:
        report.warn("delta_e not resolved above noise; its uncertainty is the no-signal RMS")
    report.flags["delta_e_resolved"] = str(resolved).lower()
    report.add("delta_e", delta_e, err_delta or 0.0, "meV")
    report.add("phase0", phase0, err_phase or 0.0, "rad")
    report.add("scale", v["scale"], result.params["scale"].stderr, "counts")
    if counts.size >= 8 and math.isclose(h.period, 1.0 / f_rf, rel_tol=1e-9):
        harmonics = harmonic_analysis(h, f_rf)
        report.flags["harmonic_1"] = format(harmonics.magnitudes[1], ".9g")
        report.flags["harmonic_2"] = format(harmonics.magnitudes[2], ".9g")
        report.flags["dominant"] = harmonics.dominant
    return report


def _polar_errors(result, a: float, b: float, delta_e: float) -> Tuple[Optional[float], Optional[float], bool]:
    """Uncertainties of (ΔE, phase0) from the (a, b) covariance.

    Below twice the no-signal RMS radius sqrt(tr C), ΔE is Rayleigh-like and
    the linearised radial error collapses; that RMS radius is reported instead
    and the modulation is marked unresolved.
    """
    if result.covar is None:
        return None, None, delta_e > 0
    names = list(result.var_names)
    ia, ib = names.index("a"), names.index("b")
    cov = np.array(
        [[result.covar[ia, ia], result.covar[ia, ib]], [result.covar[ib, ia], result.covar[ib, ib]]]
    )
    noise_radius = float(np.sqrt(max(np.trace(cov), 0.0)))
    if delta_e == 0:
        return noise_radius, float(np.pi), False
    j_delta = np.array([a, b]) / delta_e
    j_phase = np.array([-b, a]) / delta_e**2
    err_delta = float(np.sqrt(max(j_delta @ cov @ j_delta, 0.0)))
    err_phase = min(float(np.sqrt(max(j_phase @ cov @ j_phase, 0.0))), float(np.pi))
    resolved = delta_e >= RESOLVED_RADII * noise_radius
    if not resolved:
        err_delta = max(err_delta, noise_radius)
    return err_delta, err_phase, resolved
