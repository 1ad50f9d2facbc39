"""SAW-modulated emitter lineshapes, fine-structure doublets and lineshape fitting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from lmfit import Parameters, minimize
from scipy.signal import find_peaks

from sawopto.errors import ConvergenceError, DomainError, NoSignalError
from sawopto.report import FitReport, input_digest

logger = logging.getLogger(__name__)

DEFAULT_PHASE_SAMPLES = 512
QUADRATURE_TOLERANCE = 1e-8
# Rows evaluated per block when averaging over phase.
_BLOCK_ROWS = 2048


@dataclass(frozen=True)
class ModulatedEmitter:
    omega0: float
    gamma: float
    delta_e: float
    f_rf: float
    phase0: float = 0.0
    amplitude: float = 1.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise DomainError("gamma must be positive")
        if self.delta_e < 0:
            raise DomainError("delta_e must be non-negative")
        if not self.f_rf > 0:
            raise DomainError("f_rf must be positive")
        if self.amplitude < 0:
            raise DomainError("amplitude must be non-negative")

    @property
    def period(self) -> float:
        return 1.0 / self.f_rf

    def with_(self, **changes) -> "ModulatedEmitter":
        return replace(self, **changes)


@dataclass(frozen=True)
class FineStructureDoublet:
    center: float
    delta_fss: float
    gamma: float
    delta_e: float
    f_rf: float
    phase0: float = 0.0
    ratio: float = 1.0
    amplitude: float = 1.0
    gamma_v: Optional[float] = None

    def __post_init__(self) -> None:
        if self.delta_fss < 0:
            raise DomainError("delta_fss must be non-negative")
        if not self.ratio > 0:
            raise DomainError("V/H intensity ratio must be positive")
        if self.gamma_v is not None and not self.gamma_v > 0:
            raise DomainError("gamma_v must be positive")

    def transitions(self) -> Tuple[ModulatedEmitter, ModulatedEmitter]:
        """(H, V) transitions; H is the lower-energy line."""
        h = ModulatedEmitter(
            self.center - self.delta_fss / 2, self.gamma, self.delta_e, self.f_rf, self.phase0, self.amplitude
        )
        v = ModulatedEmitter(
            self.center + self.delta_fss / 2,
            self.gamma_v if self.gamma_v is not None else self.gamma,
            self.delta_e,
            self.f_rf,
            self.phase0,
            self.amplitude * self.ratio,
        )
        return h, v


@dataclass
class PLSpectrum:
    energies: np.ndarray
    counts: np.ndarray
    truncated: bool = False

    def __post_init__(self) -> None:
        self.energies = np.asarray(self.energies, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        if self.energies.ndim != 1 or self.energies.shape != self.counts.shape:
            raise DomainError("energies and counts must be 1-D arrays of equal length")
        if np.any(np.diff(self.energies) <= 0):
            raise DomainError("energies must be strictly increasing")
        if np.any(self.counts < 0):
            raise DomainError("counts must be non-negative")

    def __len__(self) -> int:
        return self.energies.size


@dataclass
class SweepMap:
    """PL spectra recorded while stepping the SAW drive frequency."""

    energies: np.ndarray
    drive_frequencies: np.ndarray
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.energies = np.asarray(self.energies, dtype=float)
        self.drive_frequencies = np.asarray(self.drive_frequencies, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        if self.counts.shape != (self.energies.size, self.drive_frequencies.size):
            raise DomainError("counts must have shape (n_energies, n_frequencies)")

    def frame(self, index: int) -> PLSpectrum:
        return PLSpectrum(self.energies, self.counts[:, index])


class MixingState(str, Enum):
    SEPARATED = "separated"
    PARTIALLY_MIXED = "partially_mixed"
    FULLY_MIXED = "fully_mixed"


@dataclass(frozen=True)
class MixingReport:
    state: MixingState
    gap: float
    overlap: float


@dataclass
class LineshapeFit:
    report: FitReport
    emitter: ModulatedEmitter
    modulated: bool
    background: float = 0.0
    slope: float = 0.0
    warnings: List[str] = field(default_factory=list)


def instantaneous_center(emitter: ModulatedEmitter, t):
    return emitter.omega0 + emitter.delta_e * np.sin(2 * np.pi * emitter.f_rf * np.asarray(t) + emitter.phase0)


def instantaneous_lineshape(emitter: ModulatedEmitter, omega, t):
    """Lorentzian of half-width gamma at the modulated centre, peak = amplitude."""
    detuning = np.asarray(omega, dtype=float) - instantaneous_center(emitter, t)
    g2 = emitter.gamma**2
    return emitter.amplitude * g2 / (g2 + detuning**2)


def _phase_average(omega, omega0, gamma, delta_e, amplitude, n_phase) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    # Uniform nodes over one period; the periodic trapezoid rule is their mean.
    centers = omega0 + delta_e * np.sin(2 * np.pi * np.arange(n_phase) / n_phase)
    g2 = gamma**2
    out = np.empty(omega.size)
    flat = omega.ravel()
    for start in range(0, flat.size, _BLOCK_ROWS):
        block = flat[start : start + _BLOCK_ROWS, None] - centers[None, :]
        out[start : start + _BLOCK_ROWS] = np.mean(g2 / (g2 + block**2), axis=1)
    return amplitude * out.reshape(omega.shape)


def _span_ok(emitter: ModulatedEmitter, grid: np.ndarray) -> bool:
    reach = emitter.delta_e + 10 * emitter.gamma
    return grid[0] <= emitter.omega0 - reach and grid[-1] >= emitter.omega0 + reach


def time_averaged_spectrum(
    emitter: ModulatedEmitter,
    grid,
    n_phase: int = DEFAULT_PHASE_SAMPLES,
    check_convergence: bool = True,
) -> PLSpectrum:
    """Steady-state spectrum: the lineshape averaged over one SAW period.

    The full-period average does not depend on phase0.
    """
    grid = np.asarray(grid, dtype=float)
    counts = _phase_average(grid, emitter.omega0, emitter.gamma, emitter.delta_e, emitter.amplitude, n_phase)
    truncated = not _span_ok(emitter, grid)
    if truncated:
        logger.warning(
            "energy grid [%.6g, %.6g] meV does not span omega0 ± (ΔE + 10Γ); spectrum is truncated",
            grid[0],
            grid[-1],
        )
    if check_convergence and emitter.delta_e > 0:
        refined = _phase_average(
            grid, emitter.omega0, emitter.gamma, emitter.delta_e, emitter.amplitude, 2 * n_phase
        )
        scale = max(float(np.max(np.abs(refined))), np.finfo(float).tiny)
        change = float(np.max(np.abs(refined - counts))) / scale
        if change > QUADRATURE_TOLERANCE:
            logger.warning("phase quadrature not converged: doubling samples changed result by %.3g", change)
    return PLSpectrum(grid, counts, truncated=truncated)


def find_maxima(spectrum: PLSpectrum, rel_prominence: float = 0.01) -> np.ndarray:
    """Energies of local maxima whose prominence exceeds a fraction of the peak."""
    counts = spectrum.counts
    # Pad so maxima on the grid edge are not reported.
    padded = np.concatenate([[counts[0]], counts, [counts[-1]]])
    peaks, _ = find_peaks(padded, prominence=rel_prominence * float(np.max(counts)))
    return spectrum.energies[peaks - 1]


def doublet_spectrum(d: FineStructureDoublet, grid, n_phase: int = DEFAULT_PHASE_SAMPLES) -> PLSpectrum:
    h, v = d.transitions()
    first = time_averaged_spectrum(h, grid, n_phase, check_convergence=False)
    second = time_averaged_spectrum(v, grid, n_phase, check_convergence=False)
    return PLSpectrum(first.energies, first.counts + second.counts, truncated=first.truncated or second.truncated)


def lorentzian_overlap(gamma_a: float, gamma_b: float, gap: float) -> float:
    """Normalised overlap integral of two Lorentzians with half-widths gamma_a, gamma_b."""
    total = gamma_a + gamma_b
    return float(2 * total * np.sqrt(gamma_a * gamma_b) / (total**2 + gap**2))


def classify_mixing(d: FineStructureDoublet) -> MixingReport:
    h, v = d.transitions()
    gamma = 0.5 * (h.gamma + v.gamma)
    if d.delta_fss == 0:
        # The two transitions coincide at every instant.
        return MixingReport(MixingState.FULLY_MIXED, 0.0, 1.0)
    gap = d.delta_fss - 2 * d.delta_e
    overlap = lorentzian_overlap(h.gamma, v.gamma, gap)
    if abs(gap) <= gamma:
        state = MixingState.FULLY_MIXED
    elif abs(gap) <= 3 * gamma:
        state = MixingState.PARTIALLY_MIXED
    else:
        state = MixingState.SEPARATED
    return MixingReport(state, float(gap), overlap)


def _lineshape_params(
    initial: ModulatedEmitter, energies: np.ndarray, counts: np.ndarray, modulated: bool, linear: bool
) -> Parameters:
    params = Parameters()
    params.add("omega0", value=initial.omega0, min=float(energies[0]), max=float(energies[-1]))
    params.add("gamma", value=initial.gamma, min=1e-9)
    if modulated:
        # d(spectrum)/d(ΔE) vanishes at ΔE = 0, so never start there.
        params.add("delta_e", value=max(initial.delta_e, initial.gamma), min=0.0)
    else:
        params.add("delta_e", value=0.0, vary=False)
    params.add("amplitude", value=max(initial.amplitude, np.finfo(float).eps), min=0.0)
    params.add("offset", value=float(np.min(counts)))
    params.add("slope", value=0.0, vary=linear)
    return params


def fit_modulated_lineshape(
    spectrum: PLSpectrum,
    initial: ModulatedEmitter,
    background: str = "constant",
    model_margin: float = 0.05,
    poisson: bool = True,
    n_phase: int = DEFAULT_PHASE_SAMPLES,
    max_iterations: int = 200,
    tolerance: float = 1e-10,
) -> LineshapeFit:
    """Fit the time-averaged modulated Lorentzian plus background.

    Both the free-ΔE model and the ΔE = 0 model are fitted; the modulated
    model is kept only when it lowers chi-square by more than model_margin.
    """
    if background not in ("constant", "linear"):
        raise DomainError("background must be 'constant' or 'linear'")
    energies, counts = spectrum.energies, spectrum.counts
    if len(spectrum) < 6:
        raise DomainError("spectrum too short to fit")
    peak = float(np.max(counts))
    if np.ptp(counts) <= 1e-12 * max(peak, 1.0):
        raise NoSignalError("no peak: spectrum is flat")

    sigma = np.sqrt(np.maximum(counts, 1.0)) if poisson else np.ones_like(counts)
    ref = float(energies[0])
    linear = background == "linear"

    def residual(p, x, y):
        v = p.valuesdict()
        model = _phase_average(x, v["omega0"], v["gamma"], v["delta_e"], v["amplitude"], n_phase)
        model = model + v["offset"] + v["slope"] * (x - ref)
        return (model - y) / sigma

    results = {}
    for modulated in (False, True):
        params = _lineshape_params(initial, energies, counts, modulated, linear)
        n_vary = sum(1 for p in params.values() if p.vary)
        result = minimize(
            residual,
            params,
            args=(energies, counts),
            method="leastsq",
            max_nfev=max_iterations * (n_vary + 1),
            xtol=tolerance,
            ftol=tolerance,
        )
        if not result.success:
            logger.warning("%s branch did not converge: %s", "modulated" if modulated else "unmodulated", result.message)
            failed = result
            continue
        results[modulated] = result
    if not results:
        raise ConvergenceError(
            f"lineshape fit did not converge: {failed.message}", last_iterate=failed.params.valuesdict()
        )

    chi_flat = results[False].chisqr if False in results else np.inf
    chi_mod = results[True].chisqr if True in results else np.inf
    floor = 1e-20 * float(np.sum((counts / sigma) ** 2))
    modulated = chi_flat > floor and chi_mod < (1.0 - model_margin) * chi_flat
    best = results[modulated]
    v = best.params.valuesdict()

    emitter = replace(
        initial,
        omega0=v["omega0"],
        gamma=v["gamma"],
        delta_e=v["delta_e"] if modulated else 0.0,
        amplitude=v["amplitude"],
    )
    report = FitReport(
        model_name="modulated_lorentzian" if modulated else "lorentzian",
        residual_norm=float(np.sqrt(best.chisqr)),
        n_points=len(spectrum),
        converged=True,
        input_digest=input_digest(energies, counts),
        config_snapshot={
            "background": background,
            "model_margin": str(model_margin),
            "poisson": str(poisson),
            "n_phase": str(n_phase),
        },
    )
    names = [("omega0", "meV"), ("gamma", "meV"), ("delta_e", "meV"), ("amplitude", "counts"), ("offset", "counts")]
    if linear:
        names.append(("slope", "counts/meV"))
    for name, unit in names:
        if name == "delta_e" and not modulated:
            report.add(name, 0.0, 0.0, unit)
            continue
        report.add(name, v[name], best.params[name].stderr, unit)
    report.flags["modulated"] = str(modulated).lower()
    report.flags["residual_norm_modulated"] = format(float(np.sqrt(chi_mod)), ".9g")
    report.flags["residual_norm_unmodulated"] = format(float(np.sqrt(chi_flat)), ".9g")
    report.flags["peak_separation_mev"] = format(2 * emitter.delta_e, ".9g")
    if spectrum.truncated or not _span_ok(emitter, energies):
        report.warn("spectrum does not cover omega0 ± (ΔE + 10Γ); fit may be biased")
    logger.info("fit_modulated_lineshape: %s, ΔE = %.6g meV", report.model_name, emitter.delta_e)
    return LineshapeFit(report, emitter, modulated, background=v["offset"], slope=v["slope"])


def fit_sweep_map(
    smap: SweepMap,
    initial: ModulatedEmitter,
    recenter: bool = False,
    **fit_options,
) -> pd.DataFrame:
    """Fit every drive-frequency frame; returns ΔE(f_drive) as a table.

    With ``recenter`` each frame starts from its own intensity centroid,
    which absorbs slow spectral jitter between frames.
    """
    rows = []
    for k, f_drive in enumerate(smap.drive_frequencies):
        frame = smap.frame(k)
        guess = replace(initial, f_rf=float(f_drive)) if f_drive > 0 else initial
        if recenter:
            weights = frame.counts - frame.counts.min()
            if weights.sum() > 0:
                guess = replace(guess, omega0=float(np.sum(weights * frame.energies) / weights.sum()))
        try:
            fit = fit_modulated_lineshape(frame, guess, **fit_options)
        except (NoSignalError, ConvergenceError) as exc:
            logger.warning("frame at %.9g Hz skipped: %s", f_drive, exc)
            continue
        rows.append(
            {
                "f_drive_hz": float(f_drive),
                "omega0_mev": fit.emitter.omega0,
                "delta_e_mev": fit.emitter.delta_e,
                "delta_e_err_mev": fit.report.stderr("delta_e"),
                "modulated": fit.modulated,
            }
        )
    return pd.DataFrame(rows, columns=["f_drive_hz", "omega0_mev", "delta_e_mev", "delta_e_err_mev", "modulated"])
