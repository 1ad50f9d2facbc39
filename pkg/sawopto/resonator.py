"""One-port SAW resonator reflection: model, synthesis, fitting and geometry."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from lmfit import Parameters, minimize
from scipy.signal import find_peaks, peak_widths

from sawopto.errors import ConvergenceError, DomainError, InsufficientDataError, NoSignalError
from sawopto.report import FitReport, input_digest

logger = logging.getLogger(__name__)

# Smallest window that still constrains three parameters per mode.
MIN_WINDOW_POINTS = 8
MAX_WINDOW_GROWTH = 2.0


@dataclass(frozen=True)
class ResonatorMode:
    f_n: float
    q_i: float
    q_e: float

    def __post_init__(self) -> None:
        for name in ("f_n", "q_i", "q_e"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be positive, got {value}")

    @property
    def q_loaded(self) -> float:
        return 1.0 / (1.0 / self.q_i + 1.0 / self.q_e)

    @property
    def linewidth(self) -> float:
        return self.f_n / self.q_loaded


@dataclass(frozen=True)
class MirrorBand:
    f_low: float
    f_high: float

    def __post_init__(self) -> None:
        if not self.f_low < self.f_high:
            raise DomainError("mirror band requires f_low < f_high")

    def contains(self, f):
        f = np.asarray(f, dtype=float)
        return (f >= self.f_low) & (f <= self.f_high)


@dataclass
class S11Spectrum:
    frequencies: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.frequencies.ndim != 1 or self.frequencies.shape != self.values.shape:
            raise DomainError("frequencies and values must be 1-D arrays of equal length")
        if self.frequencies.size < 2:
            raise DomainError("a spectrum needs at least two points")
        if np.any(np.diff(self.frequencies) <= 0):
            raise DomainError("frequencies must be strictly increasing")

    def __len__(self) -> int:
        return self.frequencies.size

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def phase(self) -> np.ndarray:
        return np.unwrap(np.angle(self.values))

    def restrict(self, band: MirrorBand) -> "S11Spectrum":
        mask = band.contains(self.frequencies)
        return S11Spectrum(self.frequencies[mask], self.values[mask])


@dataclass(frozen=True)
class CavityGeometry:
    d: float
    w: float
    r_s: float

    def __post_init__(self) -> None:
        if self.d < 0 or self.w <= 0:
            raise DomainError("cavity geometry requires d >= 0 and w > 0")
        if not 0 < self.r_s < 1:
            raise DomainError("single-period reflectivity must lie in (0, 1)")

    @property
    def mirror_penetration(self) -> float:
        return self.w / self.r_s


class Coupling(str, Enum):
    UNDERCOUPLED = "undercoupled"
    CRITICALLY_COUPLED = "critically_coupled"
    OVERCOUPLED = "overcoupled"


@dataclass
class S11Fit:
    report: FitReport
    modes: List[ResonatorMode] = field(default_factory=list)


def _reflection(f, f_n, q_i, q_e):
    detuning = 2j * q_i * (f - f_n) / f
    return ((q_e - q_i) / q_e + detuning) / ((q_e + q_i) / q_e + detuning)


def s11_model(f, mode: ResonatorMode):
    """Reflection coefficient of a single one-port mode.

    The detuning is normalised by the drive frequency ``f`` rather than
    ``f_n``; the two agree to O(1/q) near resonance.
    """
    f_arr = np.asarray(f, dtype=float)
    if np.any(f_arr <= 0) or not np.all(np.isfinite(f_arr)):
        raise DomainError("frequency must be positive")
    out = _reflection(f_arr, mode.f_n, mode.q_i, mode.q_e)
    return complex(out) if out.ndim == 0 else out


def _background(f, f_ref, a: complex, b: complex):
    # b is per MHz of offset from the first grid point.
    return a + b * (f - f_ref) / 1e6


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise DomainError("frequency grid must be 1-D with at least two points")
    if np.any(np.diff(grid) <= 0):
        raise DomainError("frequency grid must be strictly increasing")
    if grid[0] <= 0:
        raise DomainError("frequency grid must be positive")
    return grid


def synthesize_s11(
    modes: Sequence[ResonatorMode],
    grid,
    noise_sigma: float = 0.0,
    seed: Optional[int] = None,
    background: Optional[Tuple[complex, complex]] = None,
) -> S11Spectrum:
    grid = _check_grid(grid)
    if noise_sigma < 0:
        raise DomainError("noise_sigma must be non-negative")

    centers = [m.f_n for m in modes]
    if len(set(centers)) != len(centers):
        logger.warning("synthesize_s11: modes share identical f_n values; their responses multiply")

    values = np.ones(grid.size, dtype=complex)
    for mode in modes:
        values *= _reflection(grid, mode.f_n, mode.q_i, mode.q_e)
    if background is not None:
        values *= _background(grid, grid[0], complex(background[0]), complex(background[1]))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        values = values + noise_sigma * (rng.standard_normal(grid.size) + 1j * rng.standard_normal(grid.size))
    return S11Spectrum(grid, values)


def find_resonances(
    spectrum: S11Spectrum,
    prominence: float = 0.05,
    band: Optional[MirrorBand] = None,
) -> List[ResonatorMode]:
    """Seed modes from dips in |S11|.

    q_loaded comes from the dip width at half prominence and the split into
    q_i and q_e from the dip depth relative to the neighbouring baseline.
    """
    f = spectrum.frequencies
    inverted = -spectrum.magnitude
    peaks, props = find_peaks(inverted, prominence=prominence)
    if peaks.size == 0:
        return []
    _, _, left, right = peak_widths(
        inverted,
        peaks,
        rel_height=0.5,
        prominence_data=(props["prominences"], props["left_bases"], props["right_bases"]),
    )
    index = np.arange(f.size)
    step = float(np.min(np.diff(f)))
    modes: List[ResonatorMode] = []
    for k, peak in enumerate(peaks):
        f0 = float(f[peak])
        if band is not None and not band.contains(f0):
            continue
        width = max(float(np.interp(right[k], index, f) - np.interp(left[k], index, f)), step)
        q_loaded = f0 / width
        shoulder = 0.5 * (spectrum.values[props["left_bases"][k]] + spectrum.values[props["right_bases"][k]])
        dip = spectrum.values[peak] / shoulder if abs(shoulder) > 0 else 0j
        depth = min(abs(dip), 0.999)
        # ratio is min(q_i, q_e) / max(q_i, q_e); a sign flip at resonance means overcoupled.
        ratio = (1.0 - depth) / (1.0 + depth)
        low = q_loaded * (1.0 + ratio)
        if dip.real < 0:
            modes.append(ResonatorMode(f0, low / ratio, low))
        else:
            modes.append(ResonatorMode(f0, low, low / ratio))
    logger.debug("find_resonances: %d dip(s) above prominence %.3g", len(modes), prominence)
    return modes


def classify_coupling(mode: ResonatorMode, tol: float = 1e-3) -> Coupling:
    if abs(mode.q_e - mode.q_i) <= tol * (mode.q_e + mode.q_i):
        return Coupling.CRITICALLY_COUPLED
    if mode.q_e > mode.q_i:
        return Coupling.UNDERCOUPLED
    return Coupling.OVERCOUPLED


def cavity_length(geom: CavityGeometry) -> float:
    """Total acoustic length L = d + 2 w / r_s in the geometry's length unit."""
    if geom.r_s == 0:
        raise DomainError("single-period reflectivity must be non-zero")
    return geom.d + 2.0 * geom.mirror_penetration


def _mode_params(params: Parameters, prefix: str, mode: ResonatorMode, f_lo: float, f_hi: float) -> None:
    params.add(f"{prefix}f_n", value=mode.f_n, min=f_lo, max=f_hi)
    params.add(f"{prefix}q_i", value=mode.q_i, min=1.0)
    params.add(f"{prefix}q_e", value=mode.q_e, min=1.0)


def _mode_from(values: Dict[str, float], prefix: str) -> ResonatorMode:
    return ResonatorMode(values[f"{prefix}f_n"], values[f"{prefix}q_i"], values[f"{prefix}q_e"])


def _stack(residual: np.ndarray) -> np.ndarray:
    return np.concatenate([residual.real, residual.imag])


def _product(f, modes: Sequence[ResonatorMode], skip: Optional[int] = None) -> np.ndarray:
    out = np.ones(np.shape(f), dtype=complex)
    for k, mode in enumerate(modes):
        if k != skip:
            out *= _reflection(f, mode.f_n, mode.q_i, mode.q_e)
    return out


def _window(f: np.ndarray, anchor: ResonatorMode, current: ResonatorMode, linewidths: float) -> np.ndarray:
    """Fit window centred on the starting guess, never on the running estimate.

    The linewidth unit follows the estimate, clipped to between one and
    MAX_WINDOW_GROWTH guessed linewidths.
    """
    width = min(max(anchor.linewidth, current.linewidth), MAX_WINDOW_GROWTH * anchor.linewidth)
    half_width = linewidths * width
    return np.abs(f - anchor.f_n) <= half_width


def _run(residual, params: Parameters, args, max_iterations: int, tolerance: float):
    n_vary = sum(1 for p in params.values() if p.vary)
    result = minimize(
        residual,
        params,
        args=args,
        method="leastsq",
        max_nfev=max_iterations * (n_vary + 1),
        xtol=tolerance,
        ftol=tolerance,
    )
    if not result.success:
        raise ConvergenceError(
            f"fit did not converge: {result.message}", last_iterate=result.params.valuesdict()
        )
    return result


def fit_s11(
    spectrum: S11Spectrum,
    initial: Optional[Sequence[ResonatorMode]] = None,
    window_linewidths: float = 5.0,
    max_iterations: int = 200,
    tolerance: float = 1e-8,
    background: bool = False,
    min_improvement: float = 0.5,
    prominence: float = 0.05,
    coupling_tol: float = 1e-3,
    sweeps: int = 2,
) -> S11Fit:
    f = spectrum.frequencies
    data = spectrum.values

    modes = list(initial) if initial else find_resonances(spectrum, prominence=prominence)
    if not modes:
        raise NoSignalError("no resonance found")
    for mode in modes:
        if not f[0] <= mode.f_n <= f[-1]:
            raise DomainError(f"initial f_n {mode.f_n:.9g} Hz lies outside the measured range")

    # Starting background level from the spectrum edges.
    level0 = complex(0.5 * (data[0] + data[-1])) if background else 1.0 + 0j

    anchors = list(modes)
    # Per-mode passes with the other modes divided out.
    for sweep in range(sweeps):
        for k in range(len(modes)):
            window = _window(f, anchors[k], modes[k], window_linewidths)
            if window.sum() < MIN_WINDOW_POINTS:
                raise InsufficientDataError(f"mode {k}: only {window.sum()} points in fit window")
            fw = f[window]
            if sweep == 0:
                local = data[window]
                level = max(1.0, float(np.abs(local.mean())))
                if np.max(np.abs(local - local.mean())) <= 1e-12 * level:
                    raise NoSignalError(f"no resonance found near {modes[k].f_n:.9g} Hz")
            target = data[window] / (level0 * _product(fw, modes, skip=k))

            params = Parameters()
            _mode_params(params, "", modes[k], float(fw[0]), float(fw[-1]))

            def local_residual(p, x, y):
                v = p.valuesdict()
                return _stack(_reflection(x, v["f_n"], v["q_i"], v["q_e"]) - y)

            result = _run(local_residual, params, (fw, target), max_iterations, tolerance)
            modes[k] = _mode_from(result.params.valuesdict(), "")

    # Joint refinement over the union of all windows.
    windows = [_window(f, a, m, window_linewidths) for a, m in zip(anchors, modes)]
    union = np.logical_or.reduce(windows)
    fu, du = f[union], data[union]
    params = Parameters()
    for k, mode in enumerate(modes):
        fk = f[windows[k]]
        _mode_params(params, f"m{k}_", mode, float(fk[0]), float(fk[-1]))
    if background:
        params.add("bg_a_re", value=level0.real)
        params.add("bg_a_im", value=level0.imag)
        params.add("bg_b_re", value=0.0)
        params.add("bg_b_im", value=0.0)

    def joint_model(v: Dict[str, float], x: np.ndarray) -> np.ndarray:
        out = np.ones(x.size, dtype=complex)
        for k in range(len(modes)):
            out *= _reflection(x, v[f"m{k}_f_n"], v[f"m{k}_q_i"], v[f"m{k}_q_e"])
        if background:
            out *= _background(x, f[0], v["bg_a_re"] + 1j * v["bg_a_im"], v["bg_b_re"] + 1j * v["bg_b_im"])
        return out

    def joint_residual(p, x, y):
        return _stack(joint_model(p.valuesdict(), x) - y)

    result = _run(joint_residual, params, (fu, du), max_iterations, tolerance)
    best = result.params.valuesdict()
    fitted = [_mode_from(best, f"m{k}_") for k in range(len(modes))]

    report = FitReport(
        model_name="s11_reflection",
        residual_norm=float(np.sqrt(result.chisqr)),
        n_points=int(fu.size),
        converged=True,
        input_digest=input_digest(f, data),
        config_snapshot={
            "window_linewidths": str(window_linewidths),
            "max_iterations": str(max_iterations),
            "tolerance": str(tolerance),
            "background": str(background),
        },
    )

    full = joint_model(best, fu)
    for k, mode in enumerate(fitted):
        in_window = windows[k][union]
        fit_norm = np.linalg.norm(full[in_window] - du[in_window])
        without = full[in_window] / _reflection(fu[in_window], mode.f_n, mode.q_i, mode.q_e)
        bare_norm = np.linalg.norm(without - du[in_window])
        improvement = 1.0 - fit_norm / bare_norm if bare_norm > 0 else 0.0
        if improvement < min_improvement:
            raise NoSignalError(
                f"no resonance found near {mode.f_n:.9g} Hz (residual improvement {improvement:.3g})"
            )
        for name, unit in (("f_n", "Hz"), ("q_i", ""), ("q_e", "")):
            report.add(f"mode{k}.{name}", best[f"m{k}_{name}"], result.params[f"m{k}_{name}"].stderr, unit)
        report.flags[f"mode{k}.coupling"] = classify_coupling(mode, coupling_tol).value
    if background:
        for name in ("bg_a_re", "bg_a_im", "bg_b_re", "bg_b_im"):
            report.add(f"background.{name[3:]}", best[name], result.params[name].stderr)
    logger.info("fit_s11: %d mode(s), residual norm %.3g", len(fitted), report.residual_norm)
    return S11Fit(report=report, modes=fitted)
