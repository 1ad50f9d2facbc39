"""Subcommand runners.

Each runner reads its inputs, computes everything, and only then returns the
files to write, so a failing run leaves no partial outputs.
"""
from __future__ import annotations

import logging
from argparse import Namespace
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from sawopto import formats
from sawopto.config import RunConfig
from sawopto.emitter import (
    ModulatedEmitter,
    PLSpectrum,
    fit_modulated_lineshape,
    fit_sweep_map,
    time_averaged_spectrum,
)
from sawopto.errors import DataFormatError, DomainError, NoSignalError
from sawopto.photonstats import DecayHistogram, correlate, decay_from_timetags, fit_g2, fit_lifetime, pulsed_g2
from sawopto.report import FitReport, input_digest
from sawopto.resonator import (
    MirrorBand,
    ResonatorMode,
    S11Spectrum,
    find_resonances,
    fit_s11,
    s11_model,
    synthesize_s11,
)
from sawopto.strobe import (
    BandpassFilter,
    StrobeConfig,
    StrobeHistogram,
    expected_histogram,
    fit_strobe,
    fold_times,
    harmonic_analysis,
    simulate_photon_stream,
)
from sawopto.sweep import StrainModel, coupling_from_slope, fit_sqrtp, shift_to_strain, strain_at_power, strain_to_shift
from sawopto.units import PS_PER_S, mev_to_nm, nm_to_mev

logger = logging.getLogger(__name__)

# Q used for a guessed frequency with no detected dip nearby.
DEFAULT_Q_GUESS = 2000.0


@dataclass
class Outcome:
    report: Optional[FitReport] = None
    curve: Optional[pd.DataFrame] = None
    outputs: List[Tuple[Path, Callable[[Path], None]]] = field(default_factory=list)


def parse_floats(text: Optional[str], name: str, count: Optional[int] = None) -> List[float]:
    if text is None:
        return []
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise DomainError(f"--{name}: expected comma-separated numbers, got {text!r}") from None
    if count is not None and len(values) != count:
        raise DomainError(f"--{name}: expected {count} values, got {len(values)}")
    return values


def _require(value, name: str):
    if value is None:
        raise DomainError(f"--{name} is required")
    return value


def _filter(args: Namespace, cfg: RunConfig) -> BandpassFilter:
    low, high = parse_floats(_require(args.filter, "filter"), "filter", 2)
    if cfg.filter_unit == "nm":
        # Longer wavelength is lower energy.
        low, high = sorted(float(v) for v in nm_to_mev([low, high]))
    return BandpassFilter(low, high, cfg.filter_edge_width_mev)


def _emitter(args: Namespace) -> ModulatedEmitter:
    return ModulatedEmitter(
        omega0=_require(args.omega0, "omega0"),
        gamma=args.gamma,
        delta_e=args.delta_e,
        f_rf=args.f_rf,
        phase0=args.phase0,
        amplitude=args.amplitude,
    )


def _grid(args: Namespace) -> np.ndarray:
    if not args.stop > args.start or args.points < 2:
        raise DomainError("grid needs stop > start and at least two points")
    return np.linspace(args.start, args.stop, args.points)


def _seeded_modes(spectrum: S11Spectrum, guesses: Sequence[float], cfg: RunConfig) -> List[ResonatorMode]:
    detected = find_resonances(spectrum, prominence=cfg.s11_dip_prominence)
    modes = []
    for f_guess in guesses:
        near = [m for m in detected if abs(m.f_n - f_guess) <= 3 * m.linewidth]
        if near:
            best = min(near, key=lambda m: abs(m.f_n - f_guess))
            modes.append(ResonatorMode(f_guess, best.q_i, best.q_e))
        else:
            logger.warning("no dip detected near %.9g Hz; starting from Q = %g", f_guess, DEFAULT_Q_GUESS)
            modes.append(ResonatorMode(f_guess, DEFAULT_Q_GUESS, DEFAULT_Q_GUESS))
    return modes


def run_fit_s11(args: Namespace, cfg: RunConfig) -> Outcome:
    spectrum = formats.read_s11(_require(args.input, "input"))
    band = MirrorBand(*parse_floats(args.band, "band", 2)) if args.band else None
    if band is not None:
        spectrum = spectrum.restrict(band)
        if len(spectrum) < 2:
            raise NoSignalError("no data inside the mirror band")
    guesses = parse_floats(args.guess, "guess")
    initial = _seeded_modes(spectrum, guesses, cfg) if guesses else None
    if initial is None and band is not None:
        initial = find_resonances(spectrum, prominence=cfg.s11_dip_prominence, band=band)
    fit = fit_s11(
        spectrum,
        initial,
        window_linewidths=cfg.s11_window_linewidths,
        max_iterations=cfg.s11_max_iterations,
        tolerance=cfg.s11_tolerance,
        background=cfg.s11_background,
        min_improvement=cfg.s11_min_improvement,
        prominence=cfg.s11_dip_prominence,
        coupling_tol=cfg.coupling_tolerance,
    )
    model = np.ones(len(spectrum), dtype=complex)
    for mode in fit.modes:
        model *= s11_model(spectrum.frequencies, mode)
    curve = pd.DataFrame(
        {
            "f_hz": spectrum.frequencies,
            "s11_re": spectrum.values.real,
            "s11_im": spectrum.values.imag,
            "model_re": model.real,
            "model_im": model.imag,
        }
    )
    return Outcome(fit.report, curve)


def run_sim_s11(args: Namespace, cfg: RunConfig) -> Outcome:
    if not args.mode:
        raise DomainError("--mode F,QI,QE is required at least once")
    modes = [ResonatorMode(*parse_floats(text, "mode", 3)) for text in args.mode]
    spectrum = synthesize_s11(modes, _grid(args), noise_sigma=args.noise, seed=cfg.seed)
    output = Path(_require(args.output, "output"))
    report = FitReport(
        model_name="s11_synthesis",
        n_points=len(spectrum),
        input_digest=input_digest(spectrum.frequencies, spectrum.values),
        config_snapshot=cfg.snapshot(),
    )
    for k, mode in enumerate(modes):
        report.add(f"mode{k}.f_n", mode.f_n, 0.0, "Hz")
        report.add(f"mode{k}.q_i", mode.q_i)
        report.add(f"mode{k}.q_e", mode.q_e)
    report.flags["noise_sigma"] = str(args.noise)
    return Outcome(report, outputs=[(output, lambda p: formats.write_touchstone(spectrum, p))])


def run_sim_spectrum(args: Namespace, cfg: RunConfig) -> Outcome:
    emitter = _emitter(args)
    spectrum = time_averaged_spectrum(emitter, _grid(args), n_phase=cfg.quadrature_samples)
    counts = spectrum.counts + args.background
    if args.poisson:
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        counts = rng.poisson(counts).astype(float)
    result = PLSpectrum(spectrum.energies, counts, spectrum.truncated)
    output = Path(_require(args.output, "output"))
    report = FitReport(
        model_name="spectrum_synthesis",
        n_points=len(result),
        input_digest=input_digest(result.energies, result.counts),
        config_snapshot=cfg.snapshot(),
    )
    report.add("delta_e", emitter.delta_e, 0.0, "meV")
    report.add("gamma", emitter.gamma, 0.0, "meV")
    if spectrum.truncated:
        report.warn("energy grid does not span omega0 ± (ΔE + 10Γ)")
    return Outcome(
        report, outputs=[(output, lambda p: formats.write_spectrum_csv(result, p, unit=cfg.spectrum_unit))]
    )


def _lineshape_guess(args: Namespace, spectrum: PLSpectrum) -> ModulatedEmitter:
    weights = spectrum.counts - spectrum.counts.min()
    total = weights.sum()
    if total <= 0:
        raise NoSignalError("no peak: spectrum is flat")
    centroid = float(np.sum(weights * spectrum.energies) / total)
    spread = float(np.sqrt(np.sum(weights * (spectrum.energies - centroid) ** 2) / total))
    omega0 = args.omega0 if args.omega0 is not None else centroid
    delta_e = args.delta_e if args.delta_e else spread
    return ModulatedEmitter(omega0, args.gamma, delta_e, args.f_rf, amplitude=float(spectrum.counts.max()))


def run_fit_spectrum(args: Namespace, cfg: RunConfig) -> Outcome:
    path = _require(args.input, "input")
    options = dict(
        background=cfg.lineshape_background,
        model_margin=cfg.lineshape_model_margin,
        n_phase=cfg.quadrature_samples,
    )
    if args.sweep_map:
        smap = formats.parse_sweep_map_csv(path)
        guess = _lineshape_guess(args, smap.frame(0))
        table = fit_sweep_map(smap, guess, recenter=args.recenter, **options)
        if table.empty:
            raise NoSignalError("no frame of the sweep map could be fitted")
        report = FitReport(
            model_name="sweep_map",
            n_points=int(smap.counts.size),
            input_digest=input_digest(smap.energies, smap.drive_frequencies, smap.counts),
            config_snapshot=cfg.snapshot(),
        )
        report.flags["frames_fitted"] = str(len(table))
        report.flags["frames_total"] = str(smap.drive_frequencies.size)
        return Outcome(report, table)

    spectrum = formats.parse_spectrum_csv(path)
    fit = fit_modulated_lineshape(spectrum, _lineshape_guess(args, spectrum), **options)
    e = fit.emitter
    model = time_averaged_spectrum(e, spectrum.energies, cfg.quadrature_samples, check_convergence=False).counts
    model = model + fit.background + fit.slope * (spectrum.energies - spectrum.energies[0])
    fit.report.config_snapshot = cfg.snapshot()
    curve = pd.DataFrame({"energy_mev": spectrum.energies, "counts": spectrum.counts, "model": model})
    if cfg.spectrum_unit == "nm":
        curve.insert(1, "wavelength_nm", mev_to_nm(spectrum.energies))
    return Outcome(fit.report, curve)


def _strobe_config(cfg: RunConfig) -> StrobeConfig:
    return StrobeConfig(
        n_pulses=cfg.strobe_pulses,
        pulse_period=cfg.strobe_pulse_period_ps / PS_PER_S,
        lifetime=cfg.strobe_lifetime_ps / PS_PER_S,
        seed=cfg.seed,
        n_bins=cfg.strobe_bins,
        excitation=cfg.strobe_excitation,
        jitter_sigma=cfg.strobe_jitter_ps / PS_PER_S,
        chunk_size=cfg.strobe_chunk_pulses,
        n_workers=cfg.threads,
    )


def run_sim_strobe(args: Namespace, cfg: RunConfig) -> Outcome:
    emitter = _emitter(args)
    filt = _filter(args, cfg)
    run = simulate_photon_stream(emitter, filt, _strobe_config(cfg))
    h = run.histogram
    if h.total_detected == 0:
        raise NoSignalError("no photons passed the filter")
    edges_ps = h.bin_edges * PS_PER_S
    report = FitReport(
        model_name="strobe_simulation",
        n_points=int(h.counts.size),
        input_digest=input_digest(h.bin_edges, h.counts),
        config_snapshot=cfg.snapshot(),
    )
    report.add("acceptance", run.acceptance)
    report.flags["total_emitted"] = str(h.total_emitted)
    report.flags["total_detected"] = str(h.total_detected)
    harmonics = harmonic_analysis(h, emitter.f_rf)
    report.flags["harmonic_1"] = format(harmonics.magnitudes[1], ".9g")
    report.flags["harmonic_2"] = format(harmonics.magnitudes[2], ".9g")
    report.flags["dominant"] = harmonics.dominant
    if filt.is_symmetric_about(emitter.omega0):
        report.flags["filter_symmetric"] = "true"

    expected = expected_histogram(emitter, filt, h.total_emitted, h.bin_edges)
    curve = pd.DataFrame({"phase_time_ps": h.bin_centers * PS_PER_S, "counts": h.counts, "expected": expected})
    outputs = [(Path(_require(args.output, "output")), lambda p: formats.write_histogram_csv(edges_ps, h.counts, p))]
    if args.timetags:
        outputs.append((Path(args.timetags), lambda p: formats.write_timetags(run.records(), p)))
    return Outcome(report, curve, outputs)


def run_fit_strobe(args: Namespace, cfg: RunConfig) -> Outcome:
    guess = _emitter(args)
    filt = _filter(args, cfg)
    path = _require(args.input, "input")
    if args.timetags_input:
        records = formats.parse_timetags(path)
        times = np.array([r.time for r in records if r.channel == args.channel], dtype=float) / PS_PER_S
        if times.size == 0:
            raise NoSignalError(f"channel {args.channel} has no detections")
        counts = fold_times(times, guess.period, cfg.strobe_bins)
        edges = np.linspace(0.0, guess.period, cfg.strobe_bins + 1)
    else:
        edges_ps, raw = formats.parse_histogram_csv(path)
        if np.any(raw != np.round(raw)):
            raise DataFormatError("strobe histogram counts must be integers", path)
        edges, counts = edges_ps / PS_PER_S, raw.astype(np.int64)
    total = int(np.sum(counts))
    h = StrobeHistogram(edges, counts, total_emitted=total, total_detected=total)
    report = fit_strobe(h, guess, filt)
    report.config_snapshot = cfg.snapshot()
    fitted = guess.with_(delta_e=report.value("delta_e"), phase0=report.value("phase0"))
    # expected_histogram spreads one pulse over the period; fit_strobe scales per-bin acceptance.
    model = report.value("scale") * expected_histogram(fitted, filt, 1, edges) * (h.period / np.diff(edges))
    curve = pd.DataFrame({"phase_time_ps": h.bin_centers * PS_PER_S, "counts": h.counts, "model": model})
    return Outcome(report, curve)


def run_g2(args: Namespace, cfg: RunConfig) -> Outcome:
    records = formats.parse_timetags(_require(args.input, "input"))
    if not records:
        raise NoSignalError("time-tag file has no records")
    ch_a, ch_b = (int(v) for v in parse_floats(args.channels, "channels", 2))
    hist = correlate(
        records,
        ch_a,
        ch_b,
        window=cfg.g2_window_ps,
        bin_width=cfg.g2_bin_width_ps,
        wing_fraction=cfg.g2_wing_fraction,
        tolerance=cfg.g2_normalization_tolerance,
    )
    if args.pulsed_period:
        report = pulsed_g2(hist, args.pulsed_period)
        report.warnings.extend(hist.warnings)
    else:
        report = fit_g2(hist, tau0_guess=args.tau0)
    report.config_snapshot = cfg.snapshot()
    curve = pd.DataFrame({"tau_ps": hist.tau_centers, "counts": hist.counts, "g2": hist.g2, "g2_err": hist.g2_err})
    return Outcome(report, curve)


def run_lifetime(args: Namespace, cfg: RunConfig) -> Outcome:
    path = _require(args.input, "input")
    if args.timetags_input:
        records = formats.parse_timetags(path)
        sync, signal = (int(v) for v in parse_floats(args.channels, "channels", 2))
        decay = decay_from_timetags(records, sync, signal, args.bin_width, args.bins)
    else:
        edges, counts = formats.parse_histogram_csv(path)
        decay = DecayHistogram(edges, counts)
    report = fit_lifetime(decay, start_offset=cfg.lifetime_start_offset)
    report.config_snapshot = cfg.snapshot()
    curve = pd.DataFrame({"t_ps": decay.bin_centers, "counts": decay.counts})
    return Outcome(report, curve)


def run_power_sweep(args: Namespace, cfg: RunConfig) -> Outcome:
    points = formats.parse_sweep_csv(_require(args.input, "input"))
    if not points:
        raise NoSignalError("sweep file has no points")
    cut = args.cut
    if cut not in ("auto", "none"):
        cut = parse_floats(cut, "cut", 1)[0]
    fit = fit_sqrtp(
        points,
        saturation_cut=None if cut == "none" else cut,
        margin=cfg.saturation_margin,
        min_plateau=cfg.saturation_min_plateau,
    )
    report = fit.report
    report.config_snapshot = cfg.snapshot()
    model = StrainModel(cfg.deformation_potential_mev_per_percent, cfg.strain_ref_percent, cfg.strain_ref_dbm)
    if fit.slope > 0:
        report.add("implied_coupling", coupling_from_slope(fit.slope, model), 0.0, "meV/%")
    ordered = sorted(points, key=lambda p: p.p_dbm)
    p_mw = np.array([p.p_mw for p in ordered])
    curve = pd.DataFrame(
        {
            "p_dbm": [p.p_dbm for p in ordered],
            "delta_e_mev": [p.delta_e for p in ordered],
            "sqrt_model_mev": fit.slope * np.sqrt(p_mw),
            "linear_model_mev": fit.linear_coefficient * p_mw,
        }
    )
    return Outcome(report, curve)


def run_strain(args: Namespace, cfg: RunConfig) -> Outcome:
    model = StrainModel(cfg.deformation_potential_mev_per_percent, cfg.strain_ref_percent, cfg.strain_ref_dbm)
    report = FitReport(model_name="strain_conversion", config_snapshot=cfg.snapshot())
    chosen = [v is not None for v in (args.strain, args.shift, args.power)]
    if sum(chosen) != 1:
        raise DomainError("give exactly one of --strain, --shift or --power")
    if args.strain is not None:
        report.add("strain", args.strain, 0.0, "%")
        report.add("shift", strain_to_shift(model, args.strain), 0.0, "meV")
    elif args.shift is not None:
        report.add("shift", args.shift, 0.0, "meV")
        report.add("strain", shift_to_strain(model, args.shift), 0.0, "%")
    else:
        strain = strain_at_power(model, args.power)
        report.add("power", args.power, 0.0, "dBm")
        report.add("strain", strain, 0.0, "%")
        report.add("shift", strain_to_shift(model, strain), 0.0, "meV")
    report.add("d_coupling", model.d_coupling, 0.0, "meV/%")
    return Outcome(report)


RUNNERS = {
    "fit-s11": run_fit_s11,
    "sim-s11": run_sim_s11,
    "sim-spectrum": run_sim_spectrum,
    "fit-spectrum": run_fit_spectrum,
    "sim-strobe": run_sim_strobe,
    "fit-strobe": run_fit_strobe,
    "g2": run_g2,
    "lifetime": run_lifetime,
    "power-sweep": run_power_sweep,
    "strain": run_strain,
}
