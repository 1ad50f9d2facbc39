import logging

import numpy as np
import pytest

from sawopto.errors import DomainError, NoSignalError
from sawopto.resonator import (
    MAX_WINDOW_GROWTH,
    CavityGeometry,
    Coupling,
    MirrorBand,
    ResonatorMode,
    S11Spectrum,
    _window,
    cavity_length,
    classify_coupling,
    find_resonances,
    fit_s11,
    s11_model,
    synthesize_s11,
)


def test_critical_coupling_nulls_reflection():
    mode = ResonatorMode(300e6, 2000.0, 2000.0)
    assert abs(s11_model(mode.f_n, mode)) < 1e-12


def test_resonance_reflection_matches_closed_form(rng):
    f_n = rng.uniform(1e6, 1e10, 1000)
    q_i = rng.uniform(10.0, 1e5, 1000)
    q_e = rng.uniform(10.0, 1e5, 1000)
    for f, qi, qe in zip(f_n, q_i, q_e):
        value = s11_model(f, ResonatorMode(f, qi, qe))
        assert value.imag == pytest.approx(0.0, abs=1e-12)
        assert value.real == pytest.approx((qe - qi) / (qe + qi), abs=1e-12)


def test_table_mode_on_resonance():
    value = s11_model(298.425e6, ResonatorMode(298.425e6, 1300.0, 5900.0))
    assert value.real == pytest.approx(4600.0 / 7200.0, rel=1e-12)
    assert isinstance(value, complex)


def test_far_detuned_reflection_is_total():
    mode = ResonatorMode(300e6, 1300.0, 5900.0)
    assert abs(s11_model(3e9, mode)) == pytest.approx(1.0, abs=1e-3)


def test_magnitude_bounded(rng):
    f = rng.uniform(1e5, 1e9, 500)
    for qi, qe in rng.uniform(1.0, 1e4, (20, 2)):
        mode = ResonatorMode(2e8, qi, qe)
        assert np.all(np.abs(s11_model(f, mode)) <= 1.0 + 1e-15)


def test_magnitude_nearly_symmetric_about_resonance():
    mode = ResonatorMode(300e6, 1300.0, 5900.0)
    delta = 50e3
    upper = abs(s11_model(mode.f_n + delta, mode))
    lower = abs(s11_model(mode.f_n - delta, mode))
    assert upper == pytest.approx(lower, abs=10 * delta / mode.f_n)


@pytest.mark.parametrize("f", [0.0, -1.0])
def test_model_rejects_nonpositive_frequency(f):
    with pytest.raises(DomainError):
        s11_model(f, ResonatorMode(300e6, 1000.0, 1000.0))


def test_mode_rejects_nonpositive_q():
    with pytest.raises(DomainError):
        ResonatorMode(300e6, 0.0, 1000.0)


def test_single_mode_synthesis_equals_model(s11_grid):
    mode = ResonatorMode(300.975e6, 1600.0, 2300.0)
    spectrum = synthesize_s11([mode], s11_grid)
    np.testing.assert_allclose(spectrum.values, s11_model(s11_grid, mode), rtol=0, atol=1e-15)


def test_zero_modes_give_unit_spectrum(s11_grid):
    spectrum = synthesize_s11([], s11_grid)
    np.testing.assert_array_equal(spectrum.values, np.ones(s11_grid.size))


def test_table_modes_give_four_dips(table_modes, s11_grid):
    spectrum = synthesize_s11(table_modes, s11_grid)
    found = find_resonances(spectrum, prominence=0.05)
    assert len(found) == 4
    for detected, true in zip(found, table_modes):
        assert 298e6 <= detected.f_n <= 304e6
        assert detected.f_n == pytest.approx(true.f_n, abs=20e3)


def test_dip_seeds_recognise_overcoupled_mode(s11_grid):
    spectrum = synthesize_s11([ResonatorMode(299.425e6, 3000.0, 800.0)], s11_grid)
    (seed,) = find_resonances(spectrum)
    assert classify_coupling(seed) is Coupling.OVERCOUPLED


def test_duplicate_frequencies_only_warn(s11_grid, caplog):
    mode = ResonatorMode(300e6, 1000.0, 2000.0)
    with caplog.at_level(logging.WARNING):
        spectrum = synthesize_s11([mode, mode], s11_grid)
    assert "identical" in caplog.text
    assert len(spectrum) == s11_grid.size


def test_noise_is_seeded(s11_grid, table_modes):
    first = synthesize_s11(table_modes, s11_grid, noise_sigma=0.01, seed=5)
    second = synthesize_s11(table_modes, s11_grid, noise_sigma=0.01, seed=5)
    np.testing.assert_array_equal(first.values, second.values)


def _perturbed(modes):
    signs = [1, -1, -1, 1]
    return [
        ResonatorMode(m.f_n + s * 100e3, m.q_i * (1 + 0.3 * s), m.q_e * (1 - 0.3 * s))
        for m, s in zip(modes, signs)
    ]


@pytest.mark.slow
def test_fit_recovers_table_modes_noiseless(table_modes, s11_grid):
    spectrum = synthesize_s11(table_modes, s11_grid)
    fit = fit_s11(spectrum, _perturbed(table_modes))
    assert fit.report.converged
    for k, (got, true) in enumerate(zip(fit.modes, table_modes)):
        assert got.f_n == pytest.approx(true.f_n, rel=1e-3)
        assert got.q_i == pytest.approx(true.q_i, rel=1e-3)
        assert got.q_e == pytest.approx(true.q_e, rel=1e-3)
        assert fit.report.value(f"mode{k}.q_i") == pytest.approx(got.q_i)
    assert fit.report.flags["mode0.coupling"] == "undercoupled"
    assert fit.report.flags["mode1.coupling"] == "overcoupled"


@pytest.mark.slow
def test_fit_with_noise_recovers_intrinsic_q(table_modes, s11_grid):
    spectrum = synthesize_s11(table_modes, s11_grid, noise_sigma=0.01, seed=11)
    fit = fit_s11(spectrum, _perturbed(table_modes))
    for got, true in zip(fit.modes[1:], table_modes[1:]):
        assert got.q_i == pytest.approx(true.q_i, rel=0.05)
    assert all(est.stderr > 0 for est in fit.report.parameters.values())


def test_fit_without_guesses_uses_dip_detection(s11_grid):
    mode = ResonatorMode(300.975e6, 1600.0, 2300.0)
    fit = fit_s11(synthesize_s11([mode], s11_grid))
    assert fit.modes[0].q_e == pytest.approx(2300.0, rel=1e-3)


def test_fit_of_featureless_spectrum_reports_no_resonance(s11_grid):
    flat = S11Spectrum(s11_grid, np.ones(s11_grid.size))
    with pytest.raises(NoSignalError, match="no resonance"):
        fit_s11(flat, [ResonatorMode(300e6, 1000.0, 1000.0)])
    with pytest.raises(NoSignalError):
        fit_s11(flat)


def test_guess_outside_range_is_rejected(s11_grid):
    spectrum = synthesize_s11([ResonatorMode(300e6, 1000.0, 2000.0)], s11_grid)
    with pytest.raises(DomainError):
        fit_s11(spectrum, [ResonatorMode(400e6, 1000.0, 2000.0)])


def test_fit_window_stays_centred_on_the_guess(s11_grid):
    guess = ResonatorMode(300e6, 1300.0, 5900.0)
    drifted = ResonatorMode(300.8e6, 1300.0, 5900.0)
    window = _window(s11_grid, guess, drifted, 5.0)
    assert s11_grid[window].mean() == pytest.approx(300e6, abs=1e3)
    broadened = ResonatorMode(300e6, 10.0, 10.0)
    wide = s11_grid[_window(s11_grid, guess, broadened, 5.0)]
    limit = 5.0 * MAX_WINDOW_GROWTH * guess.linewidth
    assert np.max(np.abs(wide - 300e6)) <= limit
    assert np.max(np.abs(wide - 300e6)) > 0.99 * limit


def test_fit_with_affine_background(s11_grid):
    mode = ResonatorMode(300.975e6, 1600.0, 2300.0)
    spectrum = synthesize_s11([mode], s11_grid, background=(0.9 + 0.1j, 0.002 - 0.001j))
    fit = fit_s11(spectrum, [ResonatorMode(300.9e6, 1400.0, 2600.0)], background=True)
    assert fit.modes[0].f_n == pytest.approx(mode.f_n, rel=1e-5)
    assert fit.report.value("background.a_re") == pytest.approx(0.9, abs=1e-3)


@pytest.mark.parametrize(
    "q_i, q_e, expected",
    [
        (1900.0, 3700.0, Coupling.UNDERCOUPLED),
        (1000.0, 1000.0, Coupling.CRITICALLY_COUPLED),
        (5000.0, 100.0, Coupling.OVERCOUPLED),
    ],
)
def test_classify_coupling(q_i, q_e, expected):
    assert classify_coupling(ResonatorMode(300e6, q_i, q_e)) is expected
    assert classify_coupling(ResonatorMode(300e6, 7 * q_i, 7 * q_e)) is expected


def test_mirror_band_restricts_spectrum(table_modes, s11_grid):
    band = MirrorBand(298e6, 301.5e6)
    spectrum = synthesize_s11(table_modes, s11_grid).restrict(band)
    assert spectrum.frequencies[0] >= 298e6 and spectrum.frequencies[-1] <= 301.5e6
    found = find_resonances(synthesize_s11(table_modes, s11_grid), band=band)
    assert len(found) == 3


@pytest.mark.parametrize(
    "d, w, r_s, length",
    [(0.0, 10.0, 0.02, 1000.0), (2340.0, 2.6, 0.02, 2600.0)],
)
def test_cavity_length(d, w, r_s, length):
    assert cavity_length(CavityGeometry(d, w, r_s)) == pytest.approx(length, rel=1e-12)


def test_geometry_validation():
    with pytest.raises(DomainError):
        CavityGeometry(10.0, 10.0, 0.0)
    with pytest.raises(DomainError):
        CavityGeometry(10.0, 10.0, 1.0)
