import numpy as np
import pytest

from sawopto import formats
from sawopto.cli import main
from sawopto.photonstats import simulate_antibunched_stream
from sawopto.report import parse_report
from sawopto.sweep import PowerSweepPoint
from sawopto.units import dbm_to_mw, mev_to_nm

TABLE_MODES = ["298.425e6,1300,5900", "299.425e6,3000,800", "300.975e6,1600,2300", "303.561e6,1700,6000"]


def _config(tmp_path, **values):
    path = tmp_path / "run.conf"
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return str(path)


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["bogus-command"]) == 1
    assert main(["strain", "--strain", "not-a-number"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_input_exits_two_without_report(tmp_path):
    report = tmp_path / "report.txt"
    code = main(["power-sweep", "--input", str(tmp_path / "absent.csv"), "--report", str(report)])
    assert code == 2
    assert not report.exists()


def test_header_only_timetags_exit_two(tmp_path, capsys):
    tags = tmp_path / "tags.csv"
    tags.write_text("channel,time_ps\n", encoding="utf-8")
    assert main(["g2", "--input", str(tags)]) == 2
    assert "no data rows" in capsys.readouterr().err


def test_unknown_config_key_exits_two(tmp_path):
    assert main(["strain", "--strain", "0.1", "--config", _config(tmp_path, colour="red")]) == 2


def test_strain_report_on_stdout(capsys):
    assert main(["strain", "--strain", "0.1"]) == 0
    report = parse_report(capsys.readouterr().out)
    assert report.model_name == "strain_conversion"
    assert report.value("shift") == pytest.approx(3.0)


def test_strain_at_power(capsys):
    assert main(["strain", "--power", "10"]) == 0
    report = parse_report(capsys.readouterr().out)
    assert report.value("strain") == pytest.approx(0.0376, abs=5e-5)


def test_seed_flag_overrides_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SAWOPTO_SEED", "7")
    out = tmp_path / "s.s1p"
    report = tmp_path / "r.txt"
    args = ["sim-s11", "--mode", TABLE_MODES[0], "--start", "296e6", "--stop", "306e6", "--points", "101"]
    assert main(args + ["--output", str(out), "--report", str(report)]) == 0
    assert formats.read_report(report).config_snapshot["seed"] == "7"
    assert main(args + ["--output", str(out), "--report", str(report), "--seed", "9"]) == 0
    assert formats.read_report(report).config_snapshot["seed"] == "9"


@pytest.mark.slow
def test_simulated_reflection_fits_back_to_four_modes(tmp_path):
    s1p = tmp_path / "device.s1p"
    args = ["sim-s11", "--start", "296e6", "--stop", "306e6", "--points", "10001", "--output", str(s1p)]
    for mode in TABLE_MODES:
        args += ["--mode", mode]
    assert main(args + ["--quiet", "--report", str(tmp_path / "sim.txt")]) == 0
    report_path = tmp_path / "fit.txt"
    curve_path = tmp_path / "fit.csv"
    assert main(["fit-s11", "--input", str(s1p), "--report", str(report_path), "--curve", str(curve_path)]) == 0
    report = formats.read_report(report_path)
    for k, text in enumerate(TABLE_MODES):
        f_n, q_i, q_e = (float(v) for v in text.split(","))
        assert report.value(f"mode{k}.f_n") == pytest.approx(f_n, rel=1e-5)
        assert report.value(f"mode{k}.q_i") == pytest.approx(q_i, rel=1e-3)
    assert "mode4.f_n" not in report.parameters
    assert set(formats.read_curve(curve_path)) == {"f_hz", "s11_re", "s11_im", "model_re", "model_im"}


def test_unmodulated_spectrum_is_a_lorentzian(tmp_path):
    out = tmp_path / "spectrum.csv"
    args = ["sim-spectrum", "--omega0", "1600", "--gamma", "0.05", "--delta-e", "0", "--amplitude", "100"]
    args += ["--start", "1599", "--stop", "1601", "--points", "401", "--output", str(out)]
    assert main(args + ["--report", str(tmp_path / "r.txt")]) == 0
    spectrum = formats.parse_spectrum_csv(out)
    x = spectrum.energies - 1600.0
    np.testing.assert_allclose(spectrum.counts, 100 * 0.0025 / (0.0025 + x**2), rtol=1e-10)


@pytest.mark.slow
def test_simulated_spectrum_fits_back(tmp_path):
    out = tmp_path / "spectrum.csv"
    args = ["sim-spectrum", "--omega0", "1600", "--delta-e", "0.46", "--amplitude", "1e4", "--background", "20"]
    args += ["--start", "1598.5", "--stop", "1601.5", "--points", "601", "--output", str(out), "--poisson"]
    assert main(args + ["--seed", "3", "--report", str(tmp_path / "sim.txt")]) == 0
    report_path = tmp_path / "fit.txt"
    assert main(["fit-spectrum", "--input", str(out), "--report", str(report_path), "--curve", str(tmp_path / "c.csv")]) == 0
    report = formats.read_report(report_path)
    assert report.flags["modulated"] == "true"
    assert report.value("delta_e") == pytest.approx(0.46, rel=0.05)
    assert set(formats.read_curve(tmp_path / "c.csv")) == {"energy_mev", "counts", "model"}


def test_power_sweep_recovers_slope(tmp_path):
    sweep = tmp_path / "sweep.csv"
    formats.write_sweep_csv([PowerSweepPoint(p, 0.9865 * np.sqrt(dbm_to_mw(p))) for p in range(-10, 5)], sweep)
    report_path = tmp_path / "report.txt"
    curve_path = tmp_path / "curve.csv"
    assert main(["power-sweep", "--input", str(sweep), "--report", str(report_path), "--curve", str(curve_path)]) == 0
    report = formats.read_report(report_path)
    assert report.value("slope") == pytest.approx(0.9865, rel=1e-3)
    assert report.flags["preferred"] == "sqrt"
    assert "sqrt_model_mev" in formats.read_curve(curve_path)


@pytest.mark.slow
def test_strobe_simulation_and_fit(tmp_path):
    conf = _config(tmp_path, strobe_pulses=100000, strobe_bins=64, strobe_pulse_period_ps=3333.33333333, strobe_lifetime_ps=1000)
    hist = tmp_path / "hist.csv"
    emitter = ["--omega0", "1600", "--gamma", "1", "--f-rf", "3e8", "--filter", "1600.5,1603.5", "--config", conf]
    sim = ["sim-strobe", "--delta-e", "1", "--output", str(hist), "--timetags", str(tmp_path / "tags.bin")]
    assert main(sim + emitter + ["--report", str(tmp_path / "sim.txt")]) == 0
    sim_report = formats.read_report(tmp_path / "sim.txt")
    assert sim_report.flags["dominant"] == "f_rf"
    assert 0.0 < sim_report.value("acceptance") < 1.0
    assert (tmp_path / "tags.bin").stat().st_size % 9 == 0

    fit_path = tmp_path / "fit.txt"
    assert main(["fit-strobe", "--delta-e", "0.8", "--input", str(hist), "--report", str(fit_path)] + emitter) == 0
    assert formats.read_report(fit_path).value("delta_e") == pytest.approx(1.0, rel=0.1)
    folded = tmp_path / "folded.txt"
    args = ["fit-strobe", "--delta-e", "0.8", "--input", str(tmp_path / "tags.bin"), "--timetags-input"]
    assert main(args + ["--report", str(folded)] + emitter) == 0
    assert formats.read_report(folded).value("delta_e") == pytest.approx(1.0, rel=0.1)


@pytest.mark.slow
def test_g2_from_binary_timetags(tmp_path):
    tags = tmp_path / "tags.bin"
    formats.write_timetags(simulate_antibunched_stream(2e7, 2000.0, 0.01, seed=21), tags)
    conf = _config(tmp_path, g2_window_ps=20000, g2_bin_width_ps=200)
    report_path = tmp_path / "g2.txt"
    assert main(["g2", "--input", str(tags), "--tau0", "1500", "--config", conf, "--report", str(report_path)]) == 0
    report = formats.read_report(report_path)
    assert report.model_name == "antibunching"
    assert report.value("g2_0") < 0.15
    assert report.flags["single_emitter"] == "true"


def test_lifetime_from_histogram(tmp_path):
    edges = np.arange(401) * 50.0
    centers = 0.5 * (edges[:-1] + edges[1:])
    counts = np.rint(10.0 + np.where(centers >= 5000.0, 1e4 * np.exp(-(centers - 5000.0) / 2000.0), 0.0))
    hist = tmp_path / "decay.csv"
    formats.write_histogram_csv(edges, counts, hist)
    report_path = tmp_path / "tau.txt"
    assert main(["lifetime", "--input", str(hist), "--report", str(report_path)]) == 0
    assert formats.read_report(report_path).value("tau") == pytest.approx(2000.0, rel=0.01)


def test_filter_unit_flag_overrides_config(tmp_path):
    conf = _config(tmp_path, strobe_pulses=20000, strobe_bins=32, filter_unit="nm", seed=4)
    nm_edges = ",".join(repr(float(mev_to_nm(e))) for e in (1600.5, 1603.5))
    emitter = ["sim-strobe", "--omega0", "1600", "--gamma", "1", "--delta-e", "1", "--config", conf]
    mev_hist, nm_hist = tmp_path / "mev.csv", tmp_path / "nm.csv"
    report = tmp_path / "r.txt"
    args = emitter + ["--filter", "1600.5,1603.5", "--filter-unit", "meV", "--output", str(mev_hist)]
    assert main(args + ["--report", str(report)]) == 0
    assert formats.read_report(report).config_snapshot["filter_unit"] == "mev"
    assert main(emitter + ["--filter", nm_edges, "--output", str(nm_hist), "--report", str(report)]) == 0
    assert formats.read_report(report).config_snapshot["filter_unit"] == "nm"
    assert mev_hist.read_text() == nm_hist.read_text()
    assert main(emitter + ["--filter", "1600.5,1603.5", "--filter-unit", "ev", "--output", str(mev_hist)]) == 1


def test_failed_report_write_leaves_no_outputs(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise OSError("disk full")

    monkeypatch.setattr(formats, "emit_report", boom)
    args = ["sim-s11", "--mode", TABLE_MODES[0], "--start", "296e6", "--stop", "306e6", "--points", "101"]
    out = tmp_path / "s.s1p"
    assert main(args + ["--output", str(out), "--report", str(tmp_path / "r.txt")]) == 2
    assert list(tmp_path.iterdir()) == []
