import numpy as np
import pytest

from sawopto.errors import DomainError, NoSignalError
from sawopto.photonstats import (
    CorrelationHistogram,
    DecayHistogram,
    PhotonRecord,
    correlate,
    decay_from_timetags,
    fit_g2,
    fit_lifetime,
    pulsed_g2,
    simulate_antibunched_stream,
    simulate_poisson_stream,
)

SECOND_PS = 1e12


def _records(*pairs):
    return [PhotonRecord(c, t) for c, t in pairs]


def _two_poisson(rate, seed_a=1, seed_b=2):
    return simulate_poisson_stream(rate, 1.0, channel=0, seed=seed_a) + simulate_poisson_stream(
        rate, 1.0, channel=1, seed=seed_b
    )


def test_record_validation():
    with pytest.raises(DomainError):
        PhotonRecord(0, -1)
    with pytest.raises(DomainError):
        PhotonRecord(-1, 0)


def test_poisson_streams_are_flat():
    hist = correlate(_two_poisson(1e4), 0, 1, window=1.5e6, bin_width=1e6, duration=SECOND_PS)
    assert hist.counts.size == 3
    assert hist.normalization == pytest.approx(100.0, rel=0.05)
    assert np.all(np.abs(hist.counts - hist.normalization) < 4 * np.sqrt(hist.normalization))


def test_bins_are_centred_on_zero():
    hist = correlate(_records((0, 1000), (1, 1000)), 0, 1, window=3000, bin_width=1000, duration=1e6)
    np.testing.assert_allclose(hist.tau_centers, [-3000, -2000, -1000, 0, 1000, 2000, 3000])
    assert hist.bin_width == pytest.approx(1000.0)
    assert hist.counts[3] == 1


def test_swapping_channels_mirrors_histogram():
    records = _two_poisson(2e4, 5, 6)
    forward = correlate(records, 0, 1, window=5e6, bin_width=2.5e5, duration=SECOND_PS)
    backward = correlate(records, 1, 0, window=5e6, bin_width=2.5e5, duration=SECOND_PS)
    np.testing.assert_array_equal(forward.counts, backward.counts[::-1])


def test_correlation_is_unchanged_by_a_common_time_offset():
    records = _two_poisson(2e4, 7, 8)
    shifted = [PhotonRecord(r.channel, r.time + 123_456_789) for r in records]
    for duration in (SECOND_PS, None):
        base = correlate(records, 0, 1, window=5e6, bin_width=2.5e5, duration=duration)
        moved = correlate(shifted, 0, 1, window=5e6, bin_width=2.5e5, duration=duration)
        np.testing.assert_array_equal(moved.counts, base.counts)
        assert moved.normalization == base.normalization


def test_half_bin_delays_round_away_from_zero():
    records = _records((0, 10_000), (1, 10_500), (1, 9_500))
    hist = correlate(records, 0, 1, window=2000, bin_width=1000)
    np.testing.assert_array_equal(hist.counts, [0, 1, 0, 1, 0])


def test_autocorrelation_excludes_self_pairs():
    records = _records((0, 0), (0, 1000), (0, 5000))
    hist = correlate(records, 0, 0, window=6000, bin_width=1000)
    expected = np.zeros(13, dtype=int)
    for delay in (1000, 4000, 5000):
        expected[6 + delay // 1000] = 1
        expected[6 - delay // 1000] = 1
    np.testing.assert_array_equal(hist.counts, expected)


def test_correlate_guards():
    with pytest.raises(NoSignalError):
        correlate(_records((0, 10)), 0, 1, window=2000, bin_width=100)
    with pytest.raises(DomainError):
        correlate(_records((0, 10), (1, 20)), 0, 1, window=100, bin_width=100)
    with pytest.raises(DomainError):
        correlate(_records((0, 10), (1, 20)), 0, 1, window=100, bin_width=0)


def test_far_wing_cross_check(caplog):
    records = _two_poisson(3e4, 11, 12)
    consistent = correlate(records, 0, 1, window=1e7, bin_width=1e6)
    assert consistent.warnings == []
    skewed = correlate(records, 0, 1, window=1e7, bin_width=1e6, duration=2 * SECOND_PS)
    assert len(skewed.warnings) == 1
    assert "far-wing" in skewed.warnings[0]
    assert "far-wing" in caplog.text


def test_merge_adds_counts_and_normalization():
    edges = np.arange(-2, 2) * 10.0 + 5.0
    a = CorrelationHistogram(edges, [1, 2, 3], 2.0)
    b = CorrelationHistogram(edges, [0, 1, 0], 1.0)
    merged = a.merge(b)
    np.testing.assert_array_equal(merged.counts, [1, 3, 3])
    assert merged.normalization == 3.0
    with pytest.raises(DomainError):
        a.merge(CorrelationHistogram(edges * 2, [0, 0, 0], 1.0))


def _antibunching_histogram(g2_0, tau0, norm=1e4, bin_width=100.0, window=20_000.0, rng=None):
    n = int(window // bin_width)
    edges = (np.arange(-n, n + 2) - 0.5) * bin_width
    centers = 0.5 * (edges[:-1] + edges[1:])
    g = 1.0 - (1.0 - g2_0) * np.exp(-np.abs(centers) / tau0)
    counts = np.rint(norm * g) if rng is None else rng.poisson(norm * g)
    return CorrelationHistogram(edges, counts, norm)


def test_fit_g2_recovers_synthetic_dip():
    report = fit_g2(_antibunching_histogram(0.1, 2000.0), tau0_guess=1500.0)
    assert report.model_name == "antibunching"
    assert report.value("g2_0") == pytest.approx(0.1, abs=0.005)
    assert report.value("tau0") == pytest.approx(2000.0, rel=0.01)
    assert report.flags["single_emitter"] == "true"


def test_fit_g2_estimates_its_own_starting_point():
    report = fit_g2(_antibunching_histogram(0.6, 1000.0))
    assert report.value("tau0") == pytest.approx(1000.0, rel=0.01)
    assert report.flags["single_emitter"] == "false"


def test_fit_g2_needs_five_lifetimes_of_span():
    with pytest.raises(DomainError):
        fit_g2(_antibunching_histogram(0.1, 2000.0), tau0_guess=5000.0)


def test_fit_g2_at_the_single_emitter_anchor(rng):
    report = fit_g2(_antibunching_histogram(0.22, 2000.0, rng=rng), tau0_guess=1500.0)
    assert report.value("g2_0") == pytest.approx(0.22, abs=0.03)
    assert report.flags["single_emitter"] == "true"


def test_fit_g2_perfect_antibunching_under_noise(rng):
    report = fit_g2(_antibunching_histogram(0.0, 2000.0, rng=rng), tau0_guess=1500.0)
    assert report.value("g2_0") < 0.02
    assert report.value("tau0") == pytest.approx(2000.0, rel=0.1)


def test_flat_correlation_is_not_antibunched(rng):
    report = fit_g2(_antibunching_histogram(1.0, 2000.0, rng=rng))
    assert report.value("g2_0") == pytest.approx(1.0, abs=0.05)
    assert report.flags["single_emitter"] == "false"


@pytest.mark.parametrize("g2_0", [0.0, 0.22, 0.5, 1.0])
def test_fit_g2_is_unbiased(g2_0):
    values = []
    for seed in range(5):
        hist = _antibunching_histogram(g2_0, 2000.0, rng=np.random.default_rng(seed))
        values.append(fit_g2(hist, tau0_guess=1500.0).value("g2_0"))
    assert np.mean(values) == pytest.approx(g2_0, abs=0.02)


@pytest.mark.slow
def test_simulated_single_emitter_is_antibunched():
    records = simulate_antibunched_stream(2e7, 2000.0, 0.01, seed=9)
    hist = correlate(records, 0, 1, window=20_000, bin_width=200)
    report = fit_g2(hist, tau0_guess=1500.0)
    assert report.value("g2_0") < 0.1
    assert report.value("tau0") == pytest.approx(2000.0, rel=0.1)
    assert report.flags["single_emitter"] == "true"


def test_antibunched_stream_rate_limit():
    with pytest.raises(DomainError):
        simulate_antibunched_stream(2e8, 2000.0, 1e-3)


def test_detection_efficiency_thins_stream():
    full = simulate_antibunched_stream(1e6, 1000.0, 0.01, seed=4)
    half = simulate_antibunched_stream(1e6, 1000.0, 0.01, seed=4, efficiency=0.5)
    assert len(full) == pytest.approx(1e4, rel=0.05)
    assert len(half) == pytest.approx(0.5 * len(full), rel=0.1)


def test_poisson_stream_is_seeded():
    assert simulate_poisson_stream(1e3, 1.0, seed=3) == simulate_poisson_stream(1e3, 1.0, seed=3)


def test_pulsed_g2_compares_centre_to_side_peaks():
    period = 12_500.0
    n = 600
    edges = (np.arange(-n, n + 2) - 0.5) * 100.0
    centers = 0.5 * (edges[:-1] + edges[1:])
    counts = np.zeros(centers.size, dtype=int)
    for k in range(-4, 5):
        counts[np.argmin(np.abs(centers - k * period))] = 200 if k == 0 else 1000
    report = pulsed_g2(CorrelationHistogram(edges, counts, 1.0), period)
    assert report.model_name == "pulsed_g2"
    assert report.value("g2_0") == pytest.approx(0.2)
    assert report.flags["single_emitter"] == "true"


def test_pulsed_g2_needs_side_peaks():
    with pytest.raises(DomainError):
        pulsed_g2(_antibunching_histogram(0.1, 2000.0), period=50_000.0)


def test_decay_from_timetags_uses_preceding_sync():
    records = _records((0, 100), (0, 10_100), (0, 20_100), (1, 50), (1, 2_600), (1, 12_650), (1, 25_100))
    decay = decay_from_timetags(records, 0, 1, bin_width=1000, n_bins=8)
    np.testing.assert_array_equal(decay.counts, [0, 0, 2, 0, 0, 1, 0, 0])
    np.testing.assert_allclose(decay.bin_centers[:2], [500.0, 1500.0])


def test_decay_from_timetags_requires_both_channels():
    with pytest.raises(NoSignalError):
        decay_from_timetags(_records((0, 100)), 0, 1, bin_width=1000, n_bins=8)


def test_fit_lifetime_recovers_decay_constant():
    edges = np.arange(401) * 50.0
    centers = 0.5 * (edges[:-1] + edges[1:])
    counts = 10.0 + np.where(centers >= 5000.0, 1e4 * np.exp(-(centers - 5000.0) / 2000.0), 0.0)
    report = fit_lifetime(DecayHistogram(edges, counts))
    assert report.model_name == "exponential_decay"
    assert report.value("tau") == pytest.approx(2000.0, rel=1e-3)
    assert report.value("background") == pytest.approx(10.0, rel=1e-2)
    assert report.parameters["tau"].unit == "ps"


def test_fit_lifetime_on_noisy_decay(rng):
    edges = np.arange(301) * 100.0
    centers = 0.5 * (edges[:-1] + edges[1:])
    clean = 5.0 + np.where(centers >= 2000.0, 2e3 * np.exp(-(centers - 2000.0) / 3000.0), 0.0)
    report = fit_lifetime(DecayHistogram(edges, rng.poisson(clean)))
    assert report.value("tau") == pytest.approx(3000.0, rel=0.05)


def test_flat_histogram_has_no_decay():
    edges = np.arange(65) * 100.0
    with pytest.raises(NoSignalError, match="no decay"):
        fit_lifetime(DecayHistogram(edges, np.full(64, 50.0)))


def test_short_histogram_is_rejected():
    edges = np.arange(9) * 100.0
    with pytest.raises(DomainError):
        fit_lifetime(DecayHistogram(edges, [1, 9, 8, 7, 6, 5, 4, 3]))
