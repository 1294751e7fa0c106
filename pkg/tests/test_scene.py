import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialattn.dsp import MultiChannelWaveform
from spatialattn.scene import (
    ArrayGeometry,
    DatasetManifest,
    Room,
    SimConfig,
    SourcePlacement,
    SymbolInventory,
    delay_and_sum_weights,
    delay_signal,
    generate_dataset,
    measured_snr_db,
    mix_at_snr,
    render_source,
    simulate_utterance,
    snr_gain,
    steering_vector,
    synth_noise,
    synth_speech,
    unit_direction,
)

SR = 16000
ORIGIN_MIC = ArrayGeometry(np.zeros((1, 3)))


def test_rectangle_geometry():
    g = ArrayGeometry.rectangle()
    assert g.n_mics == 4
    np.testing.assert_allclose(g.mic_positions.mean(0), 0, atol=1e-15)
    assert g.aperture == pytest.approx(np.hypot(0.06, 0.07))
    with pytest.raises(ValueError):
        ArrayGeometry(np.zeros((2, 3)))


def test_placement_validation():
    with pytest.raises(ValueError):
        SourcePlacement(2 * np.pi, 0.0, 1.0)
    with pytest.raises(ValueError):
        SourcePlacement(0.0, 2.0, 1.0)
    assert SourcePlacement(0.0, 0.0, 1.0).is_far_field(ArrayGeometry.rectangle())
    assert not SourcePlacement(0.0, 0.0, 0.5).is_far_field(ArrayGeometry.rectangle())


def test_steering_zero_frequency():
    v = steering_vector(ArrayGeometry.rectangle(), unit_direction(0.7, 0.1), 0.0)
    np.testing.assert_array_equal(v, np.ones(4, dtype=complex))


def test_steering_broadside_equal_phases():
    # arrival along +y: mics sharing a y coordinate see the same phase
    v = steering_vector(ArrayGeometry.rectangle(), [0.0, 1.0, 0.0], 2500.0)
    assert abs(v[0] - v[1]) < 1e-15 and abs(v[2] - v[3]) < 1e-15


def test_steering_two_mic_phase_difference():
    geom = ArrayGeometry(np.array([[0.0, 0, 0], [0.06, 0, 0]]))
    v = steering_vector(geom, [1.0, 0, 0], 1000.0, 343.0)
    expected = 2 * np.pi * 1000 * 0.06 / 343
    # the mic further along +x hears the wave first: phase leads by the travel time
    assert np.angle(v[1] / v[0]) == pytest.approx(expected, abs=1e-12)


def test_steering_zero_direction():
    with pytest.raises(ValueError):
        steering_vector(ArrayGeometry.rectangle(), [0.0, 0.0, 0.0], 100.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(-np.pi / 2, np.pi / 2), st.floats(0, 8000))
def test_steering_unit_magnitude(az, el, f):
    v = steering_vector(ArrayGeometry.rectangle(), unit_direction(az, el), f)
    assert np.abs(np.abs(v) - 1).max() <= 1e-12


def test_delay_and_sum_unity_look_gain():
    g = ArrayGeometry.rectangle()
    freqs = np.linspace(0, 8000, 9)
    W = delay_and_sum_weights(g, [0.3, 2.0], freqs)
    for p, az in enumerate([0.3, 2.0]):
        d = steering_vector(g, unit_direction(az, 0.0), freqs)
        np.testing.assert_allclose((np.conj(W[p]) * d).sum(-1), 1.0, atol=1e-12)


# rendering -----------------------------------------------------------------

def test_equal_distance_channels_identical():
    g = ArrayGeometry.rectangle()
    x = np.random.default_rng(0).standard_normal(2000)
    out = render_source(x, SR, g, SourcePlacement(np.pi / 2, 0.0, 2.0)).samples
    assert np.abs(out[0] - out[1]).max() <= 1e-6
    assert np.abs(out[2] - out[3]).max() <= 1e-6


def test_inverse_distance_law():
    x = np.random.default_rng(1).standard_normal(1000)
    near = render_source(x, SR, ORIGIN_MIC, SourcePlacement(0.0, 0.0, 2.0), speed_of_sound=320.0).samples[0]
    far = render_source(x, SR, ORIGIN_MIC, SourcePlacement(0.0, 0.0, 4.0), speed_of_sound=320.0).samples[0]
    # 2 m -> 100 samples, 4 m -> 200 samples at c = 320 m/s
    np.testing.assert_allclose(far[200:], 0.5 * near[100:-100], atol=1e-15)


def test_ten_sample_delay_cross_correlation():
    x = np.random.default_rng(2).standard_normal(4000)
    y = render_source(x, SR, ORIGIN_MIC, SourcePlacement(0.0, 0.0, 0.2), speed_of_sound=320.0).samples[0]
    lags = np.arange(-50, 51)
    xc = [np.dot(y[max(0, k):len(y) + min(0, k)], x[max(0, -k):len(x) - max(0, k)]) for k in lags]
    assert lags[int(np.argmax(xc))] == 10


def test_fractional_delay_of_bandlimited_signal():
    n = np.arange(3000)
    f = 500.0
    x = np.sin(2 * np.pi * f * n / SR)
    y = delay_signal(x, 7.3)
    ref = np.sin(2 * np.pi * f * (n - 7.3) / SR)
    assert np.abs(y[100:-100] - ref[100:-100]).max() < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([0, 1]))
def test_render_is_linear(seed, a, b, order):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(600), rng.standard_normal(600)
    g = ArrayGeometry.rectangle()
    place = SourcePlacement(1.1, 0.2, 2.5)

    def r(s):
        return render_source(s, SR, g, place, order).samples

    lhs = r(a * x + b * y)
    rhs = a * r(x) + b * r(y)
    assert np.abs(lhs - rhs).max() <= 1e-9


def test_reflections_add_energy_and_bounds():
    x = np.random.default_rng(3).standard_normal(3000)
    g = ArrayGeometry.rectangle()
    place = SourcePlacement(0.5, 0.0, 2.0)
    direct = render_source(x, SR, g, place, 0).samples
    refl = render_source(x, SR, g, place, 1, Room()).samples
    assert not np.allclose(direct, refl)
    with pytest.raises(ValueError, match="outside the room"):
        render_source(x, SR, g, SourcePlacement(0.0, 0.0, 6.0), 1, Room())
    with pytest.raises(ValueError, match="inside the array"):
        render_source(x, SR, g, SourcePlacement(0.0, 0.0, 0.01))


# mixing --------------------------------------------------------------------

def test_snr_gain_examples():
    rng = np.random.default_rng(4)
    s = rng.standard_normal((2, 5000))
    n = rng.standard_normal((2, 5000))
    n *= np.sqrt(np.mean(s ** 2) / np.mean(n ** 2))
    assert snr_gain(MultiChannelWaveform(s, SR), MultiChannelWaveform(n, SR), 0.0) == pytest.approx(1.0, abs=1e-12)
    s = 0.1 * np.sqrt(2) * np.sin(2 * np.pi * np.arange(1600) / 16)  # RMS exactly 0.1 over whole periods
    n = 0.1 * np.sign(np.sin(2 * np.pi * (np.arange(1600) + 0.5) / 32))  # RMS 0.1
    g = snr_gain(MultiChannelWaveform(s, SR), MultiChannelWaveform(n, SR), 20.0)
    assert g == pytest.approx(0.1, abs=1e-12)


def test_silent_noise_rejected():
    with pytest.raises(ValueError):
        mix_at_snr(MultiChannelWaveform(np.ones(10), SR), MultiChannelWaveform(np.zeros(10), SR), 10.0)


def test_measured_snr_within_tenth_db():
    rng = np.random.default_rng(5)
    errs = []
    for _ in range(100):
        s = rng.standard_normal((4, 800)) * rng.uniform(0.01, 2)
        n = rng.standard_normal((4, 800)) * rng.uniform(0.01, 2)
        target = rng.uniform(0, 25)
        S, N = MultiChannelWaveform(s, SR), MultiChannelWaveform(n, SR)
        mixed = mix_at_snr(S, N, target)
        scaled = MultiChannelWaveform(mixed.samples - s, SR)
        errs.append(abs(measured_snr_db(S, scaled) - target))
    assert max(errs) <= 0.1


# datasets ------------------------------------------------------------------

def small_cfg(**kw):
    return SimConfig(**{"count": 3, "duration_s": 0.6, **kw})


def test_count_zero(tmp_path):
    m = generate_dataset(small_cfg(count=0), tmp_path / "d")
    assert len(m) == 0
    assert not (tmp_path / "d" / "audio").exists()


def test_generation_is_byte_deterministic(tmp_path):
    generate_dataset(small_cfg(), tmp_path / "a")
    generate_dataset(small_cfg(), tmp_path / "b")
    for rel in ["manifest.jsonl"] + [f"{k}/train-0000{i}.{e}" for i in range(3)
                                     for k, e in (("audio", "wav"), ("labels", "txt"))]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_manifest_round_trip(tmp_path):
    m = generate_dataset(small_cfg(), tmp_path / "d")
    back = DatasetManifest.load(tmp_path / "d" / "manifest.jsonl")
    assert [e.id for e in back.entries] == [e.id for e in m.entries]
    assert back.entries[1].scene == m.entries[1].scene
    wav = back.read_mixture(back.entries[0])
    assert wav.n_channels == 4 and wav.sample_rate == SR
    labels = back.read_labels(back.entries[0])
    assert len(labels) == 1 + (wav.n_samples - 400) // 160
    (tmp_path / "d" / back.entries[2].mixture).unlink()
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "d" / "manifest.jsonl")


def test_manifest_scan_of_500_scenes(tmp_path):
    m = generate_dataset(SimConfig(count=500, duration_s=0.05, reflection_order=0), tmp_path / "d")
    records = [json.loads(line) for line in (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()]
    assert len({r["id"] for r in records}) == 500 == len(m)
    snr = np.array([r["snr_db"] for r in records])
    assert snr.min() >= 0 and snr.max() <= 25
    # uniform draws: every 5 dB bin populated and the extremes approached
    assert snr.min() < 1 and snr.max() > 24
    assert np.all(np.histogram(snr, bins=5, range=(0, 25))[0] > 50)
    sep = np.array([abs((r["noise_azimuth"] - r["speech_azimuth"] + np.pi) % (2 * np.pi) - np.pi) for r in records])
    assert np.rad2deg(sep).min() >= 30


def test_simulated_labels_and_level():
    mix, labels, scene = simulate_utterance(SimConfig(), "train-00007")
    assert mix.samples.shape == (4, 32000)
    assert np.abs(mix.samples).max() == pytest.approx(0.5)
    assert labels.min() >= 0 and labels.max() <= 10 and labels[0] == 0
    assert 0 <= scene.snr_db <= 25
    again, labels2, _ = simulate_utterance(SimConfig(), "train-00007")
    np.testing.assert_array_equal(again.samples, mix.samples)
    np.testing.assert_array_equal(labels, labels2)


# source content ------------------------------------------------------------------

def _band_fraction(x, lo, hi):
    P = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1 / SR)
    return P[(f >= lo) & (f < hi)].sum() / P.sum()


def test_inventory_grid_and_range():
    inv = SymbolInventory(10)
    f2 = [inv.formants(c)[1] for c in range(1, 11)]
    np.testing.assert_allclose(f2, np.linspace(1500, 5500, 10))
    assert all(inv.formants(c)[0] == 500.0 for c in range(1, 11))
    with pytest.raises(ValueError):
        inv.formants(0)
    with pytest.raises(ValueError):
        inv.formants(11)


def test_symbol_spectrum_peaks_at_its_formants():
    inv = SymbolInventory(10)
    rng = np.random.default_rng(0)
    x = inv.render(7, 8000, SR, rng)
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0)
    _, f2 = inv.formants(7)
    near_f2 = _band_fraction(x, f2 - 300, f2 + 300)
    elsewhere = _band_fraction(x, 1200, f2 - 300) + _band_fraction(x, f2 + 300, 7000)
    assert near_f2 > 5 * elsewhere
    assert _band_fraction(x, 200, 800) > 0.5


def test_interference_occupies_upper_band():
    rng = np.random.default_rng(1)
    x = synth_noise(rng, 2 * SR, SR, SymbolInventory(10))
    assert np.sqrt(np.mean(x ** 2)) == pytest.approx(1.0)
    assert _band_fraction(x, 1200, 5900) > 0.95


def test_speech_labels_match_content():
    rng = np.random.default_rng(2)
    x, lab = synth_speech(rng, 2 * SR, SR, SymbolInventory(10))
    assert set(np.unique(lab)) <= set(range(11))
    assert np.all(x[lab == 0] == 0.0)
    assert lab[0] == 0 and lab[-1] == 0
