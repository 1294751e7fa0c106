import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialattn.dsp import (
    LOG_FLOOR,
    ComplexSpectrogram,
    ConfigError,
    MultiChannelWaveform,
    analysis_window,
    cola_interior,
    complex_dot,
    hz_to_mel,
    istft,
    log_mel,
    mel_filterbank,
    mel_to_hz,
    read_wav,
    stft,
    synthesis_window,
    write_wav,
)

SR = 16000


def direct_dft(frame, nfft):
    """Oracle: DFT by explicit summation."""
    n = np.arange(len(frame))
    k = np.arange(nfft // 2 + 1)
    return np.array([np.sum(frame * np.exp(-2j * np.pi * kk * n / nfft)) for kk in k])


def test_zero_signal_gives_zero_bins():
    spec = stft(MultiChannelWaveform(np.zeros((2, SR)), SR))
    assert spec.shape[0] == 2
    assert np.all(spec.real == 0) and np.all(spec.imag == 0)


def test_frame_count_single_frame():
    # 1 + floor((400 - 400) / 160) = 1
    spec = stft(MultiChannelWaveform(np.random.default_rng(0).standard_normal(400), SR))
    assert spec.shape == (1, 1, 257)


@pytest.mark.parametrize("n", [400, 559, 560, 16000])
def test_frame_count_formula(n):
    spec = stft(MultiChannelWaveform(np.ones(n), SR))
    assert spec.shape[1] == 1 + (n - 400) // 160


def test_exact_bin_sinusoid_rect_window():
    nfft, k0 = 512, 10
    n = np.arange(4 * nfft)
    x = np.cos(2 * np.pi * k0 * n / nfft)
    spec = stft(MultiChannelWaveform(x, SR), window_len_s=nfft / SR, hop_s=nfft / SR, window="rect")
    X = spec.values[0]
    oracle = direct_dft(x[:nfft], nfft)
    np.testing.assert_allclose(X[0], oracle, atol=1e-9)
    mag = np.abs(X)
    peak = mag[:, k0]
    others = np.delete(mag, k0, axis=1)
    assert np.all(others <= 1e-10 * peak[:, None])


def test_hann_window_matches_direct_dft():
    x = np.random.default_rng(1).standard_normal(1000)
    spec = stft(MultiChannelWaveform(x, SR))
    w = analysis_window("hann", 400)
    np.testing.assert_allclose(spec.values[0, 2], direct_dft(x[320:720] * w, 512), atol=1e-9)


def test_stft_errors():
    with pytest.raises(ValueError, match="insufficient samples"):
        stft(MultiChannelWaveform(np.zeros(399), SR))
    with pytest.raises(ConfigError):
        stft(MultiChannelWaveform(np.zeros(1000), SR), window_len_s=0.02501)


def test_parseval_per_frame():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3000))
    spec = stft(MultiChannelWaveform(x, SR))
    w = analysis_window("hann", 400)
    nfft = spec.fft_size
    P = spec.real ** 2 + spec.imag ** 2
    spectral = (P[..., 0] + P[..., -1] + 2 * P[..., 1:-1].sum(-1)) / nfft
    frames = np.stack([x[:, t * 160 : t * 160 + 400] * w for t in range(spec.shape[1])], axis=1)
    temporal = (frames ** 2).sum(-1)
    np.testing.assert_allclose(spectral, temporal, rtol=1e-9)


def test_round_trip_interior():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 8000))
    spec = stft(MultiChannelWaveform(x, SR))
    y = istft(spec).samples
    sl = cola_interior(spec.shape[1], 400, 160)
    assert sl.stop - sl.start > 6000
    assert np.abs(y[:, sl] - x[:, sl]).max() <= 1e-6


def test_istft_zero():
    spec = ComplexSpectrogram(np.zeros((1, 5, 257)), np.zeros((1, 5, 257)), 0.01, 0.025, SR, 512)
    assert np.all(istft(spec).samples == 0)


def test_istft_single_frame_matches_direct_overlap_add():
    rng = np.random.default_rng(4)
    seg = rng.standard_normal(400)
    w = analysis_window("hann", 400)
    spec = stft(MultiChannelWaveform(seg, SR))
    out = istft(spec).samples[0]
    # oracle: dual window built by explicit summation over all shifts of w^2
    s = np.empty(400)
    for n in range(400):
        acc = 0.0
        for k in range(-3, 4):
            if 0 <= n + 160 * k < 400:
                acc += w[n + 160 * k] ** 2
        s[n] = w[n] / acc
    np.testing.assert_allclose(out, seg * w * s, atol=1e-12)


def test_istft_rejects_gapped_hop():
    with pytest.raises(ConfigError):
        synthesis_window("hann", 400, 480)
    # hop 200 leaves no gap for Hann^2 (w^2 shifted by N/2 sums to a non-zero profile)
    synthesis_window("hann", 400, 200)


def test_log_mel_zero_is_floor():
    spec = ComplexSpectrogram(np.zeros((1, 4, 257)), np.zeros((1, 4, 257)), 0.01, 0.025, SR, 512)
    v = log_mel(spec)
    assert v.shape == (4, 80)
    assert np.all(v == np.log(LOG_FLOOR))


def test_log_mel_single_filter_single_bin():
    j, power = 40, 9.0
    real = np.zeros((1, 1, 257))
    real[0, 0, j] = np.sqrt(power)
    spec = ComplexSpectrogram(real, np.zeros_like(real), 0.01, 0.025, SR, 512)
    # oracle: one triangle from 0 Hz peaking at the mel midpoint of [0, 8 kHz]
    f_c = 700.0 * (10 ** ((2595.0 * np.log10(1 + 8000 / 700.0) / 2) / 2595.0) - 1)
    f_j = j * SR / 512
    weight = f_j / f_c
    v = log_mel(spec, n_mels=1)
    assert v.shape == (1, 1)
    assert v[0, 0] == pytest.approx(np.log(weight * power + LOG_FLOOR), abs=1e-12)


def test_log_mel_flat_bank_white_noise():
    rng = np.random.default_rng(5)
    # white noise frames -> power spectrum averaged over 20000 frames
    x = rng.standard_normal(400 + 160 * 19999)
    spec = stft(MultiChannelWaveform(x, SR))
    assert spec.shape[1] >= 100
    energies = np.exp(log_mel(spec, kind="flat")).mean(axis=0)
    spread = np.abs(energies - energies.mean()).max() / energies.mean()
    assert spread <= 0.05


def test_mel_scale_inverse():
    f = np.linspace(0, 8000, 17)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    fb = mel_filterbank(80, 512, SR)
    assert fb.shape == (80, 257) and np.all(fb >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10_000))
def test_log_mel_always_finite(frames, seed):
    rng = np.random.default_rng(seed)
    scale = 10.0 ** rng.uniform(-12, 3)
    re = scale * rng.standard_normal((1, frames, 257))
    im = scale * rng.standard_normal((1, frames, 257))
    re[:, :, rng.integers(0, 257)] = 0.0
    assert np.all(np.isfinite(log_mel(ComplexSpectrogram(re, im, 0.01, 0.025, SR, 512))))


# complex_dot ---------------------------------------------------------------

def test_complex_dot_identity():
    assert complex_dot([1 + 0j], [3 - 2j]) == 3 - 2j


def test_complex_dot_hand_example():
    # conj(1)*(1+1i) + conj(i)*2 = 1 + 1i - 2i = 1 - 1i
    assert complex_dot([1 + 0j, 1j], [1 + 1j, 2 + 0j]) == 1 - 1j


def test_complex_dot_length_mismatch():
    with pytest.raises(ValueError):
        complex_dot([1, 2], [1])


complex_vec = st.lists(
    st.tuples(st.floats(-10, 10), st.floats(-10, 10)).map(lambda t: complex(*t)), min_size=1, max_size=8
)


@settings(max_examples=60, deadline=None)
@given(complex_vec, st.data())
def test_complex_dot_algebra(a, data):
    n = len(a)
    b = data.draw(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)).map(lambda t: complex(*t)),
                           min_size=n, max_size=n))
    c = data.draw(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)).map(lambda t: complex(*t)),
                           min_size=n, max_size=n))
    alpha = complex(data.draw(st.floats(-3, 3)), data.draw(st.floats(-3, 3)))
    a, b, c = np.array(a), np.array(b), np.array(c)
    assert complex_dot(a, b) == pytest.approx(np.conj(complex_dot(b, a)), rel=1e-12, abs=1e-12)
    scale = 1 + np.abs(a).sum() * (np.abs(b).sum() + np.abs(c).sum()) * (1 + abs(alpha))
    # linear in the second argument
    lhs = complex_dot(a, alpha * b + c)
    rhs = alpha * complex_dot(a, b) + complex_dot(a, c)
    assert abs(lhs - rhs) <= 1e-12 * scale
    # conjugate-linear in the first
    lhs = complex_dot(alpha * a + c, b)
    rhs = np.conj(alpha) * complex_dot(a, b) + complex_dot(c, b)
    assert abs(lhs - rhs) <= 1e-12 * scale


# WAV ----------------------------------------------------------------------

@pytest.mark.parametrize("fmt,tol", [("float32", 1e-7), ("pcm16", 1.0 / 32768)])
def test_wav_round_trip(tmp_path, fmt, tol):
    x = 0.5 * np.random.default_rng(6).uniform(-1, 1, (3, 1000))
    write_wav(tmp_path / "a.wav", MultiChannelWaveform(x, SR), fmt)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == SR and back.samples.shape == (3, 1000)
    assert np.abs(back.samples - x).max() <= tol


def test_waveform_validation():
    with pytest.raises(ValueError):
        MultiChannelWaveform(np.zeros((2, 10)), 0)
    assert MultiChannelWaveform(np.zeros(5), 8000).n_channels == 1
