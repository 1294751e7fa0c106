"""Signal primitives: framing, STFT/ISTFT, log-mel features, complex dot, WAV I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

LOG_FLOOR = 1e-7


class ConfigError(ValueError):
    """Raised when framing parameters are inconsistent with the sample rate."""


@dataclass(frozen=True)
class MultiChannelWaveform:
    samples: np.ndarray  # [M, N]
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError(f"samples must be [channels, time], got shape {s.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Per-channel STFT stored as real/imag planes of shape [M, T, F]."""

    real: np.ndarray
    imag: np.ndarray
    frame_hop_s: float
    window_len_s: float
    sample_rate: int
    fft_size: int
    window: str = "hann"

    def __post_init__(self):
        if self.real.shape != self.imag.shape or self.real.ndim != 3:
            raise ValueError("real/imag must share a [M, T, F] shape")
        if self.real.shape[2] != self.fft_size // 2 + 1:
            raise ValueError("bin count must equal fft_size // 2 + 1")

    @property
    def values(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.real.shape

    @property
    def win_samples(self) -> int:
        return int(round(self.window_len_s * self.sample_rate))

    @property
    def hop_samples(self) -> int:
        return int(round(self.frame_hop_s * self.sample_rate))

    @classmethod
    def from_complex(cls, values: np.ndarray, **meta) -> "ComplexSpectrogram":
        values = np.asarray(values)
        return cls(real=values.real.astype(np.float64), imag=values.imag.astype(np.float64), **meta)

    def channel(self, m: int) -> "ComplexSpectrogram":
        return ComplexSpectrogram(
            real=self.real[m : m + 1], imag=self.imag[m : m + 1],
            frame_hop_s=self.frame_hop_s, window_len_s=self.window_len_s,
            sample_rate=self.sample_rate, fft_size=self.fft_size, window=self.window,
        )


def to_samples(seconds: float, sample_rate: int, what: str) -> int:
    n = seconds * sample_rate
    if n <= 0 or abs(n - round(n)) > 1e-9:
        raise ConfigError(f"{what} of {seconds} s is not a positive integer number of samples at {sample_rate} Hz")
    return int(round(n))


def next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def analysis_window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        # periodic Hann
        return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    if kind in ("rect", "rectangular"):
        return np.ones(n)
    raise ConfigError(f"unknown window {kind!r}")


def num_frames(n_samples: int, win: int, hop: int) -> int:
    if n_samples < win:
        raise ValueError("insufficient samples: signal shorter than one window")
    return 1 + (n_samples - win) // hop


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Slice the last axis of ``x`` into overlapping frames ``[..., T, win]``."""
    T = num_frames(x.shape[-1], win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    return x[..., idx]


def stft(
    wave: MultiChannelWaveform,
    window_len_s: float = 0.025,
    hop_s: float = 0.010,
    window: str = "hann",
    fft_size: int | None = None,
) -> ComplexSpectrogram:
    sr = wave.sample_rate
    win = to_samples(window_len_s, sr, "window length")
    hop = to_samples(hop_s, sr, "hop")
    nfft = fft_size or next_pow2(win)
    if nfft < win:
        raise ConfigError("fft_size must be at least the window length")
    frames = frame_signal(wave.samples, win, hop) * analysis_window(window, win)
    X = np.fft.rfft(frames, n=nfft, axis=-1)
    return ComplexSpectrogram(
        real=X.real.copy(), imag=X.imag.copy(), frame_hop_s=hop_s, window_len_s=window_len_s,
        sample_rate=sr, fft_size=nfft, window=window,
    )


def synthesis_window(kind: str, win: int, hop: int) -> np.ndarray:
    """Dual window for weighted overlap-add: ``w / sum_k w[n - k*hop]**2``.

    Raises ``ConfigError`` when the shifted squared windows leave a gap (no
    stable reconstruction exists for that window/hop pair).
    """
    w = analysis_window(kind, win)
    norm = np.zeros(hop)
    w2 = w * w
    for start in range(0, win, hop):
        seg = w2[start : start + hop]
        norm[: len(seg)] += seg
    if hop > win or norm.min() < 1e-8 * norm.max():
        raise ConfigError(f"window {kind!r} with length {win} and hop {hop} cannot be overlap-added stably")
    return w / np.tile(norm, win // hop + 1)[:win]


def istft(spec: ComplexSpectrogram) -> MultiChannelWaveform:
    win, hop = spec.win_samples, spec.hop_samples
    s = synthesis_window(spec.window, win, hop)
    M, T, _ = spec.shape
    frames = np.fft.irfft(spec.values, n=spec.fft_size, axis=-1)[..., :win] * s
    out = np.zeros((M, (T - 1) * hop + win))
    for t in range(T):
        out[:, t * hop : t * hop + win] += frames[:, t]
    return MultiChannelWaveform(out, spec.sample_rate)


def cola_interior(n_frames: int, win: int, hop: int) -> slice:
    """Sample range where every overlapping frame is present."""
    return slice(win, (n_frames - 1) * hop + 1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int, kind: str = "mel") -> np.ndarray:
    """Filterbank matrix ``[n_mels, F]``.

    ``kind="flat"`` is a debug bank of contiguous rectangular bands, each
    normalized to unit total weight, so white noise gives equal band energies.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    F = fft_size // 2 + 1
    fb = np.zeros((n_mels, F))
    if kind == "flat":
        edges = np.linspace(0, F, n_mels + 1).round().astype(int)
        for k in range(n_mels):
            lo, hi = edges[k], max(edges[k + 1], edges[k] + 1)
            fb[k, lo:hi] = 1.0 / (hi - lo)
        return fb
    if kind != "mel":
        raise ValueError(f"unknown filterbank kind {kind!r}")
    freqs = np.arange(F) * sample_rate / fft_size
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    for k in range(n_mels):
        lo, c, hi = pts[k], pts[k + 1], pts[k + 2]
        rise = (freqs - lo) / (c - lo)
        fall = (hi - freqs) / (hi - c)
        fb[k] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def log_mel(spec_channel: ComplexSpectrogram, n_mels: int = 80, kind: str = "mel",
            filterbank: np.ndarray | None = None) -> np.ndarray:
    """Log filterbank energies ``[T, n_mels]`` of a single-channel spectrogram."""
    if spec_channel.shape[0] != 1:
        raise ValueError("log_mel expects a single-channel spectrogram")
    fb = filterbank if filterbank is not None else mel_filterbank(
        n_mels, spec_channel.fft_size, spec_channel.sample_rate, kind)
    power = spec_channel.real[0] ** 2 + spec_channel.imag[0] ** 2
    return np.log(power @ fb.T + LOG_FLOOR)


def complex_dot(a, b) -> complex:
    """``sum(conj(a) * b)`` accumulated as two real-valued sums."""
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    ar, ai, br, bi = a.real, a.imag, b.real, b.imag
    re = float(np.sum(ar * br + ai * bi))
    im = float(np.sum(ar * bi - ai * br))
    return complex(re, im)


def read_wav(path: str | Path) -> MultiChannelWaveform:
    sr, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV sample type {data.dtype}")
    if x.ndim == 1:
        x = x[:, None]
    return MultiChannelWaveform(x.T, sr)


def write_wav(path: str | Path, wave: MultiChannelWaveform, fmt: str = "float32") -> None:
    x = wave.samples.T
    if fmt == "pcm16":
        data = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    elif fmt == "float32":
        data = x.astype("<f4")
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    wavfile.write(str(path), wave.sample_rate, data)
