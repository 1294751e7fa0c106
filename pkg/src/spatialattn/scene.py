"""Far-field scene simulation: array geometry, steering, source rendering, SNR mixing, datasets."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import MultiChannelWaveform, read_wav, write_wav

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
DELAY_TAPS = 31


@dataclass(frozen=True)
class ArrayGeometry:
    mic_positions: np.ndarray  # [M, 3] meters

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError("mic_positions must be [M, 3]")
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        if np.any(d[np.triu_indices(len(pos), 1)] <= 0):
            raise ValueError("microphone positions must be pairwise distinct")
        object.__setattr__(self, "mic_positions", pos)

    @property
    def n_mics(self) -> int:
        return self.mic_positions.shape[0]

    @property
    def aperture(self) -> float:
        p = self.mic_positions
        return float(np.linalg.norm(p[:, None] - p[None], axis=-1).max())

    @property
    def radius(self) -> float:
        return float(np.linalg.norm(self.mic_positions - self.mic_positions.mean(0), axis=1).max())

    @classmethod
    def rectangle(cls, width: float = 0.06, depth: float = 0.07) -> "ArrayGeometry":
        """Four mics at the corners of a ``width`` x ``depth`` rectangle, centroid at the origin."""
        x, y = width / 2, depth / 2
        return cls(np.array([[-x, -y, 0.0], [x, -y, 0.0], [x, y, 0.0], [-x, y, 0.0]]))


@dataclass(frozen=True)
class SourcePlacement:
    azimuth: float  # radians, [0, 2pi)
    elevation: float  # radians, [-pi/2, pi/2]
    distance: float  # meters

    def __post_init__(self):
        if not 0.0 <= self.azimuth < 2 * np.pi:
            raise ValueError(f"azimuth {self.azimuth} outside [0, 2pi)")
        if not -np.pi / 2 <= self.elevation <= np.pi / 2:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        if not self.distance > 0:
            raise ValueError("distance must be positive")

    @property
    def unit(self) -> np.ndarray:
        return unit_direction(self.azimuth, self.elevation)

    @property
    def position(self) -> np.ndarray:
        return self.distance * self.unit

    def is_far_field(self, geom: ArrayGeometry) -> bool:
        return self.distance >= 10 * geom.aperture


def unit_direction(azimuth, elevation) -> np.ndarray:
    az, el = np.asarray(azimuth, dtype=np.float64), np.asarray(elevation, dtype=np.float64)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def steering_vector(geom: ArrayGeometry, direction, freq_hz, speed_of_sound: float = SPEED_OF_SOUND) -> np.ndarray:
    """Plane-wave response ``exp(-2j*pi*f*tau_m)`` with ``tau_m = -(u . p_m) / c``.

    ``direction`` is a SourcePlacement or a 3-vector pointing from the array
    towards the source. ``freq_hz`` may be an array; output shape is
    ``freq.shape + (M,)``. Phases are referenced to the array centroid.
    """
    u = direction.unit if isinstance(direction, SourcePlacement) else np.asarray(direction, dtype=np.float64)
    n = np.linalg.norm(u)
    if n == 0:
        raise ValueError("direction has zero norm")
    u = u / n
    f = np.asarray(freq_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    p = geom.mic_positions - geom.mic_positions.mean(axis=0)
    tau = -(p @ u) / speed_of_sound
    return np.exp(-2j * np.pi * f[..., None] * tau)


def delay_and_sum_weights(geom: ArrayGeometry, azimuths, freqs_hz, elevation: float = 0.0,
                          speed_of_sound: float = SPEED_OF_SOUND) -> np.ndarray:
    """Weights ``[P, F, M]`` steering towards each azimuth, normalized to unity look-direction gain."""
    out = [steering_vector(geom, unit_direction(a, elevation), freqs_hz, speed_of_sound) / geom.n_mics
           for a in np.atleast_1d(azimuths)]
    return np.stack(out)


def fractional_delay_filter(frac: float, taps: int = DELAY_TAPS) -> np.ndarray:
    """Hann-windowed sinc for a delay of ``frac`` in [0, 1) samples, centred on tap ``taps // 2``."""
    half = taps // 2
    k = np.arange(-half, half + 1) - frac
    win = 0.5 * (1.0 + np.cos(np.pi * k / (half + 1)))
    return np.sinc(k) * win


def delay_signal(x: np.ndarray, delay_samples: float, taps: int = DELAY_TAPS) -> np.ndarray:
    """Delay ``x`` by a (fractional) number of samples; output has the same length."""
    n0 = int(np.floor(delay_samples))
    frac = delay_samples - n0
    half = taps // 2
    if frac < 1e-12:
        h = np.zeros(taps)
        h[half] = 1.0
    else:
        h = fractional_delay_filter(frac, taps)
    y = np.convolve(x, h)  # y[n] = sum_k h[k] x[n - k]; filter centre sits at lag half
    shift = n0 - half
    out = np.zeros_like(x, dtype=np.float64)
    N = len(x)
    # out[n] = y[n - shift]
    lo = max(0, shift)
    hi = min(N, len(y) + shift)
    if hi > lo:
        out[lo:hi] = y[lo - shift : hi - shift]
    return out


@dataclass(frozen=True)
class Room:
    """Shoebox room for first-order images; the array centroid sits at ``array_center``."""

    dims: tuple[float, float, float] = (10.0, 9.0, 3.2)
    array_center: tuple[float, float, float] = (5.0, 4.5, 1.5)
    reflection_coeff: float = 0.5

    def image_sources(self, src_room: np.ndarray) -> list[np.ndarray]:
        imgs = []
        for axis in range(3):
            lo_wall = -src_room[axis]
            hi_wall = 2 * self.dims[axis] - src_room[axis]
            for coord in (lo_wall, hi_wall):
                img = src_room.copy()
                img[axis] = coord
                imgs.append(img)
        return imgs


def render_source(wave, sample_rate: int, geom: ArrayGeometry, place: SourcePlacement,
                  reflection_order: int = 0, room: Room | None = None,
                  speed_of_sound: float = SPEED_OF_SOUND) -> MultiChannelWaveform:
    """Propagate a mono signal to every mic: fractional delay ``r/c`` and ``1/r`` attenuation.

    With ``reflection_order=1`` the six first-order wall images of ``room`` are
    added, each scaled by the room's reflection coefficient.
    """
    x = np.asarray(wave.samples[0] if isinstance(wave, MultiChannelWaveform) else wave, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("render_source expects a mono signal")
    if reflection_order not in (0, 1):
        raise ValueError("reflection_order must be 0 or 1")
    centroid = geom.mic_positions.mean(axis=0)
    if place.distance <= geom.radius:
        raise ValueError("source lies inside the array hull")
    src = centroid + place.position
    sources = [(src, 1.0)]
    if reflection_order == 1:
        room = room or Room()
        offset = np.asarray(room.array_center) - centroid
        src_room = src + offset
        if np.any(src_room <= 0) or np.any(src_room >= np.asarray(room.dims)):
            raise ValueError("source lies outside the room")
        sources += [(img - offset, room.reflection_coeff) for img in room.image_sources(src_room)]
    out = np.zeros((geom.n_mics, len(x)))
    for pos, gain in sources:
        for m, mic in enumerate(geom.mic_positions):
            r = float(np.linalg.norm(pos - mic))
            out[m] += (gain / r) * delay_signal(x, r / speed_of_sound * sample_rate)
    return MultiChannelWaveform(out, sample_rate)


def mean_power(wave: MultiChannelWaveform) -> float:
    return float(np.mean(wave.samples ** 2))


def snr_gain(speech: MultiChannelWaveform, noise: MultiChannelWaveform, snr_db: float) -> float:
    ps, pn = mean_power(speech), mean_power(noise)
    if pn == 0:
        raise ValueError("noise is silent; cannot reach a finite SNR")
    return float(np.sqrt(ps / (pn * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(speech: MultiChannelWaveform, noise: MultiChannelWaveform, snr_db: float) -> MultiChannelWaveform:
    if speech.samples.shape != noise.samples.shape or speech.sample_rate != noise.sample_rate:
        raise ValueError("speech and noise must share shape and sample rate")
    g = snr_gain(speech, noise, snr_db)
    return MultiChannelWaveform(speech.samples + g * noise.samples, speech.sample_rate)


def measured_snr_db(speech: MultiChannelWaveform, scaled_noise: MultiChannelWaveform) -> float:
    return 10.0 * np.log10(mean_power(speech) / mean_power(scaled_noise))


# ---------------------------------------------------------------------------
# synthetic source content


@dataclass(frozen=True)
class SymbolInventory:
    """Vowel-like symbols: a harmonic comb shaped by two formant peaks.

    Every symbol shares a strong low formant at ``f1``; the class lives only
    in the weaker upper formant, placed on an even grid over ``f2_range``.
    That band is where a small array has useful directivity. Label 0 is
    silence; classes are ``1..n_classes``.
    """

    n_classes: int = 10
    f0_range: tuple[float, float] = (100.0, 220.0)
    f1: float = 500.0
    f2_range: tuple[float, float] = (1500.0, 5500.0)
    f2_gain: float = 0.5
    formant_bandwidth: float = 180.0
    max_freq: float = 6000.0

    def formants(self, c: int) -> tuple[float, float]:
        """(F1, F2) for class ``c`` in 1..n_classes."""
        if not 1 <= c <= self.n_classes:
            raise ValueError(f"class {c} outside 1..{self.n_classes}")
        grid = np.linspace(*self.f2_range, self.n_classes) if self.n_classes > 1 else [np.mean(self.f2_range)]
        return self.f1, float(grid[c - 1])

    def envelope(self, freqs: np.ndarray, c: int) -> np.ndarray:
        f1, f2 = self.formants(c)
        bw = self.formant_bandwidth
        return (np.exp(-0.5 * ((freqs - f1) / bw) ** 2)
                + self.f2_gain * np.exp(-0.5 * ((freqs - f2) / bw) ** 2) + 0.02)

    def render(self, c: int, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
        t = np.arange(n) / sample_rate
        f0 = rng.uniform(*self.f0_range)
        harmonics = np.arange(1, int(self.max_freq // f0) + 1) * f0
        env = self.envelope(harmonics, c)
        phases = rng.uniform(0, 2 * np.pi, len(harmonics))
        x = (env[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t + phases[:, None])).sum(0)
        return x / np.sqrt(np.mean(x ** 2))


def _ramp(n: int, sample_rate: int, ramp_s: float = 0.01) -> np.ndarray:
    r = min(int(ramp_s * sample_rate), n // 2)
    env = np.ones(n)
    if r > 0:
        w = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = w
        env[n - r :] = w[::-1]
    return env


def synth_speech(rng: np.random.Generator, n_samples: int, sample_rate: int, inventory: SymbolInventory,
                 lead_silence_s=(0.25, 0.6), symbol_s=(0.12, 0.3), gap_s=(0.0, 0.08),
                 tail_silence_s: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Symbol sequence and its per-sample class labels (0 = silence)."""
    x = np.zeros(n_samples)
    labels = np.zeros(n_samples, dtype=np.int64)
    pos = int(rng.uniform(*lead_silence_s) * sample_rate)
    end = n_samples - int(tail_silence_s * sample_rate)
    while True:
        n = int(rng.uniform(*symbol_s) * sample_rate)
        if pos + n > end:
            break
        c = int(rng.integers(1, inventory.n_classes + 1))
        x[pos : pos + n] = inventory.render(c, n, sample_rate, rng) * _ramp(n, sample_rate)
        labels[pos : pos + n] = c
        pos += n + int(rng.uniform(*gap_s) * sample_rate)
    return x, labels


def synth_noise(rng: np.random.Generator, n_samples: int, sample_rate: int, inventory: SymbolInventory,
                segment_s=(0.12, 0.3), tooth_hz: float = 25.0, comb_floor: float = 0.05) -> np.ndarray:
    """Competing "talker" made of filtered noise.

    White noise is cut into segments; each segment is shaped by a harmonic
    comb at a random pitch times the upper-formant envelope of a random
    class. It has no low formant, so all of its power lands in the band that
    carries class identity, where at low SNR it outweighs the target's own
    upper formant.
    """
    out = np.zeros(n_samples)
    pos = 0
    while pos < n_samples:
        seg = min(int(rng.uniform(*segment_s) * sample_rate), n_samples - pos)
        _, f2 = inventory.formants(int(rng.integers(1, inventory.n_classes + 1)))
        f0 = rng.uniform(*inventory.f0_range)
        f = np.fft.rfftfreq(seg, 1.0 / sample_rate)
        h = f / f0
        comb = np.exp(-0.5 * ((h - np.round(h)) * f0 / tooth_hz) ** 2) * (h > 0.5)
        env = np.exp(-0.5 * ((f - f2) / inventory.formant_bandwidth) ** 2) + 0.02
        gain = env * (comb + comb_floor)
        gain[f > 7000.0] = 0.0
        x = np.fft.irfft(np.fft.rfft(rng.standard_normal(seg)) * gain, n=seg)
        out[pos : pos + seg] = x / np.sqrt(np.mean(x ** 2) + 1e-20) * _ramp(seg, sample_rate)
        pos += seg
    return out / np.sqrt(np.mean(out ** 2))


def frame_labels(sample_labels: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Label at the centre sample of each STFT frame."""
    T = 1 + (len(sample_labels) - win) // hop
    return sample_labels[np.arange(T) * hop + win // 2]


# ---------------------------------------------------------------------------
# dataset generation


@dataclass(frozen=True)
class SceneSpec:
    speech: SourcePlacement
    noise: SourcePlacement
    snr_db: float
    seed: int
    reflection_order: int = 0

    def __post_init__(self):
        if self.reflection_order not in (0, 1):
            raise ValueError("reflection_order must be 0 or 1")


@dataclass
class SimConfig:
    count: int = 500
    split: str = "train"
    seed: int = 0
    n_classes: int = 10
    sample_rate: int = 16000
    duration_s: float = 2.0
    snr_range_db: tuple[float, float] = (0.0, 25.0)
    azimuth_range_deg: tuple[float, float] = (0.0, 360.0)
    elevation_range_deg: tuple[float, float] = (-20.0, 20.0)
    distance_range_m: tuple[float, float] = (1.0, 4.0)
    min_separation_deg: float = 30.0
    reflection_order: int = 1
    reflection_coeff: float = 0.5
    room_dims: tuple[float, float, float] = (10.0, 9.0, 3.2)
    array_center: tuple[float, float, float] = (5.0, 4.5, 1.5)
    speed_of_sound: float = SPEED_OF_SOUND
    array_width: float = 0.06
    array_depth: float = 0.07
    window_len_s: float = 0.025
    hop_s: float = 0.010
    wav_format: str = "float32"

    def validate(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        lo, hi = self.snr_range_db
        if hi < lo:
            raise ValueError("snr range is empty")
        if self.split not in ("train", "eval"):
            raise ValueError("split must be 'train' or 'eval'")

    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry.rectangle(self.array_width, self.array_depth)

    def room(self) -> Room:
        return Room(tuple(self.room_dims), tuple(self.array_center), self.reflection_coeff)


@dataclass
class ManifestEntry:
    id: str
    mixture: str
    labels: str
    scene: SceneSpec

    def record(self, split: str) -> dict:
        s, n = self.scene.speech, self.scene.noise
        return {
            "id": self.id, "split": split, "mixture": self.mixture, "labels": self.labels,
            "speech_azimuth": s.azimuth, "speech_elevation": s.elevation, "speech_distance": s.distance,
            "noise_azimuth": n.azimuth, "noise_elevation": n.elevation, "noise_distance": n.distance,
            "snr_db": self.scene.snr_db, "seed": self.scene.seed, "reflection_order": self.scene.reflection_order,
        }

    @classmethod
    def from_record(cls, r: dict) -> "ManifestEntry":
        scene = SceneSpec(
            speech=SourcePlacement(r["speech_azimuth"], r["speech_elevation"], r["speech_distance"]),
            noise=SourcePlacement(r["noise_azimuth"], r["noise_elevation"], r["noise_distance"]),
            snr_db=r["snr_db"], seed=r["seed"], reflection_order=r["reflection_order"],
        )
        return cls(r["id"], r["mixture"], r["labels"], scene)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"
    root: Path | None = None  # directory relative paths resolve against

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate utterance ids in manifest")

    def __len__(self):
        return len(self.entries)

    def path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.record(self.split), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        entries = [ManifestEntry.from_record(r) for r in records]
        splits = {r["split"] for r in records}
        if len(splits) > 1:
            raise ValueError(f"manifest mixes splits {sorted(splits)}")
        m = cls(entries, splits.pop() if splits else "train", path.parent)
        if check_files:
            for e in entries:
                for rel in (e.mixture, e.labels):
                    if not m.path(rel).exists():
                        raise FileNotFoundError(f"manifest entry {e.id}: missing {rel}")
        return m

    def subset(self, ids) -> "DatasetManifest":
        keep = set(ids)
        return DatasetManifest([e for e in self.entries if e.id in keep], self.split, self.root)

    def read_mixture(self, entry: ManifestEntry) -> MultiChannelWaveform:
        return read_wav(self.path(entry.mixture))

    def read_labels(self, entry: ManifestEntry) -> np.ndarray:
        return np.loadtxt(self.path(entry.labels), dtype=np.int64, ndmin=1)


def utterance_rng(seed: int, utt_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{utt_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def random_scene(rng: np.random.Generator, cfg: SimConfig, seed: int) -> SceneSpec:
    el_lo, el_hi = np.deg2rad(cfg.elevation_range_deg)
    az_lo, az_hi = np.deg2rad(cfg.azimuth_range_deg)

    def place(az):
        return SourcePlacement(float(az), float(rng.uniform(el_lo, el_hi)), float(rng.uniform(*cfg.distance_range_m)))

    az_s = rng.uniform(az_lo, az_hi) % (2 * np.pi)
    while True:
        az_n = rng.uniform(az_lo, az_hi) % (2 * np.pi)
        sep = np.rad2deg(abs((az_n - az_s + np.pi) % (2 * np.pi) - np.pi))
        if sep >= cfg.min_separation_deg:
            break
    speech, noise = place(az_s), place(az_n)
    snr = float(rng.uniform(*cfg.snr_range_db))
    return SceneSpec(speech, noise, snr, seed, cfg.reflection_order)


def simulate_utterance(cfg: SimConfig, utt_id: str, scene: SceneSpec | None = None):
    """Render one mixture. Returns (mixture, frame labels, scene)."""
    rng = utterance_rng(cfg.seed, utt_id)
    if scene is None:
        scene = random_scene(rng, cfg, cfg.seed)
    n = int(round(cfg.duration_s * cfg.sample_rate))
    sr = cfg.sample_rate
    inv = SymbolInventory(cfg.n_classes)
    dry, sample_labels = synth_speech(rng, n, sr, inv)
    noise_dry = synth_noise(rng, n, sr, inv)
    geom, room = cfg.geometry(), cfg.room()
    speech = render_source(dry, sr, geom, scene.speech, scene.reflection_order, room, cfg.speed_of_sound)
    noise = render_source(noise_dry, sr, geom, scene.noise, scene.reflection_order, room, cfg.speed_of_sound)
    mix = mix_at_snr(speech, noise, scene.snr_db)
    peak = np.abs(mix.samples).max()
    if peak > 0:
        mix = MultiChannelWaveform(mix.samples * (0.5 / peak), sr)
    win = int(round(cfg.window_len_s * sr))
    hop = int(round(cfg.hop_s * sr))
    return mix, frame_labels(sample_labels, win, hop), scene


def generate_dataset(cfg: SimConfig, out_dir: str | Path, prefix: str | None = None) -> DatasetManifest:
    """Write mixtures, per-frame labels and ``manifest.jsonl`` under ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if cfg.count:
            (out / "audio").mkdir(exist_ok=True)
            (out / "labels").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    prefix = prefix or cfg.split
    entries = []
    for i in range(cfg.count):
        utt_id = f"{prefix}-{i:05d}"
        mix, labels, scene = simulate_utterance(cfg, utt_id)
        wav_rel, lab_rel = f"audio/{utt_id}.wav", f"labels/{utt_id}.txt"
        write_wav(out / wav_rel, mix, cfg.wav_format)
        (out / lab_rel).write_text("".join(f"{v}\n" for v in labels))
        entries.append(ManifestEntry(utt_id, wav_rel, lab_rel, scene))
    manifest = DatasetManifest(entries, cfg.split, out)
    manifest.save(out / "manifest.jsonl")
    log.info("wrote %d utterances to %s", cfg.count, out)
    return manifest


def sim_config_dict(cfg: SimConfig) -> dict:
    return asdict(cfg)
