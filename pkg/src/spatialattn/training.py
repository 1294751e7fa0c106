"""Joint training: Adam, plateau LR halving, checkpoints, metrics, and the gradient checker."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backend import anchor_labels
from .config import ExperimentConfig
from .dsp import MultiChannelWaveform, analysis_window, frame_signal, num_frames, stft
from .model import ModelSpec, Network, init_params
from .nn import Params
from .scene import ArrayGeometry, DatasetManifest, delay_and_sum_weights

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def derive_seed(root_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{root_seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0
    lr: float = 0.001


def adam_step(params: Params, grads: Params, state: AdamState, lr: float | None = None,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in tensor {name!r}")
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_global_norm(grads: Params, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items()))))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class PlateauSchedule:
    """Halve the learning rate after ``patience`` consecutive epochs without a decrease."""

    def __init__(self, lr: float, patience: int = 1):
        self.lr = lr
        self.patience = patience
        self.prev: float | None = None
        self.bad = 0

    def update(self, val_loss: float) -> float:
        if self.prev is not None and not val_loss < self.prev:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= 0.5
                self.bad = 0
        else:
            self.bad = 0
        self.prev = val_loss
        return self.lr


# ---------------------------------------------------------------------------
# checkpoint file

MAGIC = b"SATTNCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_TAGS = {v: k for k, v in _DTYPES.items()}


def write_tensor_file(path: str | Path, digest: str, tensors: dict[str, np.ndarray]) -> None:
    """Versioned little-endian container of named tensors; records are written in name order."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    buf += bytes.fromhex(digest)
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        kind = {"f": "<f8", "i": "<i8", "b": "<i8", "u": "u1"}.get(arr.dtype.kind)
        if kind is None or (arr.dtype.kind == "u" and arr.dtype.itemsize != 1):
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        dt = np.dtype(kind)
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<BI", _TAGS[dt], arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype=dt).tobytes()
    Path(path).write_bytes(bytes(buf))


def read_tensor_file(path: str | Path) -> tuple[str, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = data[12:44].hex()
    (n,) = struct.unpack_from("<I", data, 44)
    off = 48
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + ln].decode()
        off += ln
        tag, rank = struct.unpack_from("<BI", data, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        dt = _DTYPES[tag]
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(dims).copy()
        off += count * dt.itemsize
    return digest, out


def _bytes_record(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _from_bytes_record(arr: np.ndarray):
    return json.loads(arr.tobytes().decode())


@dataclass
class ModelCheckpoint:
    config: ExperimentConfig
    variant: str
    params: Params
    optimizer: AdamState
    epoch: int = 0
    rng_state: dict | None = None
    best_val_loss: float | None = None
    schedule: dict = field(default_factory=dict)

    @property
    def spec(self) -> ModelSpec:
        return self.config.model_spec(self.variant)

    def network(self) -> Network:
        return Network(self.spec, self.params)

    def save(self, path: str | Path) -> None:
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"adam.m/{k}": v for k, v in self.optimizer.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in self.optimizer.v.items()})
        meta = {
            "config": self.config.model_dump(), "variant": self.variant, "epoch": self.epoch,
            "adam_step": self.optimizer.step, "lr": self.optimizer.lr, "rng_state": self.rng_state,
            "schedule": self.schedule,
        }
        tensors["meta"] = _bytes_record(meta)
        tensors["adam.lr"] = np.array(self.optimizer.lr)
        tensors["adam.step"] = np.array(self.optimizer.step, dtype=np.int64)
        tensors["epoch"] = np.array(self.epoch, dtype=np.int64)
        write_tensor_file(path, self.config.digest(), tensors)

    @classmethod
    def load(cls, path: str | Path, expect_config: ExperimentConfig | None = None) -> "ModelCheckpoint":
        digest, tensors = read_tensor_file(path)
        meta = _from_bytes_record(tensors.pop("meta"))
        config = ExperimentConfig.model_validate(meta["config"])
        if config.digest() != digest:
            raise ValueError(f"{path}: stored config does not match header digest")
        if expect_config is not None and expect_config.digest() != digest:
            raise ValueError(f"{path}: checkpoint was written with a different config")

        def group(prefix):
            return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

        opt = AdamState(group("adam.m/"), group("adam.v/"), int(tensors["adam.step"]), float(tensors["adam.lr"]))
        return cls(config, meta["variant"], group("param/"), opt, int(tensors["epoch"]),
                   meta["rng_state"], None, meta.get("schedule", {}))


# ---------------------------------------------------------------------------
# data


@dataclass
class Utterance:
    id: str
    samples: np.ndarray  # [M, N] float32 waveform
    labels: np.ndarray  # anchor labels [T']
    frame_labels: np.ndarray  # [T]

    @property
    def n_frames(self) -> int:
        return len(self.frame_labels)


def spectrogram_input(wave: MultiChannelWaveform, cfg: ExperimentConfig) -> np.ndarray:
    """Waveform -> network input ``[T, F, M]`` complex."""
    d = cfg.dsp
    spec = stft(wave, d.window_len_s, d.hop_s, window=d.window, fft_size=d.resolved_fft_size)
    return np.transpose(spec.values, (1, 2, 0))


def batch_spectrogram(samples: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """``samples`` [B, M, N] -> ``[B, T, F, M]``; same framing as :func:`spectrogram_input`."""
    d = cfg.dsp
    frames = frame_signal(samples.astype(np.float64), d.win_samples, d.hop_samples)
    X = np.fft.rfft(frames * analysis_window(d.window, d.win_samples), n=d.resolved_fft_size, axis=-1)
    return np.transpose(X, (0, 2, 3, 1))


def utterance_from_wave(utt_id: str, wave: MultiChannelWaveform, labels: np.ndarray,
                        cfg: ExperimentConfig) -> Utterance:
    if wave.sample_rate != cfg.dsp.sample_rate:
        raise ValueError(f"{utt_id}: sample rate {wave.sample_rate} != configured {cfg.dsp.sample_rate}")
    T = num_frames(wave.n_samples, cfg.dsp.win_samples, cfg.dsp.hop_samples)
    labels = np.asarray(labels)[:T]
    if len(labels) != T:
        raise ValueError(f"{utt_id}: {len(labels)} labels for {T} frames")
    if labels.max(initial=0) >= cfg.n_outputs:
        raise ValueError(f"{utt_id}: label {labels.max()} outside the {cfg.n_outputs}-class inventory")
    b = cfg.backend
    return Utterance(utt_id, wave.samples.astype(np.float32), anchor_labels(labels, b.stack, b.stride), labels)


def load_utterances(manifest: DatasetManifest, cfg: ExperimentConfig) -> list[Utterance]:
    return [utterance_from_wave(e.id, manifest.read_mixture(e), manifest.read_labels(e), cfg)
            for e in manifest.entries]


def make_batches(utts: list[Utterance], batch_size: int, rng: np.random.Generator | None) -> list[list[int]]:
    """Bucket utterances by frame count, shuffle within buckets and over batches."""
    buckets: dict[int, list[int]] = {}
    for i, u in enumerate(utts):
        buckets.setdefault(u.samples.shape[1], []).append(i)
    batches = []
    for T in sorted(buckets):
        idx = np.array(buckets[T])
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
        batches += [idx[k : k + batch_size].tolist() for k in range(0, len(idx), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def batch_arrays(utts: list[Utterance], idx: list[int], cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    X = batch_spectrogram(np.stack([utts[i].samples for i in idx]), cfg)
    y = np.stack([utts[i].labels for i in idx])
    return X, y


def split_train_val(manifest: DatasetManifest, fraction: float, seed: int):
    ids = [e.id for e in manifest.entries]
    n_val = int(round(fraction * len(ids)))
    order = np.random.default_rng(seed).permutation(len(ids))
    val = {ids[i] for i in order[:n_val]}
    return [i for i in ids if i not in val], [i for i in ids if i in val]


# ---------------------------------------------------------------------------
# training


def initial_checkpoint(cfg: ExperimentConfig, variant: str | None = None) -> ModelCheckpoint:
    variant = variant or cfg.training.variant
    spec = cfg.model_spec(variant)
    rng = np.random.default_rng(derive_seed(cfg.training.seed, f"init/{variant}"))
    steering = None
    if cfg.frontend.init == "steering":
        geom = ArrayGeometry.rectangle(cfg.array.width_m, cfg.array.depth_m)
        az = 2 * np.pi * np.arange(spec.n_directions) / spec.n_directions
        freqs = np.arange(spec.n_bins) * cfg.dsp.sample_rate / cfg.dsp.resolved_fft_size
        steering = delay_and_sum_weights(geom, az, freqs, speed_of_sound=cfg.array.speed_of_sound)
    params = init_params(spec, rng, steering, cfg.frontend.init_noise)
    return ModelCheckpoint(cfg, variant, params, AdamState(lr=cfg.training.lr))


def evaluate_loss(net: Network, utts: list[Utterance], cfg: ExperimentConfig, batch_size: int) -> tuple[float, float]:
    """Mean per-utterance delayed CE and frame accuracy over ``utts``."""
    from .backend import delayed_cross_entropy

    total, correct, count, n = 0.0, 0, 0, 0
    d = net.spec.delay
    for idx in make_batches(utts, batch_size, None):
        X, y = batch_arrays(utts, idx, cfg)
        logits = net.forward(X).logits
        loss, _ = delayed_cross_entropy(logits, y, d)
        total += loss * len(idx)
        n += len(idx)
        pred = logits[:, d:].argmax(-1)
        ref = y[:, : y.shape[1] - d]
        correct += int((pred == ref).sum())
        count += ref.size
    return total / max(n, 1), correct / max(count, 1)


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def train(cfg: ExperimentConfig, manifest: DatasetManifest, out_dir: str | Path | None = None,
          variant: str | None = None, utterances: list[Utterance] | None = None,
          val_utterances: list[Utterance] | None = None) -> tuple[ModelCheckpoint, list[dict]]:
    """Train one pooling variant. Writes ``checkpoint.bin`` and ``metrics.jsonl`` under ``out_dir``.

    ``utterances`` may be passed pre-loaded (in manifest order) to skip audio I/O.
    When ``val_utterances`` is given it is used as the validation set and the
    whole of ``utterances`` is trained on.
    """
    tc = cfg.training
    ckpt = initial_checkpoint(cfg, variant)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
        (out / "config.ini").write_text(cfg.dumps())
    all_utts = utterances if utterances is not None else load_utterances(manifest, cfg)
    if val_utterances is None:
        train_ids, val_ids = split_train_val(manifest, tc.val_fraction, derive_seed(tc.seed, "split"))
        by_id = {u.id: u for u in all_utts}
        train_utts = [by_id[i] for i in train_ids]
        val_utts = [by_id[i] for i in val_ids] or train_utts
    else:
        train_utts, val_utts = all_utts, val_utterances
    rng = np.random.default_rng(derive_seed(tc.seed, f"shuffle/{ckpt.variant}"))
    net = ckpt.network()
    sched = PlateauSchedule(tc.lr, tc.patience)
    metrics: list[dict] = []
    if out:
        ckpt.rng_state = rng.bit_generator.state
        ckpt.save(out / "checkpoint.bin")
    for epoch in range(1, tc.epochs + 1):
        losses = []
        for idx in make_batches(train_utts, tc.batch_size, rng):
            X, y = batch_arrays(train_utts, idx, cfg)
            loss, grads, _ = net.loss_and_grads(X, y)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}; last checkpoint kept")
            clip_global_norm(grads, tc.clip_norm)
            adam_step(ckpt.params, grads, ckpt.optimizer, sched.lr, tc.beta1, tc.beta2, tc.eps)
            losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss, val_acc = evaluate_loss(net, val_utts, cfg, tc.batch_size)
        lr_used = sched.lr
        ckpt.optimizer.lr = sched.update(val_loss)
        ckpt.epoch = epoch
        ckpt.schedule = {"prev": sched.prev, "bad": sched.bad}
        record = {"epoch": epoch, "lr": lr_used, "next_lr": ckpt.optimizer.lr, "train_loss": train_loss,
                  "val_loss": val_loss, "val_frame_acc": val_acc, "variant": ckpt.variant}
        metrics.append(record)
        log.info("%s epoch %d train %.4f val %.4f acc %.3f lr %.2e", ckpt.variant, epoch, train_loss,
                 val_loss, val_acc, lr_used)
        if out:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(_json_line(record))
            ckpt.rng_state = rng.bit_generator.state
            ckpt.save(out / "checkpoint.bin")
    return ckpt, metrics
