"""Diagnostics: filter directivity, attention statistics, and evaluation reports."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import delayed_cross_entropy
from .config import ExperimentConfig
from .scene import SPEED_OF_SOUND, ArrayGeometry, DatasetManifest, unit_direction
from .training import (
    ModelCheckpoint,
    Utterance,
    batch_arrays,
    load_utterances,
    make_batches,
)


@dataclass
class DirectivityGrid:
    p: int
    azimuths_deg: np.ndarray  # [A]
    elevations_deg: np.ndarray  # [E]
    gains_db: np.ndarray  # [A, E]

    @property
    def argmax(self) -> tuple[float, float]:
        # a planar array cannot tell +el from -el; ties go to the upper hemisphere
        flipped = self.gains_db[:, ::-1]
        i, j = np.unravel_index(np.argmax(flipped), flipped.shape)
        return float(self.azimuths_deg[i]), float(self.elevations_deg[::-1][j])

    @property
    def dynamic_range_db(self) -> float:
        return float(-self.gains_db.min())


def _grid(step: float, lo: float, hi: float, include_hi: bool) -> np.ndarray:
    if not step > 0 or step > hi - lo:
        raise ValueError(f"degenerate grid step {step}")
    n = int(np.floor((hi - lo) / step + 1e-9))
    if include_hi:
        n += 1
    return lo + step * np.arange(n)


def directivity(W: np.ndarray, geom: ArrayGeometry, sample_rate: int, fft_size: int,
                az_step: float = 5.0, el_step: float = 5.0,
                speed_of_sound: float = SPEED_OF_SOUND) -> list[DirectivityGrid]:
    """White-noise directivity of each spatial filter.

    For every grid direction the frequency-summed response power
    ``R_p = sum_f |W_p[f]^H d(theta, f)|^2`` is computed with the plane-wave
    steering vector at each bin's centre frequency, then expressed in dB
    relative to the filter's most amplified direction.
    """
    W = np.asarray(W, dtype=np.complex128)
    P, F, M = W.shape
    if M != geom.n_mics:
        raise ValueError(f"filters have {M} channels but the geometry has {geom.n_mics} microphones")
    az = _grid(az_step, 0.0, 360.0, include_hi=False)
    el = _grid(el_step, -90.0, 90.0, include_hi=True)
    A, E = np.meshgrid(np.deg2rad(az), np.deg2rad(el), indexing="ij")
    u = unit_direction(A, E).reshape(-1, 3)
    freqs = np.arange(F) * sample_rate / fft_size
    # plane-wave responses for every direction: exp(-2j pi f tau), tau = -(u . p_m) / c
    pos = geom.mic_positions - geom.mic_positions.mean(axis=0)
    tau = -(u @ pos.T) / speed_of_sound  # [D, M]
    grids = []
    for p in range(P):
        R = np.zeros(len(u))
        for f in range(F):
            d = np.exp(-2j * np.pi * freqs[f] * tau)
            R += np.abs(d @ np.conj(W[p, f])) ** 2
        peak = R.max()
        if not peak > 0:
            raise ValueError(f"filter {p} has zero response in every direction")
        gains = 10.0 * np.log10(R / peak)
        grids.append(DirectivityGrid(p, az, el, gains.reshape(len(az), len(el))))
    return grids


def write_directivity_csv(grids: list[DirectivityGrid], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "azimuth_deg", "elevation_deg", "gain_db"])
        for g in grids:
            for i, a in enumerate(g.azimuths_deg):
                for j, e in enumerate(g.elevations_deg):
                    w.writerow([g.p, f"{a:g}", f"{e:g}", f"{g.gains_db[i, j]:.6f}"])


def write_filters_csv(W: np.ndarray, path: str | Path) -> None:
    """Spatial filters as rows ``p, f, m, real, imag``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "f", "m", "real", "imag"])
        for (p, f, m), v in np.ndenumerate(W):
            w.writerow([p, f, m, repr(float(v.real)), repr(float(v.imag))])


# ---------------------------------------------------------------------------
# attention statistics


def attention_entropy(A: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of ``A`` [..., P]; 0 log 0 is taken as 0."""
    A = np.asarray(A, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(A > 0, A * np.log(A), 0.0)
    return -terms.sum(axis=-1)


def attention_stats(traces: dict[str, np.ndarray], hop_s: float, early_s: float = 2.0,
                    edge_s: float = 0.5) -> dict:
    """Summary of attention traces (utterance id -> [T, P]).

    ``early``/``late`` split each trace at ``early_s``; the warm-up comparison
    contrasts the first and the last ``edge_s`` seconds of each utterance.
    """
    if not traces:
        raise ValueError("no attention traces")
    n_early = max(1, int(round(early_s / hop_s)))
    n_edge = max(1, int(round(edge_s / hop_s)))
    early, late, first, last, all_rows = [], [], [], [], []
    warm = 0
    for uid in sorted(traces):
        A = np.asarray(traces[uid])
        H = attention_entropy(A)
        early.append(H[:n_early])
        if len(H) > n_early:
            late.append(H[n_early:])
        h_first, h_last = H[:n_edge].mean(), H[-n_edge:].mean()
        first.append(h_first)
        last.append(h_last)
        warm += int(h_first > h_last)
        all_rows.append(A)
    rows = np.concatenate(all_rows)
    H_all = attention_entropy(rows)
    P = rows.shape[1]
    return {
        "n_utterances": len(traces),
        "n_directions": P,
        "max_entropy": float(np.log(P)),
        "mean_entropy": float(H_all.mean()),
        "mean_entropy_early": float(np.concatenate(early).mean()),
        "mean_entropy_late": float(np.concatenate(late).mean()) if late else None,
        "mean_entropy_first_edge": float(np.mean(first)),
        "mean_entropy_last_edge": float(np.mean(last)),
        "warmup_fraction": warm / len(traces),
        "effective_directions": float(np.exp(H_all).mean()),
        "per_filter_mean": [float(v) for v in rows.mean(axis=0)],
    }


def write_attention_csv(traces: dict[str, np.ndarray], path: str | Path) -> None:
    P = next(iter(traces.values())).shape[1] if traces else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", "frame"] + [f"A_{p + 1}" for p in range(P)])
        for uid in sorted(traces):
            for t, row in enumerate(traces[uid]):
                w.writerow([uid, t] + [f"{v:.9f}" for v in row])


def write_logits_csv(logits: dict[str, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["utterance_id", "stacked_frame", "class", "logit"])
        for uid in sorted(logits):
            for (t, c), v in np.ndenumerate(logits[uid]):
                w.writerow([uid, t, c, f"{v:.9f}"])


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Inference:
    logits: dict[str, np.ndarray]  # id -> [T', C]
    attention: dict[str, np.ndarray]  # id -> [T, P] (attention variants only)


def run_inference(ckpt: ModelCheckpoint, utts: list[Utterance], cfg: ExperimentConfig | None = None,
                  batch_size: int = 16) -> Inference:
    cfg = cfg or ckpt.config
    net = ckpt.network()
    logits, attention = {}, {}
    for idx in make_batches(utts, batch_size, None):
        X, _ = batch_arrays(utts, idx, cfg)
        res = net.forward(X)
        for j, i in enumerate(idx):
            logits[utts[i].id] = res.logits[j]
            if res.attention is not None:
                attention[utts[i].id] = res.attention[j]
    return Inference(logits, attention)


def _majority(x: np.ndarray) -> int:
    return int(np.bincount(x).argmax())


def evaluate(ckpt: ModelCheckpoint, data: DatasetManifest | list[Utterance], batch_size: int = 16,
             inference: Inference | None = None) -> dict:
    """Frame accuracy, utterance accuracy and mean delayed cross-entropy.

    Frame predictions are read with the training delay, so prediction at
    stacked frame ``t + d`` is scored against the anchor label at ``t``.
    Utterance accuracy compares the majority predicted label with the
    majority reference label.
    """
    cfg = ckpt.config
    utts = data if isinstance(data, list) else load_utterances(data, cfg)
    if not utts:
        raise ValueError("nothing to evaluate")
    n_out = cfg.n_outputs
    for u in utts:
        if u.labels.max(initial=0) >= n_out:
            raise ValueError(f"{u.id}: label {u.labels.max()} outside the model's {n_out}-class inventory")
    inf = inference or run_inference(ckpt, utts, cfg, batch_size)
    d = ckpt.spec.delay
    correct = total = utt_ok = 0
    ce = []
    for u in utts:
        lg = inf.logits[u.id]
        if lg.shape[-1] != n_out:
            raise ValueError(f"model has {lg.shape[-1]} outputs, data expects {n_out}")
        loss, _ = delayed_cross_entropy(lg, u.labels, d)
        ce.append(loss)
        ref = u.labels[: len(u.labels) - d]
        pred = lg[d:].argmax(-1)
        correct += int((pred == ref).sum())
        total += len(ref)
        utt_ok += int(_majority(pred) == _majority(ref))
    report = {
        "variant": ckpt.variant,
        "config_digest": cfg.digest(),
        "n_utterances": len(utts),
        "n_frames": total,
        "frame_accuracy": correct / total,
        "utterance_accuracy": utt_ok / len(utts),
        "mean_cross_entropy": float(np.mean(ce)),
    }
    if inf.attention:
        report["attention"] = attention_stats(inf.attention, cfg.dsp.hop_s)
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"
