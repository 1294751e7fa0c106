"""Spatial attention over look directions and the pooling layers built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import (
    Params,
    lstm_backward,
    lstm_forward,
    lstm_init,
    softmax,
    softmax_backward,
)

POOLING_KINDS = ("none", "max", "average", "attention")
ATTENTION_MODES = ("online", "offline", "latency")


@dataclass(frozen=True)
class AttentionMode:
    """When the attention scores are read out.

    ``online``: causal moving average of raw scores over ``window`` frames.
    ``offline``: raw scores of the last frame, broadcast to every frame.
    ``latency``: the subnet only sees frames ``0..latency_frames``; the mean of
    their raw scores (or the score at that frame with ``latency_reduce="frame"``)
    is broadcast to every frame.
    """

    kind: str = "online"
    window: int = 50
    latency_frames: int = 50
    latency_reduce: str = "mean"

    def __post_init__(self):
        if self.kind not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.kind!r}")
        if self.window < 1:
            raise ValueError("online window must be >= 1 frame")
        if self.latency_frames < 0:
            raise ValueError("latency frame index must be >= 0")
        if self.latency_reduce not in ("mean", "frame"):
            raise ValueError(f"unknown latency reduction {self.latency_reduce!r}")

    def describe(self) -> str:
        if self.kind == "online":
            return f"online(window={self.window})"
        if self.kind == "latency":
            return f"latency(frames={self.latency_frames},{self.latency_reduce})"
        return "offline"


@dataclass
class AttentionTrace:
    scores: np.ndarray  # [T, P]
    mode: AttentionMode

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("attention scores must be [T, P]")
        if np.any(s < 0) or np.any(np.abs(s.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("attention rows must lie on the probability simplex")
        self.scores = s


def init_attention(rng: np.random.Generator, n_directions: int, n_features: int,
                   hidden: int, layers: int, prefix: str = "attention") -> Params:
    params = lstm_init(rng, prefix, n_directions * n_features, hidden, layers)
    bound = 1.0 / np.sqrt(hidden)
    params[f"{prefix}.proj.W"] = rng.uniform(-bound, bound, (hidden, n_directions))
    params[f"{prefix}.proj.b"] = np.zeros(n_directions)
    return params


def _moving_average(s: np.ndarray, w: int) -> np.ndarray:
    """Causal mean over the trailing ``w`` frames along axis -2 of [..., T, P]."""
    T = s.shape[-2]
    pad = [(0, 0)] * s.ndim
    pad[-2] = (w - 1, 0)
    win = sliding_window_view(np.pad(s, pad), w, axis=-2)  # [..., T, P, w]
    counts = np.minimum(np.arange(1, T + 1), w).astype(np.float64)
    return win.sum(axis=-1) / counts[:, None]


def _moving_average_adjoint(g: np.ndarray, w: int) -> np.ndarray:
    T = g.shape[-2]
    counts = np.minimum(np.arange(1, T + 1), w).astype(np.float64)
    q = g / counts[:, None]
    pad = [(0, 0)] * g.ndim
    pad[-2] = (0, w - 1)
    return sliding_window_view(np.pad(q, pad), w, axis=-2).sum(axis=-1)


class SpatialAttention:
    """Attention subnet: LSTM stack over flattened Z[t], projection to P, softmax, mode readout."""

    def __init__(self, params: Params, mode: AttentionMode, prefix: str = "attention"):
        self.params = params
        self.mode = mode
        self.prefix = prefix
        self._cache = None

    def forward(self, Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``Z`` [B, T, P, L] -> (attention [B, T, P], raw scores [B, T_run, P])."""
        B, T, P, L = Z.shape
        if T == 0:
            raise ValueError("attention needs at least one frame")
        mode = self.mode
        T_run = T
        k = None
        if mode.kind == "latency":
            k = min(mode.latency_frames, T - 1)
            T_run = k + 1
        x = Z[:, :T_run].reshape(B, T_run, P * L)
        h, lstm_cache = lstm_forward(self.params, self.prefix, x)
        logits = h @ self.params[f"{self.prefix}.proj.W"] + self.params[f"{self.prefix}.proj.b"]
        s = softmax(logits)
        if mode.kind == "online":
            A = _moving_average(s, mode.window)
        elif mode.kind == "offline":
            A = np.broadcast_to(s[:, -1:], (B, T, P)).copy()
        elif mode.latency_reduce == "mean":
            A = np.broadcast_to(s.mean(axis=1, keepdims=True), (B, T, P)).copy()
        else:
            A = np.broadcast_to(s[:, k : k + 1], (B, T, P)).copy()
        self._cache = (Z.shape, T_run, h, lstm_cache, s)
        return A, s

    def backward(self, dA: np.ndarray) -> tuple[Params, np.ndarray, np.ndarray]:
        """Returns (parameter grads, dZ via the subnet, d raw-score-logits)."""
        if self._cache is None:
            raise RuntimeError("attention backward called before forward")
        (B, T, P, L), T_run, h, lstm_cache, s = self._cache
        mode = self.mode
        if mode.kind == "online":
            ds = _moving_average_adjoint(dA, mode.window)
        elif mode.kind == "offline":
            ds = np.zeros_like(s)
            ds[:, -1] = dA.sum(axis=1)
        elif mode.latency_reduce == "mean":
            ds = np.broadcast_to(dA.sum(axis=1, keepdims=True) / T_run, s.shape).copy()
        else:
            ds = np.zeros_like(s)
            ds[:, -1] = dA.sum(axis=1)
        dlogits = softmax_backward(s, ds)
        pre = self.prefix
        H = h.shape[-1]
        grads = {
            f"{pre}.proj.W": h.reshape(-1, H).T @ dlogits.reshape(-1, P),
            f"{pre}.proj.b": dlogits.sum(axis=(0, 1)),
        }
        dh = dlogits @ self.params[f"{pre}.proj.W"].T
        lg, dx = lstm_backward(self.params, pre, lstm_cache, dh)
        grads.update(lg)
        dZ = np.zeros((B, T, P, L))
        dZ[:, :T_run] = dx.reshape(B, T_run, P, L)
        return grads, dZ, dlogits


def attention_forward(Z: np.ndarray, params: Params, mode: AttentionMode) -> AttentionTrace:
    """Single-utterance convenience wrapper: ``Z`` [T, P, L] -> trace."""
    A, _ = SpatialAttention(params, mode).forward(Z[None])
    return AttentionTrace(A[0], mode)


def attention_pool(Z: np.ndarray, A) -> np.ndarray:
    """Weighted sum over directions: ``Z`` [..., T, P, L], ``A`` [..., T, P] -> [..., T, L]."""
    if isinstance(A, AttentionTrace):
        A = A.scores
    if A.shape != Z.shape[:-1]:
        raise ValueError(f"attention shape {A.shape} does not match features {Z.shape[:-1]}")
    return np.einsum("...tp,...tpl->...tl", A, Z)


def attention_pool_backward(Z: np.ndarray, A: np.ndarray, dpooled: np.ndarray):
    """Returns (dZ direct path, dA)."""
    dZ = A[..., None] * dpooled[..., None, :]
    dA = np.einsum("...tl,...tpl->...tp", dpooled, Z)
    return dZ, dA


def baseline_pool(Z: np.ndarray, kind: str) -> np.ndarray:
    """Pooling without attention over the direction axis of ``Z`` [..., T, P, L]."""
    if kind == "none":
        return Z.reshape(*Z.shape[:-2], Z.shape[-2] * Z.shape[-1])
    if kind == "max":
        return Z.max(axis=-2)
    if kind == "average":
        return Z.mean(axis=-2)
    raise ValueError(f"unknown pooling kind {kind!r}")


def baseline_pool_backward(Z: np.ndarray, kind: str, dpooled: np.ndarray) -> np.ndarray:
    if kind == "none":
        return dpooled.reshape(Z.shape)
    if kind == "average":
        return np.broadcast_to(dpooled[..., None, :] / Z.shape[-2], Z.shape).copy()
    if kind == "max":
        idx = Z.argmax(axis=-2)
        mask = np.arange(Z.shape[-2])[:, None] == idx[..., None, :]
        return mask * dpooled[..., None, :]
    raise ValueError(f"unknown pooling kind {kind!r}")


def pooled_dim(kind: str, n_directions: int, n_features: int) -> int:
    return n_directions * n_features if kind == "none" else n_features
