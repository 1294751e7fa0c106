"""Acoustic-model back end: causal frame stacking, LSTM classifier, delayed CE."""
from __future__ import annotations

import numpy as np

from .nn import Params, log_softmax, lstm_backward, lstm_forward, lstm_init


def stack_anchors(n_frames: int, stack: int = 8, stride: int = 3) -> np.ndarray:
    if n_frames < stack:
        raise ValueError(f"utterance too short: {n_frames} frames < stack of {stack}")
    return np.arange(stack - 1, n_frames, stride)


def stack_frames(x: np.ndarray, stack: int = 8, stride: int = 3) -> np.ndarray:
    """``x`` [..., T, D] -> [..., T', stack*D]; row j holds frames ``a-stack+1 .. a`` for anchor ``a``."""
    anchors = stack_anchors(x.shape[-2], stack, stride)
    idx = anchors[:, None] - np.arange(stack - 1, -1, -1)[None, :]
    out = x[..., idx, :]  # [..., T', stack, D]
    return out.reshape(*out.shape[:-2], stack * x.shape[-1])


def unstack_adjoint(g: np.ndarray, n_frames: int, stack: int = 8, stride: int = 3) -> np.ndarray:
    """Adjoint of :func:`stack_frames`: scatter-add stacked gradients back to frames."""
    anchors = stack_anchors(n_frames, stack, stride)
    D = g.shape[-1] // stack
    g = g.reshape(*g.shape[:-1], stack, D)
    out = np.zeros((*g.shape[:-3], n_frames, D))
    for j in range(stack):
        out[..., anchors - (stack - 1) + j, :] += g[..., :, j, :]
    return out


def anchor_labels(labels: np.ndarray, stack: int = 8, stride: int = 3) -> np.ndarray:
    """Majority label over each anchor's window; ties go to the label seen latest in the window."""
    labels = np.asarray(labels)
    anchors = stack_anchors(len(labels), stack, stride)
    out = np.empty(len(anchors), dtype=np.int64)
    for j, a in enumerate(anchors):
        window = labels[a - stack + 1 : a + 1]
        vals, counts = np.unique(window, return_counts=True)
        tied = set(vals[counts == counts.max()].tolist())
        for lab in window[::-1]:
            if lab in tied:
                out[j] = lab
                break
    return out


def init_backend(rng: np.random.Generator, in_dim: int, hidden: int, layers: int, n_classes: int,
                 prefix: str = "backend") -> Params:
    params = lstm_init(rng, prefix, in_dim, hidden, layers)
    bound = 1.0 / np.sqrt(hidden)
    params[f"{prefix}.proj.W"] = rng.uniform(-bound, bound, (hidden, n_classes))
    params[f"{prefix}.proj.b"] = np.zeros(n_classes)
    return params


class Backend:
    def __init__(self, params: Params, prefix: str = "backend"):
        self.params = params
        self.prefix = prefix
        self._cache = None

    def forward(self, stacked: np.ndarray) -> np.ndarray:
        """``stacked`` [B, T', D] -> logits [B, T', C]."""
        Wx = self.params[f"{self.prefix}.l0.Wx"]
        if stacked.shape[-1] != Wx.shape[0]:
            raise ValueError(f"backend expects {Wx.shape[0]} inputs per frame, got {stacked.shape[-1]}")
        h, cache = lstm_forward(self.params, self.prefix, stacked)
        self._cache = (h, cache)
        return h @ self.params[f"{self.prefix}.proj.W"] + self.params[f"{self.prefix}.proj.b"]

    def backward(self, dlogits: np.ndarray) -> tuple[Params, np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backend backward called before forward")
        h, cache = self._cache
        pre = self.prefix
        H = h.shape[-1]
        C = dlogits.shape[-1]
        grads = {
            f"{pre}.proj.W": h.reshape(-1, H).T @ dlogits.reshape(-1, C),
            f"{pre}.proj.b": dlogits.sum(axis=(0, 1)),
        }
        lg, dx = lstm_backward(self.params, pre, cache, dlogits @ self.params[f"{pre}.proj.W"].T)
        grads.update(lg)
        return grads, dx


def backend_forward(stacked: np.ndarray, params: Params) -> np.ndarray:
    """Single-utterance wrapper: [T', D] -> logits [T', C]."""
    return Backend(params).forward(stacked[None])[0]


def delay_in_stacked_frames(input_frames: int, stride: int) -> int:
    return int(round(input_frames / stride))


def delayed_cross_entropy(logits: np.ndarray, labels: np.ndarray, delay: int):
    """Mean over valid positions of ``-log softmax(logits[t+delay])[labels[t]]``.

    ``logits`` [B, T', C], ``labels`` [B, T'] (2-D inputs are treated as B=1).
    Per-utterance means are averaged over the batch. Returns (loss, dlogits).
    """
    squeeze = logits.ndim == 2
    if squeeze:
        logits, labels = logits[None], np.asarray(labels)[None]
    B, T, C = logits.shape
    n_valid = T - delay
    if delay < 0 or n_valid <= 0:
        raise ValueError(f"no valid positions: {T} frames with delay {delay}")
    lab = np.asarray(labels)[:, :n_valid]
    shifted = logits[:, delay:]
    logp = log_softmax(shifted)
    nll = -np.take_along_axis(logp, lab[..., None], axis=-1)[..., 0]
    loss = float(nll.mean())
    grad = np.exp(logp)
    np.put_along_axis(grad, lab[..., None], np.take_along_axis(grad, lab[..., None], axis=-1) - 1.0, axis=-1)
    grad /= B * n_valid
    dlogits = np.zeros_like(logits)
    dlogits[:, delay:] = grad
    return loss, (dlogits[0] if squeeze else dlogits)
