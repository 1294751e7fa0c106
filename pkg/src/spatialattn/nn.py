"""Batched LSTM stack and softmax helpers with hand-written backward passes.

Parameters live in flat ``dict[str, np.ndarray]`` maps keyed by
``"<prefix>.l<k>.Wx"`` etc., which is what the optimizer and the checkpoint
writer consume. Gate order inside the 4H axis is (input, forget, output, cell candidate).
"""
from __future__ import annotations

import numpy as np

Params = dict[str, np.ndarray]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(p, dp, axis=-1):
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def lstm_init(rng: np.random.Generator, prefix: str, in_dim: int, hidden: int, layers: int) -> Params:
    bound = 1.0 / np.sqrt(hidden)
    params = {}
    d = in_dim
    for k in range(layers):
        params[f"{prefix}.l{k}.Wx"] = rng.uniform(-bound, bound, (d, 4 * hidden))
        params[f"{prefix}.l{k}.Wh"] = rng.uniform(-bound, bound, (hidden, 4 * hidden))
        b = rng.uniform(-bound, bound, 4 * hidden)
        b[hidden : 2 * hidden] = 1.0
        params[f"{prefix}.l{k}.b"] = b
        d = hidden
    return params


def lstm_layers(params: Params, prefix: str) -> int:
    n = 0
    while f"{prefix}.l{n}.Wx" in params:
        n += 1
    return n


def lstm_forward(params: Params, prefix: str, x: np.ndarray):
    """Run the stack over ``x`` of shape [B, T, D]; returns top hidden states [B, T, H] and a cache."""
    B, T, _ = x.shape
    caches = []
    inp = x
    for k in range(lstm_layers(params, prefix)):
        Wx, Wh, b = (params[f"{prefix}.l{k}.{n}"] for n in ("Wx", "Wh", "b"))
        H = Wh.shape[0]
        pre_x = inp @ Wx + b
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.empty((B, T, H))
        cs = np.empty((B, T, H))
        gates = np.empty((B, T, 4 * H))
        for t in range(T):
            a = pre_x[:, t] + h @ Wh
            gt = gates[:, t]
            gt[:, : 3 * H] = sigmoid(a[:, : 3 * H])
            gt[:, 3 * H :] = np.tanh(a[:, 3 * H :])
            c = gt[:, H : 2 * H] * c + gt[:, :H] * gt[:, 3 * H :]
            h = gt[:, 2 * H : 3 * H] * np.tanh(c)
            hs[:, t], cs[:, t] = h, c
        caches.append((inp, gates, hs, cs))
        inp = hs
    return inp, caches


def lstm_backward(params: Params, prefix: str, caches, dh_top: np.ndarray):
    """BPTT through the stack. Returns (grads, d_input)."""
    grads = {}
    dh_seq = dh_top
    for k in reversed(range(len(caches))):
        inp, gates, hs, cs = caches[k]
        Wx, Wh = params[f"{prefix}.l{k}.Wx"], params[f"{prefix}.l{k}.Wh"]
        B, T, H = hs.shape
        da_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            i, f = gates[:, t, :H], gates[:, t, H : 2 * H]
            o, g = gates[:, t, 2 * H : 3 * H], gates[:, t, 3 * H :]
            c = cs[:, t]
            c_prev = cs[:, t - 1] if t > 0 else np.zeros_like(c)
            tc = np.tanh(c)
            dh = dh_seq[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            da = da_all[:, t]
            da[:, :H] = dc * g * i * (1.0 - i)
            da[:, H : 2 * H] = dc * c_prev * f * (1.0 - f)
            da[:, 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
            da[:, 3 * H :] = dc * i * (1.0 - g * g)
            dh_next = da @ Wh.T
            dc_next = dc * f
        h_prev = np.concatenate([np.zeros((B, 1, H)), hs[:, :-1]], axis=1)
        D = inp.shape[-1]
        grads[f"{prefix}.l{k}.Wx"] = inp.reshape(-1, D).T @ da_all.reshape(-1, 4 * H)
        grads[f"{prefix}.l{k}.Wh"] = h_prev.reshape(-1, H).T @ da_all.reshape(-1, 4 * H)
        grads[f"{prefix}.l{k}.b"] = da_all.sum(axis=(0, 1))
        dh_seq = da_all @ Wx.T
    return grads, dh_seq
