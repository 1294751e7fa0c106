"""End-to-end network: front end -> (attention) pooling -> stacked LSTM back end."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as att
from .backend import (
    Backend,
    delayed_cross_entropy,
    init_backend,
    stack_frames,
    unstack_adjoint,
)
from .beamformer import FrontEnd, FrontEndParams, init_frontend
from .nn import Params, softmax

VARIANTS = ("none", "max", "average", "attention-online", "attention-latency", "attention-offline")


def parse_variant(variant: str) -> tuple[str, str | None]:
    """``"attention-online"`` -> ("attention", "online"); ``"max"`` -> ("max", None)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown pooling variant {variant!r}; expected one of {VARIANTS}")
    if variant.startswith("attention-"):
        return "attention", variant.split("-", 1)[1]
    return variant, None


@dataclass(frozen=True)
class ModelSpec:
    n_channels: int
    n_bins: int
    n_directions: int = 6
    n_features: int = 32
    n_classes: int = 11
    variant: str = "attention-online"
    attention_mode: att.AttentionMode = field(default_factory=att.AttentionMode)
    attention_hidden: int = 64
    attention_layers: int = 2
    backend_hidden: int = 128
    backend_layers: int = 2
    stack: int = 8
    stride: int = 3
    delay: int = 3

    @property
    def pooling(self) -> str:
        return parse_variant(self.variant)[0]

    @property
    def mode(self) -> att.AttentionMode:
        kind = parse_variant(self.variant)[1]
        if kind is None:
            return self.attention_mode
        m = self.attention_mode
        return att.AttentionMode(kind, m.window, m.latency_frames, m.latency_reduce)


def init_params(spec: ModelSpec, rng: np.random.Generator, steering: np.ndarray | None = None,
                init_noise: float = 0.01) -> Params:
    params = init_frontend(rng, spec.n_directions, spec.n_features, spec.n_bins, spec.n_channels,
                           steering=steering, noise_std=init_noise).to_params()
    if spec.pooling == "attention":
        params.update(att.init_attention(rng, spec.n_directions, spec.n_features,
                                         spec.attention_hidden, spec.attention_layers))
    d = att.pooled_dim(spec.pooling, spec.n_directions, spec.n_features)
    params.update(init_backend(rng, d * spec.stack, spec.backend_hidden, spec.backend_layers, spec.n_classes))
    return params


@dataclass
class ForwardResult:
    logits: np.ndarray  # [B, T', C]
    features: np.ndarray  # [B, T, P, L]
    attention: np.ndarray | None  # [B, T, P]
    raw_scores: np.ndarray | None


class Network:
    """Holds references to a parameter map and runs forward/backward over a batch."""

    def __init__(self, spec: ModelSpec, params: Params):
        self.spec = spec
        self.params = params
        self._state = None

    def forward(self, X: np.ndarray) -> ForwardResult:
        """``X`` [B, T, F, M] complex STFT input."""
        spec = self.spec
        fe = FrontEnd(FrontEndParams.from_params(self.params))
        Z = fe.forward(X)
        A = s = None
        subnet = None
        if spec.pooling == "attention":
            subnet = att.SpatialAttention(self.params, spec.mode)
            A, s = subnet.forward(Z)
            pooled = att.attention_pool(Z, A)
        else:
            pooled = att.baseline_pool(Z, spec.pooling)
        stacked = stack_frames(pooled, spec.stack, spec.stride)
        be = Backend(self.params)
        logits = be.forward(stacked)
        self._state = (fe, subnet, be, Z, A, pooled.shape[-2])
        return ForwardResult(logits, Z, A, s)

    def backward(self, dlogits: np.ndarray, need_input_grad: bool = False):
        if self._state is None:
            raise RuntimeError("backward called before forward")
        spec = self.spec
        fe, subnet, be, Z, A, T = self._state
        grads, dstacked = be.backward(dlogits)
        dpooled = unstack_adjoint(dstacked, T, spec.stack, spec.stride)
        if spec.pooling == "attention":
            dZ, dA = att.attention_pool_backward(Z, A, dpooled)
            ag, dZ_sub, _ = subnet.backward(dA)
            grads.update(ag)
            dZ = dZ + dZ_sub
        else:
            dZ = att.baseline_pool_backward(Z, spec.pooling, dpooled)
        out = fe.backward(dZ, need_input_grad=need_input_grad)
        gW, gG = out[0], out[1]
        grads["frontend.W_re"], grads["frontend.W_im"] = gW.real.copy(), gW.imag.copy()
        grads["frontend.G_re"], grads["frontend.G_im"] = gG.real.copy(), gG.imag.copy()
        if need_input_grad:
            return grads, out[2]
        return grads

    def loss_and_grads(self, X: np.ndarray, labels: np.ndarray):
        """Delayed cross-entropy on anchor ``labels`` [B, T'] and its parameter gradients."""
        res = self.forward(X)
        loss, dlogits = delayed_cross_entropy(res.logits, labels, self.spec.delay)
        return loss, self.backward(dlogits), res

    def loss(self, X: np.ndarray, labels: np.ndarray) -> float:
        res = self.forward(X)
        return delayed_cross_entropy(res.logits, labels, self.spec.delay)[0]


def posteriors(logits: np.ndarray) -> np.ndarray:
    return softmax(logits)
