"""Factored complex linear projection front end.

Spatial filtering ``Y_p[t,f] = W_p[f]^H X[t,f]`` followed by per-direction
spectral projections ``Z_{p,l}[t] = log(|sum_f Y_p[t,f] G_l[f]| + floor)``.

Complex quantities are carried as complex arrays internally, but every
trainable tensor is stored as separate real and imaginary float64 arrays.
Gradients of the real loss follow the convention
``grad(z) = dL/dRe(z) + 1j * dL/dIm(z)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import LOG_FLOOR
from .nn import Params


@dataclass
class FrontEndParams:
    W: np.ndarray  # [P, F, M] complex
    G: np.ndarray  # [L, F] complex

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.complex128)
        self.G = np.asarray(self.G, dtype=np.complex128)
        if self.W.ndim != 3 or self.G.ndim != 2:
            raise ValueError("W must be [P, F, M] and G must be [L, F]")
        if self.W.shape[1] != self.G.shape[1]:
            raise ValueError(f"bin count mismatch: W has {self.W.shape[1]}, G has {self.G.shape[1]}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.G))):
            raise ValueError("front-end parameters must be finite")

    @property
    def shape(self) -> dict:
        P, F, M = self.W.shape
        return {"P": P, "F": F, "M": M, "L": self.G.shape[0]}

    def to_params(self, prefix: str = "frontend") -> Params:
        return {
            f"{prefix}.W_re": self.W.real.copy(), f"{prefix}.W_im": self.W.imag.copy(),
            f"{prefix}.G_re": self.G.real.copy(), f"{prefix}.G_im": self.G.imag.copy(),
        }

    @classmethod
    def from_params(cls, params: Params, prefix: str = "frontend") -> "FrontEndParams":
        return cls(
            W=params[f"{prefix}.W_re"] + 1j * params[f"{prefix}.W_im"],
            G=params[f"{prefix}.G_re"] + 1j * params[f"{prefix}.G_im"],
        )


def init_frontend(rng: np.random.Generator, n_directions: int, n_features: int, n_bins: int,
                  n_channels: int, steering: np.ndarray | None = None,
                  noise_std: float = 0.01) -> FrontEndParams:
    """Initial parameters.

    With ``steering`` ([P, F, M] delay-and-sum weights) the filters start at
    those weights plus complex noise of std ``noise_std``; without it they are
    unit complex Gaussian. ``G`` is complex Gaussian with std 1/sqrt(F).
    """
    shape = (n_directions, n_bins, n_channels)
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)
    if steering is not None:
        if steering.shape != shape:
            raise ValueError(f"steering weights have shape {steering.shape}, expected {shape}")
        W = steering + noise_std * noise
    else:
        W = noise
    gshape = (n_features, n_bins)
    G = (rng.standard_normal(gshape) + 1j * rng.standard_normal(gshape)) / np.sqrt(2 * n_bins)
    return FrontEndParams(W, G)


def beamform(X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``X`` [..., T, F, M], ``W`` [P, F, M] -> ``Y`` [..., T, P, F]."""
    X = np.asarray(X)
    if X.shape[-1] != W.shape[-1]:
        raise ValueError(f"channel mismatch: input has {X.shape[-1]} channels, weights expect {W.shape[-1]}")
    if X.shape[-2] != W.shape[1]:
        raise ValueError(f"bin mismatch: input has {X.shape[-2]} bins, weights expect {W.shape[1]}")
    # batched over frequency: [F, N, M] @ [F, M, P]
    lead = X.shape[:-2]
    F, M = X.shape[-2:]
    Xf = np.moveaxis(X.reshape(-1, F, M), 1, 0)
    Yf = Xf @ np.conj(W).transpose(1, 2, 0)
    return np.moveaxis(Yf, 0, -1).reshape(*lead, W.shape[0], F)


def clp_project(Y: np.ndarray, G: np.ndarray) -> np.ndarray:
    if Y.shape[-1] != G.shape[1]:
        raise ValueError(f"bin mismatch: Y has {Y.shape[-1]} bins, G has {G.shape[1]}")
    return Y @ G.T


def clp_features(Y: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``Y`` [..., P, F], ``G`` [L, F] -> ``Z`` [..., P, L]. The product is not conjugated."""
    return np.log(np.abs(clp_project(Y, G)) + LOG_FLOOR)


class FrontEnd:
    """Forward/backward for the front end, retaining intermediates between calls.

    Internally works frequency-major (``[F, N, .]`` with N = batch*frames) so
    that both the spatial filtering and the spectral projection are plain
    matrix products without large transposes.
    """

    def __init__(self, params: FrontEndParams):
        self.params = params
        self._cache = None

    def forward(self, X: np.ndarray) -> np.ndarray:
        """``X`` [..., T, F, M] -> ``Z`` [..., T, P, L]."""
        W, G = self.params.W, self.params.G
        lead = X.shape[:-2]
        F, M = X.shape[-2:]
        if M != W.shape[2]:
            raise ValueError(f"channel mismatch: input has {M} channels, weights expect {W.shape[2]}")
        if F != W.shape[1]:
            raise ValueError(f"bin mismatch: input has {F} bins, weights expect {W.shape[1]}")
        Xf = np.moveaxis(X, -2, 0).reshape(F, -1, M)  # [F, N, M]
        N = Xf.shape[1]
        P, L = W.shape[0], G.shape[0]
        Yf = Xf @ np.conj(W).transpose(1, 2, 0)  # [F, N, P]
        Ut = G @ Yf.reshape(F, N * P)  # [L, N*P]
        mag = np.abs(Ut)
        self._cache = (lead, Xf, Yf, Ut, mag)
        Z = np.log(mag + LOG_FLOOR).reshape(L, N, P).transpose(1, 2, 0)
        return np.ascontiguousarray(Z).reshape(*lead, P, L)

    def backward(self, dZ: np.ndarray, need_input_grad: bool = False):
        """Returns ``(gW, gG[, gX])`` as complex gradients."""
        if self._cache is None:
            raise RuntimeError("frontend backward called before forward")
        lead, Xf, Yf, Ut, mag = self._cache
        W, G = self.params.W, self.params.G
        F, N, M = Xf.shape
        P, L = W.shape[0], G.shape[0]
        dZt = np.ascontiguousarray(dZ.reshape(N, P, L).transpose(2, 0, 1)).reshape(L, N * P)
        with np.errstate(invalid="ignore", divide="ignore"):
            phase = np.where(mag > 0, Ut / np.where(mag > 0, mag, 1.0), 0.0)
        gUt = (dZt / (mag + LOG_FLOOR)) * phase  # [L, N*P]
        Y2 = Yf.reshape(F, N * P)
        # gG[l,f] = sum_n gU[n,l] conj(Y[n,f])
        gG = np.conj(np.conj(gUt) @ Y2.T)
        # gY[f,n] = sum_l gU[n,l] conj(G[l,f])
        gYf = (np.conj(G).T @ gUt).reshape(F, N, P)
        # gW[p,f,m] = sum_n conj(gY[n,p,f]) X[n,f,m]
        gW = np.conj(gYf.transpose(0, 2, 1) @ np.conj(Xf)).transpose(1, 0, 2)
        if not need_input_grad:
            return gW, gG
        gXf = gYf @ W.transpose(1, 0, 2)  # [F, N, M]
        gX = np.moveaxis(gXf, 0, 1).reshape(*lead, F, M)
        return gW, gG, gX


def frontend_forward(X: np.ndarray, params: FrontEndParams) -> tuple[np.ndarray, FrontEnd]:
    fe = FrontEnd(params)
    return fe.forward(X), fe


def spectrogram_to_input(spec) -> np.ndarray:
    """ComplexSpectrogram [M, T, F] -> network input layout [T, F, M]."""
    return np.transpose(spec.values, (1, 2, 0))
