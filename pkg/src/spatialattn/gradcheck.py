"""Finite-difference verification of the composite network's analytic gradients.

The check runs on a deliberately tiny model (two mics, three look directions,
nine frequency bins, twelve frames) so that every scalar parameter can be
perturbed individually within a couple of minutes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMode
from .model import VARIANTS, ModelSpec, Network, init_params

TOLERANCE = 1e-4
EPS_SWEEP = (1e-5, 1e-6, 1e-7)


@dataclass
class TensorCheck:
    name: str
    status: str  # "ok", "FAIL" or "absent"
    max_rel_err: float = float("nan")
    size: int = 0


@dataclass
class GradcheckReport:
    variant: str
    eps: float
    tensors: list[TensorCheck] = field(default_factory=list)
    min_margin: float | None = None  # max pooling: smallest top-1/top-2 gap

    @property
    def max_rel_err(self) -> float:
        errs = [t.max_rel_err for t in self.tensors if t.status != "absent"]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return all(t.status != "FAIL" for t in self.tensors)

    def lines(self) -> list[str]:
        out = [f"variant {self.variant} eps {self.eps:g}"]
        for t in self.tensors:
            err = "-" if t.status == "absent" else f"{t.max_rel_err:.3e}"
            out.append(f"  {t.name:<24} {t.size:>6} {err:>10}  {t.status}")
        out.append(f"  {'max':<24} {'':>6} {self.max_rel_err:>10.3e}  {'PASS' if self.passed else 'FAIL'}")
        return out


def tiny_spec(variant: str, latency_frames: int = 4, window: int = 5) -> ModelSpec:
    return ModelSpec(
        n_channels=2, n_bins=9, n_directions=3, n_features=4, n_classes=4, variant=variant,
        attention_mode=AttentionMode("online", window=window, latency_frames=latency_frames),
        attention_hidden=5, attention_layers=2, backend_hidden=8, backend_layers=1,
        stack=8, stride=3, delay=1,
    )


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation normalized by the larger of the two tensors' max magnitudes."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max())
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _problem(spec: ModelSpec, seed: int, n_frames: int = 12, batch: int = 2):
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng, init_noise=1.0)
    shape = (batch, n_frames, spec.n_bins, spec.n_channels)
    X = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    n_out = 1 + (n_frames - spec.stack) // spec.stride
    y = rng.integers(0, spec.n_classes, (batch, n_out))
    return params, X, y


def _max_margin(net: Network, X) -> float:
    Z = net.forward(X).features
    top2 = np.sort(Z, axis=-2)[..., -2:, :]
    return float((top2[..., 1, :] - top2[..., 0, :]).min())


def numeric_gradient(net: Network, X, y, name: str, eps: float) -> np.ndarray:
    p = net.params[name]
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + eps
        lp = net.loss(X, y)
        p[idx] = old - eps
        lm = net.loss(X, y)
        p[idx] = old
        g[idx] = (lp - lm) / (2 * eps)
    return g


def gradcheck_variant(variant: str, eps: float = 1e-6, seed: int = 0, tol: float = TOLERANCE,
                      min_margin: float = 1e-3) -> GradcheckReport:
    spec = tiny_spec(variant)
    params, X, y = _problem(spec, seed)
    net = Network(spec, params)
    margin = None
    if spec.pooling == "max":
        # a subgradient is only checkable away from ties; draw inputs until the winner is unambiguous
        for s in range(seed, seed + 100):
            params, X, y = _problem(spec, s)
            net = Network(spec, params)
            margin = _max_margin(net, X)
            if margin > min_margin:
                break
    _, grads, _ = net.loss_and_grads(X, y)
    report = GradcheckReport(variant, eps, min_margin=margin)
    for name in sorted(params):
        num = numeric_gradient(net, X, y, name, eps)
        err = rel_error(grads[name], num)
        report.tensors.append(TensorCheck(name, "ok" if err <= tol else "FAIL", err, params[name].size))
    if spec.pooling != "attention":
        ref = init_params(tiny_spec("attention-online"), np.random.default_rng(0))
        for name in sorted(k for k in ref if k.startswith("attention.")):
            report.tensors.append(TensorCheck(name, "absent"))
    return report


def eps_sweep(variant: str = "attention-online", eps_values=EPS_SWEEP, seed: int = 0) -> tuple[dict, bool]:
    """RMS (over tensors) of the normalized error at each step size, and whether the curve is convex.

    Truncation error dominates at large steps and round-off at small ones, so a
    sound checker yields a curve that dips in the middle.
    """
    errs = {}
    for eps in eps_values:
        rep = gradcheck_variant(variant, eps=eps, seed=seed, tol=np.inf)
        vals = np.array([t.max_rel_err for t in rep.tensors if t.status != "absent"])
        errs[eps] = float(np.sqrt(np.mean(vals ** 2)))
    e = [errs[k] for k in sorted(errs, reverse=True)]
    convex = all(e[i] <= 0.5 * (e[i - 1] + e[i + 1]) for i in range(1, len(e) - 1))
    return errs, convex


def run_gradcheck(variants=VARIANTS, eps: float = 1e-6, seed: int = 0, sweep: bool = True):
    """Check every variant; returns (reports, sweep errors, sweep convex, overall pass)."""
    reports = [gradcheck_variant(v, eps, seed) for v in variants]
    errs, convex = eps_sweep(variants[0], seed=seed) if sweep else ({}, True)
    ok = all(r.passed for r in reports) and convex
    return reports, errs, convex, ok
