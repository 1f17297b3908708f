"""Per-token, per-head fusion gate.

A shared two-layer trunk (width d_model/2, GELU) emits H sigmoid outputs per
token; the raw gate alpha is then affinely clipped to [eps, 1-eps] so the
log-priors built from it stay finite.

Ablations:
  * static_alpha  — constant alpha, MLP bypassed, no gate gradients;
  * no_gate       — the log-prior term is dropped entirely downstream; this
    module returns None so callers cannot accidentally use a gate value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .neighborhood import AttentionConfig
from .numerics import NonFiniteError, Rng, gelu, gelu_grad, sigmoid


@dataclass
class GateParams:
    w1: np.ndarray  # (d_model, d_model // 2)
    b1: np.ndarray  # (d_model // 2,)
    w2: np.ndarray  # (d_model // 2, n_heads)
    b2: np.ndarray  # (n_heads,)


def init_gate(rng: Rng, d_model: int, n_heads: int) -> GateParams:
    """Glorot trunk, zero output layer so training starts at alpha = 0.5."""
    hidden = d_model // 2
    return GateParams(
        w1=rng.glorot((d_model, hidden)),
        b1=np.zeros(hidden),
        w2=np.zeros((hidden, n_heads)),
        b2=np.zeros(n_heads),
    )


@dataclass
class GateCache:
    inp: np.ndarray
    h_pre: np.ndarray   # pre-GELU hidden
    h_act: np.ndarray
    alpha_raw: np.ndarray
    eps: float


def gate_forward(
    params: GateParams,
    inp: np.ndarray,
    config: AttentionConfig,
) -> Tuple[Optional[np.ndarray], Optional[GateCache]]:
    """Stabilized gate values, shape (..., n, H); None under the no_gate ablation.

    alpha = sigmoid(w2 . gelu(w1 . inp + b1) + b2), then (1-2*eps)*alpha + eps.
    """
    if config.ablation == "no_gate":
        return None, None
    if config.ablation == "static_alpha":
        shape = inp.shape[:-1] + (config.n_heads,)
        return np.full(shape, config.static_alpha_value), None
    if not np.isfinite(inp).all():
        raise NonFiniteError("gate input contains non-finite values")
    h_pre = inp @ params.w1 + params.b1
    h_act = gelu(h_pre)
    alpha_raw = sigmoid(h_act @ params.w2 + params.b2)
    alpha = (1.0 - 2.0 * config.eps) * alpha_raw + config.eps
    return alpha, GateCache(inp=inp, h_pre=h_pre, h_act=h_act,
                            alpha_raw=alpha_raw, eps=config.eps)


def gate_backward(
    params: GateParams,
    cache: Optional[GateCache],
    d_alpha: np.ndarray,
) -> Tuple[np.ndarray, GateParams]:
    """Chain rule through clip, sigmoid, and the trunk.

    Returns (gradient w.r.t. the gate input, gradient tree for the params).
    """
    if cache is None:
        raise ValueError("gate_backward: no cache (ablated gate has no gradients)")
    dz = (1.0 - 2.0 * cache.eps) * d_alpha * cache.alpha_raw * (1.0 - cache.alpha_raw)
    flat_h = cache.h_act.reshape(-1, cache.h_act.shape[-1])
    flat_dz = dz.reshape(-1, dz.shape[-1])
    d_w2 = flat_h.T @ flat_dz
    d_b2 = flat_dz.sum(axis=0)
    dh = (dz @ params.w2.T) * gelu_grad(cache.h_pre)
    flat_in = cache.inp.reshape(-1, cache.inp.shape[-1])
    flat_dh = dh.reshape(-1, dh.shape[-1])
    d_w1 = flat_in.T @ flat_dh
    d_b1 = flat_dh.sum(axis=0)
    d_inp = dh @ params.w1.T
    return d_inp, GateParams(w1=d_w1, b1=d_b1, w2=d_w2, b2=d_b2)
