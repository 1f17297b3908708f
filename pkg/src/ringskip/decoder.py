"""Incremental autoregressive decoding with a rolling per-layer KV cache.

Each step projects only the new token, attends over the causal union of its
ring-left window and the skip partner from cached rows, and appends one K/V
row per layer. Rows older than t - max(k, skip_period) are evicted, so the
cache holds at most max(k, skip_period) + 1 positions per layer and per-step
work is independent of t. Stepwise logits are bit-for-bit the same math as
the batched forward, so they agree with a teacher-forced full pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attention import _ln_forward, merge_heads
from .gate import gate_forward
from .model import ModelConfig, ModelParams
from .neighborhood import Kind
from .numerics import Rng, gelu, softmax_row


class CacheGapError(RuntimeError):
    """A required cached position is missing."""


@dataclass
class LayerCache:
    rows: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def put(self, t: int, k_row: np.ndarray, v_row: np.ndarray) -> None:
        self.rows[t] = (k_row, v_row)

    def get(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        if t not in self.rows:
            raise CacheGapError(f"cache gap: position {t} not retained")
        return self.rows[t]

    def evict_before(self, cutoff: int) -> None:
        for t in [t for t in self.rows if t < cutoff]:
            del self.rows[t]


@dataclass
class KVCache:
    layers: List[LayerCache]
    next_pos: int = 0

    @classmethod
    def empty(cls, n_layers: int) -> "KVCache":
        return cls(layers=[LayerCache() for _ in range(n_layers)])

    def positions(self, layer: int = 0) -> List[int]:
        return sorted(self.layers[layer].rows)


def _union_targets(t: int, cfg: ModelConfig) -> List[Tuple[int, Kind]]:
    """Causal union for the query row at position t, oldest first."""
    att = cfg.attention
    targets: List[Tuple[int, Kind]] = []
    if att.ablation == "no_ring":
        ring = [t] if att.include_self else []
    else:
        lo = max(0, t - att.ring_k)
        hi = t if att.include_self else t - 1
        ring = list(range(lo, hi + 1))
    skip_t = t - att.skip_period
    if att.ablation != "no_skip" and skip_t >= 0 and skip_t not in ring:
        targets.append((skip_t, Kind.SKIP))
    targets.extend((j, Kind.RING) for j in ring)
    return targets


def decode_step(
    params: ModelParams,
    cfg: ModelConfig,
    cache: KVCache,
    token: int,
    t: int,
) -> np.ndarray:
    """Process one token at absolute position t; returns vocab logits (V,)."""
    att = cfg.attention
    if not att.causal:
        raise ValueError("incremental decoding requires a causal config")
    if t != cache.next_pos:
        raise CacheGapError(f"cache is consistent through {cache.next_pos - 1}, got t={t}")
    if t >= cfg.max_seq:
        raise ValueError(f"position {t} exceeds max_seq {cfg.max_seq}")
    h_cnt, d_h = att.n_heads, att.head_dim
    scale = 1.0 / np.sqrt(d_h)
    lc = att.logit_clamp

    x = params.tok_emb[token] + params.pos_emb[t]  # (d,)
    for layer, bp in enumerate(params.blocks):
        h1, _ = _ln_forward(x, bp.ln1_g, bp.ln1_b)
        q = (h1 @ bp.proj.wq + bp.proj.bq).reshape(h_cnt, d_h)
        k_row = (h1 @ bp.proj.wk).reshape(h_cnt, d_h)
        v_row = (h1 @ bp.proj.wv + bp.proj.bv).reshape(h_cnt, d_h)
        lc_store = cache.layers[layer]
        lc_store.put(t, k_row, v_row)

        gate_in = q.reshape(-1) if att.gate_on_query else h1
        alpha, _ = gate_forward(bp.gate, gate_in[None, None, :], att)
        alpha_h = None if alpha is None else alpha[0, 0]  # (H,)

        targets = _union_targets(t, cfg)
        k_sel = np.stack([lc_store.get(j)[0] for j, _ in targets], axis=1)  # (H, S, d_h)
        v_sel = np.stack([lc_store.get(j)[1] for j, _ in targets], axis=1)
        scores = np.einsum("hd,hsd->hs", q, k_sel) * scale
        if alpha_h is not None:
            ring_mask = np.array([kind == Kind.RING for _, kind in targets])
            prior = np.where(ring_mask, np.log(alpha_h[:, None]),
                             np.log(1.0 - alpha_h[:, None]))
        else:
            prior = 0.0
        if att.clamp_after_prior:
            logits = np.clip(scores + prior, -lc, lc)
        else:
            logits = np.clip(scores, -lc, lc) + prior
        probs = softmax_row(logits)
        attn_h = np.einsum("hs,hsd->hd", probs, v_sel)
        a = attn_h.reshape(-1) @ bp.proj.wo + bp.proj.bo
        y1 = x + a
        h2, _ = _ln_forward(y1, bp.ln2_g, bp.ln2_b)
        x = y1 + gelu(h2 @ bp.w_ff1 + bp.b_ff1) @ bp.w_ff2 + bp.b_ff2

        lc_store.evict_before(t - max(att.ring_k, att.skip_period))

    hf, _ = _ln_forward(x, params.lnf_g, params.lnf_b)
    cache.next_pos = t + 1
    return hf @ params.w_out + params.b_out


def generate(
    params: ModelParams,
    cfg: ModelConfig,
    prompt: List[int],
    steps: int,
    greedy: bool = True,
    temperature: float = 1.0,
    rng: Optional[Rng] = None,
) -> List[int]:
    """Extend a nonempty prompt by `steps` tokens (greedy or temperature)."""
    if not prompt:
        raise ValueError("prompt must be nonempty")
    if not greedy and rng is None:
        raise ValueError("temperature sampling requires an rng")
    cache = KVCache.empty(cfg.layers)
    logits = None
    for t, tok in enumerate(prompt):
        logits = decode_step(params, cfg, cache, tok, t)
    out = list(prompt)
    for _ in range(steps):
        if greedy:
            nxt = int(np.argmax(logits))
        else:
            p = softmax_row(np.asarray(logits) / temperature)
            nxt = int(np.searchsorted(np.cumsum(p), rng.uniform(())))
        out.append(nxt)
        logits = decode_step(params, cfg, cache, nxt, len(out) - 1)
    return out
