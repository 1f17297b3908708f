"""Periodic sparse attention engine: ring-local windows, strided skip links,
and gated single-softmax fusion, with a dense oracle, analytic gradients, a
receptive-field analyzer, KV-cache decoding, cost models, and a toy trainer."""

__version__ = "0.1.0"

from .neighborhood import AttentionConfig, build_union, count_score_slots, gather_schedule
from .model import ModelConfig

__all__ = [
    "AttentionConfig",
    "ModelConfig",
    "build_union",
    "count_score_slots",
    "gather_schedule",
    "__version__",
]
