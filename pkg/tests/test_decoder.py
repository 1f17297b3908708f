import numpy as np
import pytest

from ringskip.checks import run_decode_check
from ringskip.decoder import CacheGapError, KVCache, decode_step, generate
from ringskip.model import ModelConfig, init_model
from ringskip.neighborhood import AttentionConfig


def model_cfg(layers=1, k=2, pi=8, **kw):
    kw.setdefault("causal", True)
    att = AttentionConfig(d_model=16, n_heads=2, ring_k=k, skip_period=pi,
                          **kw)
    return ModelConfig(layers=layers, d_model=16, n_heads=2, d_ff=32,
                       vocab=11, max_seq=64, attention=att)


def test_stepwise_matches_full_forward():
    assert run_decode_check(model_cfg(), seq_len=24) < 1e-10


def test_cache_retention_window():
    cfg = model_cfg(k=2, pi=8)
    params = init_model(cfg, seed=0)
    cache = KVCache.empty(cfg.layers)
    for t in range(21):
        decode_step(params, cfg, cache, t % cfg.vocab, t)
    # rows older than t - max(k, stride) are evicted
    assert cache.positions() == list(range(12, 21))
    assert len(cache.positions()) == max(2, 8) + 1


def test_out_of_order_step_rejected():
    cfg = model_cfg()
    params = init_model(cfg, seed=0)
    cache = KVCache.empty(cfg.layers)
    decode_step(params, cfg, cache, 1, 0)
    with pytest.raises(CacheGapError):
        decode_step(params, cfg, cache, 1, 5)


def test_non_causal_decoding_rejected():
    cfg = model_cfg(causal=False, bidirectional_skip=True)
    params = init_model(cfg, seed=0)
    with pytest.raises(ValueError, match="causal"):
        decode_step(params, cfg, KVCache.empty(cfg.layers), 0, 0)


def test_position_limit_enforced():
    cfg = model_cfg()
    params = init_model(cfg, seed=0)
    cache = KVCache.empty(cfg.layers)
    cache.next_pos = cfg.max_seq
    with pytest.raises(ValueError, match="max_seq"):
        decode_step(params, cfg, cache, 0, cfg.max_seq)


def test_generate_greedy_deterministic():
    cfg = model_cfg()
    params = init_model(cfg, seed=3)
    a = generate(params, cfg, [1, 2, 3], steps=10)
    b = generate(params, cfg, [1, 2, 3], steps=10)
    assert a == b
    assert len(a) == 13
    assert all(0 <= t < cfg.vocab for t in a)


def test_generate_argument_validation():
    cfg = model_cfg()
    params = init_model(cfg, seed=0)
    with pytest.raises(ValueError, match="nonempty"):
        generate(params, cfg, [], steps=3)
    with pytest.raises(ValueError, match="rng"):
        generate(params, cfg, [1], steps=3, greedy=False)
