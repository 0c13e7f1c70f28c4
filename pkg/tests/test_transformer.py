import time

import numpy as np
import pytest

from helpers import check_grads
from maskpredict import numerics as nx
from maskpredict import transformer as tf
from maskpredict.numerics import Tensor
from maskpredict.transformer import ModelConfig


def small(**kw):
    base = dict(layers=2, heads=2, d_model=8, d_hidden=16, vocab_size=12, max_len=10, dropout=0.0, init_std=0.3)
    base.update(kw)
    return ModelConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(decoder_attention="sideways")
    cfg = small(decoder_attention="causal")
    assert ModelConfig.from_items(dict(line.split("=") for line in cfg.to_text().split())) == cfg


def test_parameter_names_are_a_function_of_the_config():
    a = tf.parameter_shapes(small())
    assert a == tf.parameter_shapes(small())
    assert "len.w" in a and a["len.w"] == (8, 11)
    assert "len.w" not in tf.parameter_shapes(small(decoder_attention="causal"))
    assert "out.w" in tf.parameter_shapes(small(tie_embeddings=False))


def test_init_biases_zero_ln_identity_and_deterministic():
    p = tf.init_parameters(small(), seed=3)
    q = tf.init_parameters(small(), seed=3)
    for name in p:
        assert np.array_equal(p[name].data, q[name].data)
        if name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            assert not p[name].data.any(), name
        if name.endswith(".g"):
            assert (p[name].data == 1).all()


def test_init_std_of_large_weight():
    cfg = ModelConfig(layers=1, heads=8, d_model=512, d_hidden=512, vocab_size=8, max_len=4)
    w = tf.init_parameters(cfg, seed=0)["enc.l0.self.wq"].data
    assert w.shape == (512, 512)
    assert 0.018 <= w.std() <= 0.022


def test_positional_encoding_at_zero():
    pe = tf.positional_encoding(5, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)


def test_embed_shape_eval_determinism_and_length_check():
    cfg = small()
    p = tf.init_parameters(cfg, 0)
    ids = np.array([6, 7, 8])
    a, b = tf.embed(ids, p, cfg), tf.embed(ids, p, cfg)
    assert a.shape == (3, 8) and np.array_equal(a.data, b.data)
    with pytest.raises(ValueError):
        tf.embed(np.full(12, 6), p, cfg)
    with pytest.raises(IndexError):
        tf.embed(np.array([12]), p, cfg)
    d = tf.embed(ids, p, small(dropout=0.5), rng=np.random.default_rng(0))
    assert not np.array_equal(d.data, a.data)


def test_attention_single_key_returns_value_projection():
    cfg = small(heads=1)
    p = tf.init_parameters(cfg, 1)
    rng = np.random.default_rng(0)
    kv = Tensor(rng.normal(size=(1, 8)))
    want = (kv.data @ p["enc.l0.self.wv"].data) @ p["enc.l0.self.wo"].data
    for _ in range(3):
        q = Tensor(rng.normal(size=(2, 8)))
        out = tf.multi_head_attention(q, kv, None, p, cfg, "enc.l0.self").data
        np.testing.assert_allclose(out, np.repeat(want, 2, axis=0), rtol=1e-5, atol=1e-6)


def test_attention_rejects_fully_masked_row_and_bad_shapes():
    cfg = small()
    p = tf.init_parameters(cfg, 1)
    x = Tensor(np.ones((3, 8)))
    mask = np.ones((3, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(ValueError):
        tf.multi_head_attention(x, x, mask, p, cfg, "enc.l0.self")
    with pytest.raises(ValueError):
        tf.multi_head_attention(x, x, np.ones((2, 3), dtype=bool), p, cfg, "enc.l0.self")


def test_causal_attention_ignores_future_bidirectional_does_not():
    cfg = small()
    p = tf.init_parameters(cfg, 2)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 8))
    y = x.copy()
    y[3] += 1.0
    run = lambda inp, m: tf.multi_head_attention(Tensor(inp), Tensor(inp), m, p, cfg, "dec.l0.self").data  # noqa: E731
    causal = tf.causal_mask(5)
    np.testing.assert_array_equal(run(x, causal)[:3], run(y, causal)[:3])
    assert not np.allclose(run(x, None)[2], run(y, None)[2])


def test_encoder_shape_and_position_sensitivity():
    cfg = small()
    p = tf.init_parameters(cfg, 4)
    a = tf.encoder_forward(np.array([6, 7, 8, 9]), p, cfg).data
    b = tf.encoder_forward(np.array([7, 6, 8, 9]), p, cfg).data
    assert a.shape == (4, 8)
    assert all(not np.allclose(a[i], b[i]) for i in range(4))


def test_decoder_masking_contracts():
    rng = np.random.default_rng(5)
    for attention in ("causal", "bidirectional"):
        cfg = small(decoder_attention=attention)
        p = tf.init_parameters(cfg, 5)
        enc = tf.encoder_forward(np.array([6, 7, 8]), p, cfg)
        tgt = rng.integers(6, 12, size=6)
        base = tf.decoder_forward(tgt, enc, p, cfg).data
        assert base.shape == (6, 12)
        for j in range(1, 6):
            alt = tgt.copy()
            alt[j] = 6 if tgt[j] != 6 else 7
            out = tf.decoder_forward(alt, enc, p, cfg).data
            if attention == "causal":
                np.testing.assert_array_equal(out[:j], base[:j])
            else:
                assert not np.allclose(out[j - 1], base[j - 1])


def test_decoder_eval_forward_is_pure():
    cfg = small()
    p = tf.init_parameters(cfg, 6)
    enc = tf.encoder_forward(np.array([[6, 7, 0]]), p, cfg)
    a = tf.decoder_forward(np.array([[8, 9]]), enc, p, cfg, src_tokens=np.array([[6, 7, 0]])).data
    b = tf.decoder_forward(np.array([[8, 9]]), enc, p, cfg, src_tokens=np.array([[6, 7, 0]])).data
    assert np.array_equal(a, b)


def test_padding_does_not_leak():
    cfg = small()
    p = tf.init_parameters(cfg, 7)
    short = tf.encoder_forward(np.array([[6, 7, 8]]), p, cfg).data
    padded = tf.encoder_forward(np.array([[6, 7, 8, 0, 0]]), p, cfg).data
    np.testing.assert_allclose(padded[:, :3], short, rtol=1e-5, atol=1e-6)


def test_encoder_gradient_check_one_layer():
    with nx.precision(np.float64):
        cfg = small(layers=1)
        p = tf.init_parameters(cfg, 8)
        ids = np.array([6, 7, 8, 9])
        target = np.random.default_rng(0).normal(size=(4, 8))

        def loss():
            return nx.tsum(nx.mul(tf.encoder_forward(ids, p, cfg), target))

        used = {n: t for n, t in p.items() if n.startswith("enc.") or n == "emb.tok"}
        worst, n = check_grads(loss, used, np.random.default_rng(1), 60, h=1e-6, floor=1e-6)
    assert worst < 1e-4, (worst, n)


def test_incremental_matches_full_forward():
    cfg = small(decoder_attention="causal")
    p = tf.init_parameters(cfg, 9)
    src = np.array([[6, 7, 8, 0], [9, 10, 11, 6]])
    enc = tf.encoder_forward(src, p, cfg)
    prefix = np.array([[4, 6, 7, 8, 9], [4, 11, 10, 9, 8]])
    full = tf.decoder_forward(prefix, enc, p, cfg, src_tokens=src).data
    cache = tf.DecoderCache(enc, src, p, cfg)
    for i in range(prefix.shape[1]):
        step, cache = tf.incremental_decoder_forward(prefix[:, i], cache, p, cfg)
        assert np.abs(step.data - full[:, i]).max() < 1e-5
    assert cache.length == 5
    with pytest.raises(ValueError):
        tf.DecoderCache(enc, src, p, small())


def test_incremental_decoding_time_grows_slower_than_uncached():
    cfg = ModelConfig(layers=2, heads=4, d_model=64, d_hidden=128, vocab_size=16, max_len=130,
                      decoder_attention="causal", dropout=0.0)
    p = tf.init_parameters(cfg, 0)
    src = np.arange(6, 16)[None, :]
    enc = tf.encoder_forward(src, p, cfg)

    def cached(n):
        cache = tf.DecoderCache(enc, src, p, cfg)
        t = time.perf_counter()
        for i in range(n):
            tf.incremental_decoder_forward(np.array([6 + i % 10]), cache, p, cfg)
        return time.perf_counter() - t

    def uncached(n):
        ids = 6 + np.arange(n) % 10
        t = time.perf_counter()
        with nx.no_grad():
            for i in range(1, n + 1):
                tf.decoder_forward(ids[None, :i], enc, p, cfg, src_tokens=src)
        return time.perf_counter() - t

    c32, c128 = min(cached(32) for _ in range(2)), min(cached(128) for _ in range(2))
    u128 = uncached(128)
    # 4x the length costs well under 16x with the cache, and the cache wins outright
    assert c128 / c32 < 8
    assert c128 < u128 / 1.5


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    cfg = small()
    p = tf.init_parameters(cfg, 10)
    path = tmp_path / "m.ckpt"
    tf.save_checkpoint(path, p, cfg, {"kind": "cmlm", "step": 7})
    q, cfg2, meta = tf.load_checkpoint(path)
    assert cfg2 == cfg and meta == {"kind": "cmlm", "step": "7"}
    assert set(q) == set(p)
    for n in p:
        assert q[n].data.dtype == np.float32 and np.array_equal(q[n].data, p[n].data)
    tf.save_checkpoint(tmp_path / "again.ckpt", q, cfg2, meta)
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    cfg = small(layers=1)
    p = tf.init_parameters(cfg, 0)
    path = tmp_path / "m.ckpt"
    tf.save_checkpoint(path, p, cfg)
    raw = path.read_bytes()
    header, body = raw.split(b"\n\n", 1)
    assert b"version=1" in header and b"d_model=8" in header
    import struct
    (n,) = struct.unpack_from("<I", body, 0)
    first = sorted(p)[0]
    assert body[4:4 + n].decode() == first


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"hello")
    with pytest.raises(tf.CheckpointError):
        tf.load_checkpoint(bad)
