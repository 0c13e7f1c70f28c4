"""The conditional masked LM and the left-to-right baseline.

Both wrap a parameter dict and a :class:`ModelConfig`. The CMLM prepends a
LENGTH token to every source and reads a length distribution off that
position's encoder state; its decoder sees the whole (partially masked)
target at once. The AR model is a plain causal transformer framed by
BOS/EOS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .data import BOS, EOS, LENGTH, MASK, PAD, pad
from .numerics import Tensor
from .transformer import ModelConfig


@dataclass
class ScorerOutput:
    token_logits: Tensor  # [N, V] or [B, N, V]
    length_logits: Tensor | None = None  # [max_len + 1] or [B, max_len + 1]


class CmlmModel:
    kind = "cmlm"

    def __init__(self, params: tf.Parameters, config: ModelConfig):
        if config.causal:
            raise ValueError("a CMLM needs decoder_attention='bidirectional'")
        self.params = params
        self.config = config
        self.forward_calls = 0

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "CmlmModel":
        return cls(tf.init_parameters(config, seed, length_head=True), config)

    # the encoder is computed once per source batch and reused across iterations
    def encode(self, src, rng=None) -> tuple[Tensor, np.ndarray]:
        src_ids = with_length_token(src)
        if src_ids.shape[1] > self.config.max_len + 1:
            raise ValueError(f"source of length {src_ids.shape[1] - 1} exceeds max_len={self.config.max_len}")
        return tf.encoder_forward(src_ids, self.params, self.config, rng), src_ids

    def length_logits(self, enc: Tensor) -> Tensor:
        h = nx.take(enc, (slice(None), 0))
        return nx.linear(h, self.params["len.w"], self.params["len.b"])

    def decode(self, tgt, enc: Tensor, src_ids: np.ndarray, rng=None) -> Tensor:
        """Token logits ``[B, N, V]`` for a padded, partially masked target batch."""
        tgt = np.asarray(tgt, dtype=np.int64)
        if tgt.shape[1] > self.config.max_len:
            raise ValueError(f"target of length {tgt.shape[1]} exceeds max_len={self.config.max_len}")
        self.forward_calls += 1
        return tf.decoder_forward(tgt, enc, self.params, self.config, rng, src_tokens=src_ids)

    def token_probs(self, tgt, enc: Tensor, src_ids: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            logits = self.decode(tgt, enc, src_ids).data
        return nx._softmax_np(logits.astype(np.float64), -1)


class ArModel:
    kind = "ar"

    def __init__(self, params: tf.Parameters, config: ModelConfig):
        if not config.causal:
            raise ValueError("the AR baseline needs decoder_attention='causal'")
        self.params = params
        self.config = config
        self.forward_calls = 0

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "ArModel":
        return cls(tf.init_parameters(config, seed, length_head=False), config)

    def encode(self, src, rng=None) -> tuple[Tensor, np.ndarray]:
        src_ids, _ = tf._batch(src)
        if src_ids.shape[1] > self.config.max_len + 1:
            raise ValueError(f"source of length {src_ids.shape[1]} exceeds max_len={self.config.max_len}")
        return tf.encoder_forward(src_ids, self.params, self.config, rng), src_ids

    def decode(self, prefix, enc: Tensor, src_ids: np.ndarray, rng=None) -> Tensor:
        self.forward_calls += 1
        return tf.decoder_forward(prefix, enc, self.params, self.config, rng, src_tokens=src_ids)

    # incremental interface used by greedy / beam search
    def start(self, src, copies: int = 1) -> tf.DecoderCache:
        with nx.no_grad():
            enc, src_ids = self.encode(src)
        cache = tf.DecoderCache(enc, src_ids, self.params, self.config)
        if copies > 1:
            cache.reorder(np.repeat(np.arange(src_ids.shape[0]), copies))
        return cache

    def step(self, tokens, cache: tf.DecoderCache) -> np.ndarray:
        """Next-token log-probabilities ``[rows, V]`` after feeding ``tokens``."""
        self.forward_calls += 1
        logits, _ = tf.incremental_decoder_forward(tokens, cache, self.params, self.config)
        return _log_softmax_np(logits.data)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def with_length_token(src) -> np.ndarray:
    ids, _ = tf._batch(src)
    lengths = (ids != PAD).sum(axis=1)
    out = np.full((ids.shape[0], ids.shape[1] + 1), PAD, dtype=np.int64)
    out[:, 0] = LENGTH
    out[:, 1:] = ids
    if ids.size and (lengths == 0).any():
        raise ValueError("empty source sentence")
    return out


def cmlm_forward(src, tgt_partial, model: CmlmModel, rng=None) -> ScorerOutput:
    """One parallel pass: token logits for every target slot plus length logits."""
    src_ids, single = tf._batch(src)
    if src_ids.shape[1] == 0 or (src_ids != PAD).sum() == 0:
        raise ValueError("source must be nonempty")
    tgt, _ = tf._batch(tgt_partial)
    enc, src_ids = model.encode(src_ids, rng)
    tok = model.decode(tgt, enc, src_ids, rng)
    length = model.length_logits(enc)
    if single:
        tok = nx.reshape(tok, tok.shape[1:])
        length = nx.reshape(length, length.shape[1:])
    return ScorerOutput(tok, length)


def ar_forward(src, tgt_prefix, model: ArModel, rng=None) -> Tensor:
    """Causal logits; row ``i`` predicts prefix token ``i + 1``."""
    prefix, single = tf._batch(tgt_prefix)
    if (prefix[:, 0] != BOS).any():
        raise ValueError("AR prefix must start with BOS")
    enc, src_ids = model.encode(tf._batch(src)[0], rng)
    logits = model.decode(prefix, enc, src_ids, rng)
    return nx.reshape(logits, logits.shape[1:]) if single else logits


def length_candidates(length_logits: np.ndarray, ell: int, max_len: int) -> list[tuple[int, float]]:
    """Top ``ell`` lengths in 1..max_len by probability, ties toward shorter."""
    n_valid = max_len
    if ell < 1 or ell > n_valid:
        raise ValueError(f"ell={ell} outside 1..{n_valid}")
    x = np.asarray(length_logits, dtype=np.float64)[: max_len + 1]
    logp = x - x.max()
    logp = logp - np.log(np.exp(logp).sum())
    lengths = np.arange(1, max_len + 1)
    order = sorted(lengths, key=lambda n: (-logp[n], n))[:ell]
    return [(int(n), float(logp[n])) for n in order]


def predict_length(src, model: CmlmModel, ell: int) -> list[tuple[int, float]]:
    with nx.no_grad():
        enc, _ = model.encode(tf._batch(src)[0])
        logits = model.length_logits(enc).data[0]
    return length_candidates(logits, ell, model.config.max_len)


def ar_target(tgt_seqs) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing (input, output) arrays: BOS+y and y+EOS, PAD-padded."""
    inputs = pad([[BOS] + list(t) for t in tgt_seqs])
    outputs = pad([list(t) + [EOS] for t in tgt_seqs])
    return inputs, outputs


def all_masked(n: int) -> np.ndarray:
    return np.full(n, MASK, dtype=np.int64)


def build_model(kind: str, config: ModelConfig, seed: int):
    if kind == "cmlm":
        return CmlmModel.create(config, seed)
    if kind == "ar":
        return ArModel.create(config, seed)
    raise ValueError(f"unknown model kind {kind!r}")


def model_from_params(params: tf.Parameters, config: ModelConfig):
    return ArModel(params, config) if config.causal else CmlmModel(params, config)
