"""Post-norm encoder/decoder transformer blocks on top of :mod:`numerics`.

All forward functions take padded integer batches ``[B, L]`` (a single
1-D sequence is accepted too and treated as a batch of one). Passing a
``rng`` turns dropout on; ``rng=None`` is evaluation mode.
"""

from __future__ import annotations

import dataclasses
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PAD = 0

CHECKPOINT_MAGIC = b"MASKPREDICT-CKPT\n"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    layers: int = 6
    heads: int = 8
    d_model: int = 512
    d_hidden: int = 2048
    vocab_size: int = 64
    max_len: int = 256
    dropout: float = 0.3
    decoder_attention: str = "bidirectional"
    tie_embeddings: bool = True
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.decoder_attention not in ("causal", "bidirectional"):
            raise ValueError(f"decoder_attention must be causal or bidirectional, got {self.decoder_attention!r}")
        if min(self.layers, self.heads, self.d_hidden, self.vocab_size, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def causal(self) -> bool:
        return self.decoder_attention == "causal"

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_items(cls, items: dict) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in items:
                continue
            raw = items[f.name]
            if f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = str(raw)
        return cls(**kwargs)


Parameters = dict  # name -> Tensor


def _attn_names(prefix: str, d: int) -> dict:
    shapes = {}
    for p in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{p}"] = (d, d)
        shapes[f"{prefix}.b{p}"] = (d,)
    return shapes


def parameter_shapes(config: ModelConfig, length_head: bool | None = None) -> dict:
    """Name -> shape map; a pure function of the config."""
    d, h, v = config.d_model, config.d_hidden, config.vocab_size
    if length_head is None:
        length_head = not config.causal
    shapes = {"emb.tok": (v, d), "out.b": (v,)}
    if not config.tie_embeddings:
        shapes["out.w"] = (d, v)

    def ln(name):
        shapes[f"{name}.g"] = (d,)
        shapes[f"{name}.b"] = (d,)

    def ffn(name):
        shapes.update({f"{name}.w1": (d, h), f"{name}.b1": (h,), f"{name}.w2": (h, d), f"{name}.b2": (d,)})

    for i in range(config.layers):
        shapes.update(_attn_names(f"enc.l{i}.self", d))
        ln(f"enc.l{i}.ln1")
        ffn(f"enc.l{i}.ffn")
        ln(f"enc.l{i}.ln2")
    for i in range(config.layers):
        shapes.update(_attn_names(f"dec.l{i}.self", d))
        ln(f"dec.l{i}.ln1")
        shapes.update(_attn_names(f"dec.l{i}.cross", d))
        ln(f"dec.l{i}.ln2")
        ffn(f"dec.l{i}.ffn")
        ln(f"dec.l{i}.ln3")
    if length_head:
        shapes["len.w"] = (d, config.max_len + 1)
        shapes["len.b"] = (config.max_len + 1,)
    return shapes


def is_weight(name: str) -> bool:
    """True for matrices that get N(0, 0.02) init and weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("w") or name == "emb.tok"


def no_decay_names(params: Parameters) -> frozenset:
    return frozenset(n for n in params if not is_weight(n))


def init_parameters(config: ModelConfig, seed: int, length_head: bool | None = None,
                    std: float | None = None) -> Parameters:
    """Weights ~ N(0, std^2) (``config.init_std`` by default), biases 0,
    layer-norm gain 1 / shift 0."""
    std = config.init_std if std is None else std
    rng = np.random.default_rng(seed)
    dtype = nx.default_dtype()
    params = {}
    for name, shape in sorted(parameter_shapes(config, length_head).items()):
        if is_weight(name):
            data = rng.normal(0.0, std, size=shape)
        elif name.endswith(".g") and ".ln" in name:
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


# -- embeddings --------------------------------------------------------------


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


_PE_CACHE: dict = {}


def _pe(length: int, d_model: int, dtype) -> np.ndarray:
    key = (d_model, np.dtype(dtype).str)
    table = _PE_CACHE.get(key)
    if table is None or table.shape[0] < length:
        table = positional_encoding(max(length, 512), d_model).astype(dtype)
        _PE_CACHE[key] = table
    return table[:length]


def _batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def embed(tokens, params: Parameters, config: ModelConfig, rng=None, offset: int = 0) -> Tensor:
    """Scaled token embedding plus sinusoidal positions, dropout in training."""
    ids, single = _batch(tokens)
    length = ids.shape[1]
    if offset + length > config.max_len + 1:
        raise ValueError(f"sequence of length {offset + length} exceeds max_len={config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError("token id outside the vocabulary")
    w = params["emb.tok"]
    x = nx.mul(nx.embedding(w, ids), math.sqrt(config.d_model))
    x = nx.add(x, _pe(offset + length, config.d_model, w.data.dtype)[offset:])
    x = nx.dropout(x, config.dropout, rng)
    return nx.reshape(x, x.shape[1:]) if single else x


# -- attention ---------------------------------------------------------------


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return nx.transpose(nx.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return nx.reshape(nx.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, allowed: np.ndarray | None,
            config: ModelConfig, rng) -> Tensor:
    scale = 1.0 / math.sqrt(config.head_dim)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), scale)
    if allowed is not None:
        if not allowed.any(axis=-1).all():
            raise ValueError("attention mask has a query row with no visible keys")
        bias = np.where(allowed, 0.0, -np.inf).astype(scores.data.dtype)
        if bias.ndim == 3:
            bias = bias[:, None, :, :]
        scores = nx.add(scores, bias)
    weights = nx.dropout(nx.softmax(scores, axis=-1), config.dropout, rng)
    return _merge_heads(nx.matmul(weights, v))


def multi_head_attention(q_in: Tensor, kv_in: Tensor, attn_mask, params: Parameters,
                         config: ModelConfig, prefix: str, rng=None) -> Tensor:
    """Scaled dot-product attention over ``config.heads`` heads.

    ``attn_mask`` is boolean, True where a query may attend to a key; shape
    ``[Lq, Lk]`` or ``[B, Lq, Lk]``. ``None`` means attend everywhere.
    """
    single = q_in.ndim == 2
    if single:
        q_in = nx.reshape(q_in, (1,) + q_in.shape)
        kv_in = nx.reshape(kv_in, (1,) + kv_in.shape)
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    q = _split_heads(nx.linear(q_in, p("wq"), p("bq")), config.heads)
    k = _split_heads(nx.linear(kv_in, p("wk"), p("bk")), config.heads)
    v = _split_heads(nx.linear(kv_in, p("wv"), p("bv")), config.heads)
    if attn_mask is not None:
        attn_mask = np.asarray(attn_mask, dtype=bool)
        expect = (q_in.shape[1], kv_in.shape[1])
        if attn_mask.shape[-2:] != expect:
            raise ValueError(f"attention mask shape {attn_mask.shape} does not match {expect}")
    out = nx.linear(_attend(q, k, v, attn_mask, config, rng), p("wo"), p("bo"))
    return nx.reshape(out, out.shape[1:]) if single else out


def _ffn(x: Tensor, params: Parameters, prefix: str, config: ModelConfig, rng) -> Tensor:
    h = nx.relu(nx.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    h = nx.dropout(h, config.dropout, rng)
    return nx.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(x: Tensor, params: Parameters, prefix: str) -> Tensor:
    return nx.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def key_mask(ids: np.ndarray) -> np.ndarray:
    """``[B, 1, L]`` boolean mask of non-PAD keys."""
    return (ids != PAD)[:, None, :]


# -- stacks ------------------------------------------------------------------


def encoder_forward(src_tokens, params: Parameters, config: ModelConfig, rng=None) -> Tensor:
    """Self-attention + ReLU FFN blocks, residual then layer norm."""
    ids, single = _batch(src_tokens)
    x = embed(ids, params, config, rng)
    allowed = np.broadcast_to(key_mask(ids), (ids.shape[0], ids.shape[1], ids.shape[1]))
    for i in range(config.layers):
        pre = f"enc.l{i}"
        x = _ln(nx.add(x, multi_head_attention(x, x, allowed, params, config, f"{pre}.self", rng)),
                params, f"{pre}.ln1")
        x = _ln(nx.add(x, _ffn(x, params, f"{pre}.ffn", config, rng)), params, f"{pre}.ln2")
    return nx.reshape(x, x.shape[1:]) if single else x


def output_logits(h: Tensor, params: Parameters, config: ModelConfig) -> Tensor:
    w = params["emb.tok"] if config.tie_embeddings else None
    if w is not None:
        return nx.add(nx.matmul(h, nx.transpose(w, (1, 0))), params["out.b"])
    return nx.linear(h, params["out.w"], params["out.b"])


def decoder_hidden(tgt_tokens, encoder_out: Tensor, src_ids, params: Parameters,
                   config: ModelConfig, rng=None) -> Tensor:
    ids, _ = _batch(tgt_tokens)
    src, _ = _batch(src_ids)
    n = ids.shape[1]
    x = embed(ids, params, config, rng)
    self_allowed = key_mask(ids)
    if config.causal:
        self_allowed = self_allowed & causal_mask(n)[None]
    self_allowed = np.broadcast_to(self_allowed, (ids.shape[0], n, n))
    cross_allowed = np.broadcast_to(key_mask(src), (ids.shape[0], n, src.shape[1]))
    for i in range(config.layers):
        pre = f"dec.l{i}"
        x = _ln(nx.add(x, multi_head_attention(x, x, self_allowed, params, config, f"{pre}.self", rng)),
                params, f"{pre}.ln1")
        x = _ln(nx.add(x, multi_head_attention(x, encoder_out, cross_allowed, params, config,
                                               f"{pre}.cross", rng)), params, f"{pre}.ln2")
        x = _ln(nx.add(x, _ffn(x, params, f"{pre}.ffn", config, rng)), params, f"{pre}.ln3")
    return x


def decoder_forward(tgt_tokens, encoder_out: Tensor, params: Parameters, config: ModelConfig,
                    rng=None, src_tokens=None) -> Tensor:
    """Vocabulary logits ``[B, L, V]`` (or ``[L, V]`` for a single sequence).

    ``src_tokens`` supplies the source padding mask for cross-attention;
    without it every encoder position is visible.
    """
    ids, single = _batch(tgt_tokens)
    if encoder_out.ndim == 2:
        encoder_out = nx.reshape(encoder_out, (1,) + encoder_out.shape)
    if src_tokens is None:
        src_tokens = np.ones(encoder_out.shape[:2], dtype=np.int64)
    logits = output_logits(decoder_hidden(ids, encoder_out, src_tokens, params, config, rng),
                           params, config)
    return nx.reshape(logits, logits.shape[1:]) if single else logits


# -- incremental (cached) decoding -------------------------------------------


class DecoderCache:
    """Per-layer self-attention keys/values for the positions decoded so far,
    plus the cross-attention keys/values of the encoder output."""

    def __init__(self, encoder_out: Tensor, src_ids, params: Parameters, config: ModelConfig):
        if not config.causal:
            raise ValueError("incremental decoding needs a causal decoder")
        if encoder_out.ndim == 2:
            encoder_out = nx.reshape(encoder_out, (1,) + encoder_out.shape)
        src, _ = _batch(src_ids) if src_ids is not None else (np.ones(encoder_out.shape[:2], np.int64), False)
        self.length = 0
        self.self_k: list = [None] * config.layers
        self.self_v: list = [None] * config.layers
        self.cross_k = []
        self.cross_v = []
        self.cross_allowed = key_mask(src)
        with nx.no_grad():
            for i in range(config.layers):
                pre = f"dec.l{i}.cross"
                self.cross_k.append(_split_heads(nx.linear(encoder_out, params[f"{pre}.wk"], params[f"{pre}.bk"]),
                                                 config.heads).data)
                self.cross_v.append(_split_heads(nx.linear(encoder_out, params[f"{pre}.wv"], params[f"{pre}.bv"]),
                                                 config.heads).data)

    def reorder(self, index: np.ndarray) -> None:
        """Select batch rows (beam search bookkeeping)."""
        index = np.asarray(index)
        self.self_k = [None if k is None else k[index] for k in self.self_k]
        self.self_v = [None if v is None else v[index] for v in self.self_v]
        self.cross_k = [k[index] for k in self.cross_k]
        self.cross_v = [v[index] for v in self.cross_v]
        self.cross_allowed = self.cross_allowed[index]


def incremental_decoder_forward(new_token, cache: DecoderCache, params: Parameters,
                                config: ModelConfig) -> tuple[Tensor, DecoderCache]:
    """Logits for one new position per batch row, extending ``cache`` in place."""
    if not config.causal:
        raise ValueError("incremental decoding needs a causal decoder")
    ids = np.asarray(new_token, dtype=np.int64).reshape(-1, 1)
    with nx.no_grad():
        x = embed(ids, params, config, None, offset=cache.length)
        for i in range(config.layers):
            pre = f"dec.l{i}"
            p = lambda n, pre=pre: params[f"{pre}.self.{n}"]  # noqa: E731
            q = _split_heads(nx.linear(x, p("wq"), p("bq")), config.heads)
            k = _split_heads(nx.linear(x, p("wk"), p("bk")), config.heads).data
            v = _split_heads(nx.linear(x, p("wv"), p("bv")), config.heads).data
            if cache.self_k[i] is not None:
                k = np.concatenate([cache.self_k[i], k], axis=2)
                v = np.concatenate([cache.self_v[i], v], axis=2)
            cache.self_k[i], cache.self_v[i] = k, v
            att = _attend(q, Tensor(k), Tensor(v), None, config, None)
            x = _ln(nx.add(x, nx.linear(att, p("wo"), p("bo"))), params, f"{pre}.ln1")
            c = lambda n, pre=pre: params[f"{pre}.cross.{n}"]  # noqa: E731
            q = _split_heads(nx.linear(x, c("wq"), c("bq")), config.heads)
            att = _attend(q, Tensor(cache.cross_k[i]), Tensor(cache.cross_v[i]), cache.cross_allowed,
                          config, None)
            x = _ln(nx.add(x, nx.linear(att, c("wo"), c("bo"))), params, f"{pre}.ln2")
            x = _ln(nx.add(x, _ffn(x, params, f"{pre}.ffn", config, None)), params, f"{pre}.ln3")
        logits = output_logits(x, params, config)
    cache.length += 1
    return nx.reshape(logits, (logits.shape[0], logits.shape[2])), cache


# -- checkpoints -------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Parameters, config: ModelConfig, meta: dict | None = None) -> None:
    """Text header (version, config, extra metadata) then sorted float32 tensors."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    header = f"version={CHECKPOINT_VERSION}\n" + config.to_text()
    for k, v in sorted((meta or {}).items()):
        header += f"meta.{k}={v}\n"
    buf.write(header.encode("utf-8"))
    buf.write(b"\n")
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Parameters, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n\n", len(CHECKPOINT_MAGIC) - 1)
    lines = raw[len(CHECKPOINT_MAGIC):end].decode("utf-8").splitlines()
    items = dict(line.split("=", 1) for line in lines if line)
    if int(items.get("version", -1)) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {items.get('version')}")
    meta = {k[5:]: v for k, v in items.items() if k.startswith("meta.")}
    config = ModelConfig.from_items(items)
    pos = end + 2
    params = {}
    while pos < len(raw):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * count
        params[name] = Tensor(data, requires_grad=True, dtype=np.float32)
    return params, config, meta
