"""Mask-predict decoding for CMLMs and greedy/beam search for the AR baseline.

Scorer protocol used here (``CmlmModel`` implements it, and so do the
lookup-table mocks in the tests):

* ``encode(src_batch) -> (enc, src_ids)`` with ``enc`` row-indexable;
* ``token_probs(tgt, enc, src_ids) -> probs [R, L, V]``;
* ``length_logits(enc) -> Tensor [B, max_len + 1]``;
* ``config.max_len``.

AR decoders use ``start(src_batch, copies) -> state`` (with
``state.reorder(rows)``) and ``step(tokens, state) -> logprobs [R, V]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .cmlm import length_candidates
from .data import BOS, EOS, LENGTH, MASK, PAD, pad
from .numerics import Tensor

log = logging.getLogger(__name__)

# ids a decoder may never emit: a PAD or MASK inside a hypothesis would be
# read back as padding or as a slot still to fill
NEVER_EMITTED = np.array([PAD, MASK, LENGTH, BOS])


@dataclass
class DecodeConfig:
    T: int = 10
    ell: int = 5
    beam: int = 5
    gold_length: bool = False
    length_normalize: bool = True

    def __post_init__(self):
        if self.T < 1 or self.ell < 1 or self.beam < 1:
            raise ValueError("T, ell and beam must all be >= 1")


@dataclass
class DecodeState:
    y: np.ndarray
    p: np.ndarray
    t: int = 0
    T: int = 1

    @property
    def N(self) -> int:
        return int(self.y.shape[0])


@dataclass
class DecodeResult:
    tokens: list
    score: float
    length: int = 0
    candidates: list = field(default_factory=list)  # (length, avg log-prob)
    finished: bool = True
    trace: list | None = None  # per-iteration token lists (mask-predict only)


# -- mask-predict ------------------------------------------------------------


def mask_schedule(N: int, T: int, t: int) -> int:
    """Number of tokens to mask at iteration ``t``: N at t=0, then floor(N(T-t)/T)."""
    if not 0 <= t < T:
        raise ValueError(f"iteration t={t} outside 0..{T - 1}")
    if t == 0:
        return N
    return (N * (T - t)) // T


def select_mask_set(p, n: int) -> np.ndarray:
    """Indices of the ``n`` smallest scores, ties toward the lower index."""
    p = np.asarray(p)
    if n > p.shape[0] or n < 0:
        raise ValueError(f"cannot mask {n} of {p.shape[0]} positions")
    return np.argsort(p, kind="stable")[:n]


def _rows(enc, src_ids, rows: np.ndarray):
    data = enc.data if isinstance(enc, Tensor) else np.asarray(enc)
    return Tensor(data[rows], dtype=data.dtype), src_ids[rows]


def mask_predict_rows(model, enc, src_ids, lengths, T: int, trace: bool = False):
    """Run mask-predict on a batch of rows that share one encoder pass.

    ``lengths[r]`` is the target length of row ``r``; ``enc``/``src_ids``
    already hold one row per target. Returns ``(y, p, history)`` with
    ``y``/``p`` PAD/inf padded to the longest row.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    rows, width = lengths.shape[0], int(lengths.max())
    valid = np.arange(width)[None, :] < lengths[:, None]
    y = np.where(valid, MASK, PAD).astype(np.int64)
    p = np.where(valid, 0.0, np.inf)
    history = []
    for t in range(T):
        n = np.array([mask_schedule(int(N), T, t) for N in lengths])
        if not n.any():
            continue
        if t == 0:
            masked = valid.copy()
        else:
            order = np.argsort(p, axis=1, kind="stable")
            rank = np.empty_like(order)
            np.put_along_axis(rank, order, np.arange(width)[None, :].repeat(rows, 0), axis=1)
            masked = rank < n[:, None]
        tgt = np.where(masked, MASK, y)
        probs = model.token_probs(tgt, enc, src_ids).copy()
        probs[..., NEVER_EMITTED] = 0.0
        probs[..., EOS] = 0.0  # a CMLM target has no EOS slot
        best = probs.argmax(axis=-1)
        best_p = np.take_along_axis(probs, best[..., None], axis=-1)[..., 0]
        y = np.where(masked, best, y)
        p = np.where(masked, best_p, p)
        if trace:
            history.append((t, masked.copy(), y.copy(), p.copy()))
    return y, p, history


def mask_predict_single(src, N: int, model, T: int, trace: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Decode one source at a fixed target length ``N``; returns ``(y, p)``."""
    if not 1 <= N <= model.config.max_len:
        raise ValueError(f"target length {N} outside 1..{model.config.max_len}")
    src = np.asarray(src, dtype=np.int64)[None, :]
    with nx.no_grad():
        enc, src_ids = model.encode(src)
    y, p, history = mask_predict_rows(model, enc, src_ids, [N], T, trace)
    if trace:
        return y[0], p[0], [(t, m[0], yy[0], pp[0]) for t, m, yy, pp in history]
    return y[0], p[0]


def candidate_score(p) -> float:
    """Average log-probability of a finished candidate."""
    p = np.asarray(p, dtype=np.float64)
    return float(np.log(p).mean())


def pick_candidate(cands: list[tuple[int, float]]) -> int:
    """Index of the best (length, score) pair; ties go to the shorter length."""
    return min(range(len(cands)), key=lambda i: (-cands[i][1], cands[i][0]))


def mask_predict_batch(srcs, model, cfg: DecodeConfig, gold_lengths=None,
                       trace: bool = False) -> list[DecodeResult]:
    """Mask-predict with ``cfg.ell`` length candidates per source, all fused
    into one batch of rows."""
    srcs = [list(s) for s in srcs]
    if not srcs:
        return []
    max_len = model.config.max_len
    with nx.no_grad():
        enc, src_ids = model.encode(pad(srcs))
        if cfg.gold_length:
            if gold_lengths is None:
                raise ValueError("gold_length decoding needs gold_lengths")
            per_src = [[(min(max(int(n), 1), max_len), 0.0)] for n in gold_lengths]
        else:
            length_logits = model.length_logits(enc)
            length_logits = length_logits.data if isinstance(length_logits, Tensor) else length_logits
            per_src = [length_candidates(length_logits[i], cfg.ell, max_len) for i in range(len(srcs))]
    owner = np.array([i for i, c in enumerate(per_src) for _ in c])
    lengths = np.array([n for c in per_src for n, _ in c])
    row_enc, row_src = _rows(enc, src_ids, owner)
    y, p, history = mask_predict_rows(model, row_enc, row_src, lengths, cfg.T, trace)
    results = []
    r = 0
    for i, cands in enumerate(per_src):
        scored = []
        for j in range(len(cands)):
            n = int(lengths[r + j])
            scored.append((n, candidate_score(p[r + j, :n])))
        k = pick_candidate(scored)
        n = scored[k][0]
        tr = None
        if trace:
            tr = [yy[r + k, :n].tolist() for _, _, yy, _ in history]
        results.append(DecodeResult(y[r + k, :n].tolist(), scored[k][1], n, scored, True, tr))
        r += len(cands)
    return results


def mask_predict(src, model, cfg: DecodeConfig, gold_length: int | None = None) -> list[int]:
    """Decode one source; a given ``gold_length`` replaces length prediction."""
    if gold_length is not None:
        cfg = replace(cfg, gold_length=True)
    res = mask_predict_batch([src], model, cfg, None if gold_length is None else [gold_length])
    return res[0].tokens


# -- autoregressive search ---------------------------------------------------


def greedy_decode(src, model, max_len: int) -> list[int]:
    """Left-to-right argmax continuation from BOS, stopping at EOS."""
    state = model.start(np.asarray(src, dtype=np.int64)[None, :], 1)
    tok = BOS
    out = []
    for _ in range(max_len):
        logp = model.step(np.array([tok]), state)[0].copy()
        logp[NEVER_EMITTED] = -np.inf
        tok = int(np.argmax(logp))
        if tok == EOS:
            return out
        out.append(tok)
    log.info("greedy decode hit max_len=%d without EOS", max_len)
    return out


def beam_decode_batch(srcs, model, b: int, max_len: int, normalize: bool = True) -> list[DecodeResult]:
    """Beam search over a batch of sources.

    EOS is only accepted from the top ``b`` ranked expansions; a sentence
    stops once it has ``b`` finished hypotheses. Finished hypotheses are
    ranked by log-probability divided by their length (EOS included) when
    ``normalize`` is set.
    """
    if b < 1:
        raise ValueError("beam size must be >= 1")
    srcs = [list(s) for s in srcs]
    B = len(srcs)
    if B == 0:
        return []
    state = model.start(pad(srcs), b)
    scores = np.full((B, b), -np.inf)
    scores[:, 0] = 0.0
    tokens = np.zeros((B, b, 0), dtype=np.int64)
    last = np.full(B * b, BOS, dtype=np.int64)
    finished: list[list] = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)

    def rank(score, length):
        return score / length if normalize else score

    for t in range(max_len):
        logp = model.step(last, state).copy()
        logp[:, NEVER_EMITTED] = -np.inf
        V = logp.shape[1]
        cand = (scores[:, :, None] + logp.reshape(B, b, V)).reshape(B, b * V)
        new_scores = np.full((B, b), -np.inf)
        new_tokens = np.zeros((B, b, t + 1), dtype=np.int64)
        origin = np.tile(np.arange(b), B).reshape(B, b) + (np.arange(B) * b)[:, None]
        for i in range(B):
            if done[i]:
                continue
            order = np.argsort(-cand[i], kind="stable")
            kept = 0
            for r, c in enumerate(order):
                sc = cand[i, c]
                if not np.isfinite(sc) or kept >= b:
                    break
                beam, tok = divmod(int(c), V)
                if tok == EOS:
                    if r < b:
                        finished[i].append((rank(sc, t + 1), tokens[i, beam].tolist(), sc))
                    continue
                new_scores[i, kept] = sc
                new_tokens[i, kept, :t] = tokens[i, beam]
                new_tokens[i, kept, t] = tok
                origin[i, kept] = i * b + beam
                kept += 1
            if len(finished[i]) >= b or kept == 0:
                done[i] = True
        if done.all():
            break
        scores, tokens = new_scores, new_tokens
        state.reorder(origin.reshape(-1))
        last = tokens[:, :, -1].reshape(-1)
    results = []
    for i in range(B):
        if finished[i]:
            best = max(finished[i], key=lambda h: h[0])
            results.append(DecodeResult(best[1], float(best[2]), len(best[1]), finished=True))
        else:
            j = int(np.argmax(scores[i]))
            log.info("beam search hit max_len=%d without a finished hypothesis", max_len)
            results.append(DecodeResult(tokens[i, j].tolist(), float(scores[i, j]),
                                        tokens.shape[2], finished=False))
    return results


def beam_decode(src, model, b: int, max_len: int, normalize: bool = True) -> list[int]:
    return beam_decode_batch([src], model, b, max_len, normalize)[0].tokens


def ar_decode_batch(srcs, model, cfg: DecodeConfig, max_len: int | None = None) -> list[DecodeResult]:
    return beam_decode_batch(srcs, model, cfg.beam, max_len or model.config.max_len, cfg.length_normalize)
