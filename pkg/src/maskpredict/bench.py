"""Wall-time benchmarks of decoding configurations."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .decoding import DecodeConfig, beam_decode_batch, mask_predict_batch
from .metrics import bleu


@dataclass
class BenchResult:
    config: str
    seconds: float
    sent_per_sec: float
    bleu: float
    speedup: float = 1.0
    forward_calls: int = 0
    n_sentences: int = 0
    parallelism: int = 1
    outputs: list | None = None

    def row(self) -> str:
        return (f"{self.config}\t{self.seconds:.4f}\t{self.sent_per_sec:.2f}\t"
                f"{self.bleu:.2f}\t{self.speedup:.3f}")


TSV_HEADER = "config\tseconds\tsent_per_sec\tbleu\tspeedup"


class UncachedAr:
    """AR model adapter that re-runs the full decoder over the prefix at every
    step instead of extending a key/value cache."""

    class _State:
        def __init__(self, enc, src_ids):
            self.enc, self.src_ids, self.prefix = enc, src_ids, None

        def reorder(self, rows):
            self.enc = nx.Tensor(self.enc.data[rows], dtype=self.enc.data.dtype)
            self.src_ids = self.src_ids[rows]
            self.prefix = self.prefix[rows]

    def __init__(self, model):
        self.model = model
        self.config = model.config
        self.forward_calls = 0

    def start(self, src, copies: int = 1):
        with nx.no_grad():
            enc, src_ids = self.model.encode(src)
        rows = np.repeat(np.arange(src_ids.shape[0]), copies)
        return self._State(nx.Tensor(enc.data[rows], dtype=enc.data.dtype), src_ids[rows])

    def step(self, tokens, state):
        self.forward_calls += 1
        tokens = np.asarray(tokens, dtype=np.int64)[:, None]
        state.prefix = tokens if state.prefix is None else np.concatenate([state.prefix, tokens], axis=1)
        with nx.no_grad():
            logits = tf.decoder_forward(state.prefix, state.enc, self.model.params, self.config,
                                        src_tokens=state.src_ids).data[:, -1]
        x = logits.astype(np.float64)
        z = x - x.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _decode_all(model, srcs, cfg: DecodeConfig, kind: str, batch_size: int, max_len: int,
                gold_lengths=None) -> list[list[int]]:
    out = []
    for start in range(0, len(srcs), batch_size):
        chunk = srcs[start:start + batch_size]
        if kind == "cmlm":
            gold = None if gold_lengths is None else gold_lengths[start:start + batch_size]
            res = mask_predict_batch(chunk, model, cfg, gold)
        else:
            res = beam_decode_batch(chunk, model, cfg.beam, max_len, cfg.length_normalize)
        out.extend(r.tokens for r in res)
    return out


def describe(kind: str, cfg: DecodeConfig, cached: bool = True) -> str:
    if kind == "cmlm":
        return f"cmlm T={cfg.T} l={cfg.ell}" + (" gold" if cfg.gold_length else "")
    return f"ar b={cfg.beam}" + ("" if cached else " nocache")


def time_decode(model, srcs, references, cfg: DecodeConfig, batch_size: int = 10, repeats: int = 5,
                kind: str | None = None, max_len: int | None = None, detok=None,
                cached: bool = True, warmup: bool = True) -> BenchResult:
    """Median wall time of decoding ``srcs`` in batches of ``batch_size``.

    The clock covers decoding only; models and data are loaded by the
    caller. One untimed pass warms caches first. ``detok`` maps id lists to
    token lists for BLEU (identity when omitted).
    """
    kind = kind or model.kind
    max_len = max_len or model.config.max_len
    runner = model if (kind == "cmlm" or cached) else UncachedAr(model)
    if warmup:
        _decode_all(runner, srcs[:batch_size], cfg, kind, batch_size, max_len)
    times = []
    outputs = None
    calls_before = runner.forward_calls
    for _ in range(repeats):
        t0 = time.perf_counter()
        outputs = _decode_all(runner, srcs, cfg, kind, batch_size, max_len)
        times.append(time.perf_counter() - t0)
    calls = (runner.forward_calls - calls_before) // max(repeats, 1)
    seconds = statistics.median(times)
    hyps = [detok(o) for o in outputs] if detok else outputs
    return BenchResult(describe(kind, cfg, cached), seconds, len(srcs) / seconds,
                       bleu(hyps, references), 1.0, calls, len(srcs), 1, outputs)


def sweep(model_cmlm, model_ar, srcs, references, T_values=range(4, 11), ell_values=(1, 2, 3),
          b_values=(1, 5), batch_size: int = 10, repeats: int = 3, baseline_beam: int = 5,
          detok=None, cached: bool = True) -> list[BenchResult]:
    """Every (T, ell) mask-predict config plus AR baselines, with speedups
    relative to the AR run at ``baseline_beam``."""
    rows = []
    for T in T_values:
        for ell in ell_values:
            rows.append(time_decode(model_cmlm, srcs, references, DecodeConfig(T=T, ell=ell),
                                    batch_size, repeats, "cmlm", detok=detok))
    ar_rows = {b: time_decode(model_ar, srcs, references, DecodeConfig(beam=b), batch_size, repeats,
                              "ar", detok=detok, cached=cached) for b in b_values}
    rows.extend(ar_rows[b] for b in b_values)
    base = ar_rows.get(baseline_beam)
    base_seconds = base.seconds if base is not None else max(r.seconds for r in rows)
    for r in rows:
        r.speedup = base_seconds / r.seconds
    return rows


def write_tsv(path, rows: list[BenchResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(TSV_HEADER + "\n")
        for r in rows:
            fh.write(r.row() + "\n")
