"""Desk-scale experiment plumbing shared by the CLI, the tests and the demo
scripts: presets, task directories, corpus decoding and the four analysis
tables (repetitions by T, BLEU by length bucket, length candidates, raw vs
distilled training)."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data
from . import transformer as tf
from .cmlm import CmlmModel, length_candidates, model_from_params
from .data import PAD, Vocab
from .decoding import DecodeConfig, beam_decode_batch, mask_predict_batch
from .metrics import bleu, bucket_by_length, length_precision, repetition_rate
from .numerics import no_grad
from .training import TrainConfig, train
from .transformer import ModelConfig

log = logging.getLogger(__name__)

# (layers, heads, d_model, d_hidden, dropout, init_std)
PRESETS = {
    "tiny": dict(layers=2, heads=4, d_model=64, d_hidden=256, dropout=0.0, init_std=0.08),
    "small": dict(layers=6, heads=8, d_model=512, d_hidden=512, dropout=0.3, init_std=0.02),
    "base": dict(layers=6, heads=8, d_model=512, d_hidden=2048, dropout=0.3, init_std=0.02),
}

# the paper-scale optimisation budget, kept for reference; desk runs use TrainConfig defaults
PAPER_TRAIN = dict(steps=300_000, max_tokens=128_000, peak_lr=5e-4, warmup=10_000)


def model_config(preset: str, kind: str, vocab_size: int, max_len: int, **overrides) -> ModelConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    fields = dict(PRESETS[preset])
    fields.update(overrides)
    return ModelConfig(vocab_size=vocab_size, max_len=max_len,
                       decoder_attention="bidirectional" if kind == "cmlm" else "causal", **fields)


# -- task directories --------------------------------------------------------


@dataclass
class TaskData:
    vocab: Vocab
    train: list
    valid: list
    test: list
    test_refs: list  # list of reference lists (token tuples)

    def encoded(self, split: str) -> list:
        return data.encode_pairs(getattr(self, split), self.vocab)

    def references(self, split: str = "test") -> list:
        if split == "test":
            return self.test_refs
        return [[t] for _, t in getattr(self, split)]

    @property
    def max_len(self) -> int:
        return max(max(len(s), len(t)) for split in (self.train, self.valid, self.test) for s, t in split)


def task_from_corpus(corpus: data.ToyCorpus) -> TaskData:
    vocab = Vocab.build(corpus.train)
    return TaskData(vocab, corpus.train, corpus.valid, corpus.test, corpus.references("test"))


def save_task(task: TaskData, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        data.write_corpus(d / f"{split}.tsv", getattr(task, split))
    if any(len(r) > 1 for r in task.test_refs):
        (d / "test.refs").write_text(
            "".join("\t".join(" ".join(r) for r in refs) + "\n" for refs in task.test_refs), encoding="utf-8")
    task.vocab.save(d / "vocab.txt")


def load_task(directory, train_file: str = "train.tsv") -> TaskData:
    d = Path(directory)
    vocab = Vocab.load(d / "vocab.txt") if (d / "vocab.txt").exists() else None
    train_pairs, vocab = data.load_corpus(d / train_file, vocab)
    valid, _ = data.load_corpus(d / "valid.tsv", vocab)
    test, _ = data.load_corpus(d / "test.tsv", vocab)
    refs = data.read_references(d / "test.refs") if (d / "test.refs").exists() else [[t] for _, t in test]
    return TaskData(vocab, train_pairs, valid, test, refs)


# -- training and decoding ---------------------------------------------------


def train_on_task(task: TaskData, kind: str, preset: str = "tiny", train_config: TrainConfig | None = None,
                  checkpoint_dir=None, log_file=None, **model_overrides):
    cfg = model_config(preset, kind, len(task.vocab), task.max_len + 2, **model_overrides)
    return train(task.encoded("train"), task.encoded("valid"), kind, cfg, train_config or TrainConfig(),
                 checkpoint_dir, log_file)


def load_model(path):
    params, config, _ = tf.load_checkpoint(path)
    return model_from_params(params, config)


def decode_sources(model, srcs, cfg: DecodeConfig, batch_size: int = 10, gold_lengths=None,
                   trace: bool = False) -> list:
    """Decode id sequences in batches; returns one DecodeResult per source."""
    out = []
    for start in range(0, len(srcs), batch_size):
        chunk = srcs[start:start + batch_size]
        if isinstance(model, CmlmModel):
            gold = None if gold_lengths is None else gold_lengths[start:start + batch_size]
            out.extend(mask_predict_batch(chunk, model, cfg, gold, trace))
        else:
            out.extend(beam_decode_batch(chunk, model, cfg.beam, model.config.max_len, cfg.length_normalize))
    return out


def translate(model, task: TaskData, cfg: DecodeConfig, split: str = "test", batch_size: int = 10,
              trace: bool = False) -> tuple[list, list]:
    """Decode a split; returns (token-string hypotheses, raw DecodeResults)."""
    pairs = getattr(task, split)
    srcs = [task.vocab.encode(s) for s, _ in pairs]
    gold = [len(t) for _, t in pairs] if cfg.gold_length else None
    results = decode_sources(model, srcs, cfg, batch_size, gold, trace)
    return [task.vocab.decode(r.tokens) for r in results], results


def candidate_lists(model: CmlmModel, task: TaskData, ell: int, split: str = "test") -> list[list[int]]:
    srcs = [task.vocab.encode(s) for s, _ in getattr(task, split)]
    out = []
    with no_grad():
        for start in range(0, len(srcs), 64):
            enc, _ = model.encode(data.pad(srcs[start:start + 64]))
            logits = model.length_logits(enc).data
            out.extend([n for n, _ in length_candidates(row, ell, model.config.max_len)] for row in logits)
    return out


# -- analysis tables ---------------------------------------------------------


def repetition_table(model, task: TaskData, T_values=(1, 2, 3, 4, 5), ell: int = 1) -> list[dict]:
    """BLEU and adjacent-repetition rate when decoding with each T."""
    rows = []
    for T in T_values:
        hyps, _ = translate(model, task, DecodeConfig(T=T, ell=ell))
        rows.append({"T": T, "bleu": bleu(hyps, task.test_refs), "reps": repetition_rate(hyps)})
    return rows


def bucket_table(model, task: TaskData, T_values=(4, 10), ell: int = 1, include_T_equals_N: bool = True) -> dict:
    """Per-length-bucket BLEU for each T (and T = N when requested)."""
    table = {}
    configs = [(str(T), DecodeConfig(T=T, ell=ell)) for T in T_values]
    for name, cfg in configs:
        hyps, _ = translate(model, task, cfg)
        table[f"T={name}"] = bucket_by_length(task.test_refs, hyps)
    if include_T_equals_N:
        hyps = []
        for (s, _), refs in zip(task.test, task.test_refs):
            n_guess = length_candidates_for(model, task.vocab.encode(s), 1)[0]
            res = mask_predict_batch([task.vocab.encode(s)], model, DecodeConfig(T=max(n_guess, 1), ell=ell))
            hyps.append(task.vocab.decode(res[0].tokens))
        table["T=N"] = bucket_by_length(task.test_refs, hyps)
    return table


def length_candidates_for(model: CmlmModel, src_ids, ell: int) -> list[int]:
    with no_grad():
        enc, _ = model.encode(np.asarray(src_ids, dtype=np.int64)[None, :])
        logits = model.length_logits(enc).data[0]
    return [n for n, _ in length_candidates(logits, ell, model.config.max_len)]


def length_table(model, task: TaskData, ell_values=range(1, 10), T: int = 10) -> list[dict]:
    """BLEU and length precision per number of length candidates, plus gold."""
    gold = [len(refs[0]) for refs in task.test_refs]
    biggest = candidate_lists(model, task, max(ell_values))
    rows = []
    for ell in ell_values:
        hyps, _ = translate(model, task, DecodeConfig(T=T, ell=ell))
        lp = length_precision([c[:ell] for c in biggest], gold)
        rows.append({"ell": ell, "bleu": bleu(hyps, task.test_refs), "lp": lp})
    hyps, _ = translate(model, task, DecodeConfig(T=T, ell=1, gold_length=True))
    rows.append({"ell": "gold", "bleu": bleu(hyps, task.test_refs), "lp": None})
    return rows


def distillation_table(raw_model, dist_model, task: TaskData, T_values=(1, 4, 10), ell: int = 5) -> list[dict]:
    rows = []
    for T in T_values:
        cfg = DecodeConfig(T=T, ell=ell)
        raw, _ = translate(raw_model, task, cfg)
        dist, _ = translate(dist_model, task, cfg)
        rows.append({"T": T, "raw": bleu(raw, task.test_refs), "dist": bleu(dist, task.test_refs)})
    return rows


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join("" if r[k] is None else f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k])
                               for k in keys))
    return "\n".join(lines) + "\n"


def format_bucket_table(table: dict) -> str:
    cols = list(table)
    buckets = list(next(iter(table.values())))
    lines = ["bucket\tcount\t" + "\t".join(cols)]
    for b in buckets:
        count = next(iter(table.values()))[b]["count"]
        vals = ["" if table[c][b]["bleu"] is None else f"{table[c][b]['bleu']:.2f}" for c in cols]
        lines.append(f"{b}\t{count}\t" + "\t".join(vals))
    return "\n".join(lines) + "\n"


def config_items(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
