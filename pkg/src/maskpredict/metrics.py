"""Corpus BLEU, repetition rate, length buckets and length precision."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

BUCKET_EDGES = (1, 10, 20, 30, 40, math.inf)


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_order: int = 4) -> dict:
    """Clipped n-gram matches/totals and the hypothesis/reference lengths."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references are not aligned")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp = list(hyp)
        refs = [list(r) for r in refs]
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        hyp_len += len(hyp)
        # closest reference length, ties toward the shorter one
        ref_len += min((len(r) for r in refs), key=lambda n: (abs(n - len(hyp)), n))
        for n in range(1, max_order + 1):
            counts = _ngrams(hyp, n)
            best = Counter()
            for r in refs:
                for g, c in _ngrams(r, n).items():
                    if c > best[g]:
                        best[g] = c
            matches[n - 1] += sum(min(c, best[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}


def bleu_from_stats(stats: dict) -> float:
    matches, totals = stats["matches"], stats["totals"]
    if min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    c, r = stats["hyp_len"], stats["ref_len"]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def bleu(hypotheses, references) -> float:
    """Corpus-level BLEU-4 in [0, 100], no smoothing.

    ``references[i]`` is a list of one or more token sequences for
    ``hypotheses[i]``.
    """
    if not hypotheses:
        raise ValueError("BLEU of an empty corpus is undefined")
    return bleu_from_stats(bleu_stats(hypotheses, references))


def repetition_rate(sentences) -> float:
    """Fraction of tokens equal to the token right before them, pooled."""
    repeats = total = 0
    for s in sentences:
        s = list(s)
        total += len(s)
        repeats += sum(1 for a, b in zip(s, s[1:]) if a == b)
    return repeats / total if total else 0.0


def bucket_label(lo, hi) -> str:
    return f"{lo}<=N" if math.isinf(hi) else f"{lo}<=N<{hi}"


def bucket_by_length(references, hypotheses, edges=BUCKET_EDGES) -> dict:
    """BLEU per reference-length bucket; ``None`` for empty buckets.

    Bucketing uses the first reference's length.
    """
    out = {}
    for lo, hi in zip(edges, edges[1:]):
        idx = [i for i, refs in enumerate(references) if lo <= len(refs[0]) < hi]
        label = bucket_label(lo, hi)
        out[label] = {
            "count": len(idx),
            "bleu": bleu([hypotheses[i] for i in idx], [references[i] for i in idx]) if idx else None,
        }
    return out


def length_precision(candidate_lists, gold_lengths) -> float:
    """Share of examples whose candidate lengths include the gold length."""
    if len(candidate_lists) != len(gold_lengths):
        raise ValueError("candidate lists and gold lengths are not aligned")
    if not gold_lengths:
        return 0.0
    hits = sum(1 for cands, g in zip(candidate_lists, gold_lengths) if g in set(cands))
    return hits / len(gold_lengths)


@dataclass
class MetricsReport:
    bleu: float
    repetition_rate: float
    bucket_bleu: dict = field(default_factory=dict)
    length_precision: float | None = None
    n_sentences: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(hypotheses, references, candidate_lists=None) -> MetricsReport:
    lp = None
    if candidate_lists is not None:
        lp = length_precision(candidate_lists, [len(r[0]) for r in references])
    return MetricsReport(
        bleu=bleu(hypotheses, references),
        repetition_rate=repetition_rate(hypotheses),
        bucket_bleu={k: v["bleu"] for k, v in bucket_by_length(references, hypotheses).items()},
        length_precision=lp,
        n_sentences=len(hypotheses),
    )
