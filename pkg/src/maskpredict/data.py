"""Vocabularies, TSV corpora, token-count batching and synthetic tasks."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, MASK, LENGTH, BOS, EOS = range(6)
SPECIALS = ("<pad>", "<unk>", "<mask>", "<length>", "<bos>", "<eos>")

Pair = tuple  # (source tokens, target tokens), each a tuple of str


class CorpusError(ValueError):
    pass


class Vocab:
    """Token <-> id bijection with the six reserved ids first."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD, BOS, EOS)]

    @classmethod
    def build(cls, pairs) -> "Vocab":
        """Content tokens ordered by frequency, ties broken lexicographically."""
        counts = Counter()
        for src, tgt in pairs:
            counts.update(src)
            counts.update(tgt)
        ordered = sorted((t for t in counts if t not in SPECIALS), key=lambda t: (-counts[t], t))
        return cls(ordered)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(SPECIALS):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(line for line in Path(path).read_text(encoding="utf-8").split("\n") if line)


# -- corpora -----------------------------------------------------------------


def parse_corpus(text: str, source: str = "<string>") -> list[Pair]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusError(f"{source}:{lineno}: expected 'source<TAB>target'")
        src, tgt = line.split("\t", 1)
        pairs.append((tuple(src.split()), tuple(tgt.split())))
    return pairs


def load_corpus(path, vocab: Vocab | None = None) -> tuple[list[Pair], Vocab]:
    """Read a TSV corpus; build the vocabulary from it when none is given."""
    pairs = parse_corpus(Path(path).read_text(encoding="utf-8"), str(path))
    if vocab is None:
        vocab = Vocab.build(pairs)
    return pairs, vocab


def write_corpus(path, pairs) -> None:
    Path(path).write_text("".join(" ".join(s) + "\t" + " ".join(t) + "\n" for s, t in pairs),
                          encoding="utf-8")


def encode_pairs(pairs, vocab: Vocab) -> list[tuple[list[int], list[int]]]:
    return [(vocab.encode(s), vocab.encode(t)) for s, t in pairs]


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray  # [B, Ls] int, PAD-padded
    tgt: np.ndarray  # [B, Lt] int, PAD-padded
    index: np.ndarray  # positions of the rows in the original corpus

    @property
    def size(self) -> int:
        return self.src.shape[0]


def pad(seqs, length: int | None = None, value: int = PAD) -> np.ndarray:
    length = max((len(s) for s in seqs), default=0) if length is None else length
    out = np.full((len(seqs), length), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def make_batches(encoded, max_tokens: int, rng: np.random.Generator | None = None,
                 extra: int = 0, sort: bool = True) -> list[Batch]:
    """Group length-sorted pairs so ``rows * (longest side + extra) <= max_tokens``.

    ``extra`` reserves room for framing tokens (LENGTH, BOS/EOS). Batch order
    is shuffled with ``rng`` when given. With ``sort=False`` pairs are packed
    in a random (``rng``) or corpus order instead, so batches mix lengths.
    """
    sizes = [max(len(s), len(t)) + extra for s, t in encoded]
    for i, n in enumerate(sizes):
        if n > max_tokens:
            raise ValueError(f"sentence {i} needs {n} tokens, more than max_tokens={max_tokens}")
    if sort:
        order = sorted(range(len(encoded)), key=lambda i: (len(encoded[i][1]), len(encoded[i][0]), i))
    else:
        order = rng.permutation(len(encoded)).tolist() if rng is not None else range(len(encoded))
    batches, current, longest = [], [], 0
    for i in order:
        width = max(longest, sizes[i])
        if current and width * (len(current) + 1) > max_tokens:
            batches.append(current)
            current, width = [], sizes[i]
        current.append(i)
        longest = width
    if current:
        batches.append(current)
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[j] for j in perm]
    return [Batch(pad([encoded[i][0] for i in b]), pad([encoded[i][1] for i in b]), np.array(b))
            for b in batches]


# -- synthetic tasks ---------------------------------------------------------


TASKS = ("copy", "reverse", "dict_swap", "synonym_registers")


@dataclass
class ToyTaskSpec:
    kind: str = "copy"
    vocab_size: int = 64
    min_len: int = 3
    max_len: int = 20
    n_train: int = 8000
    n_valid: int = 500
    n_test: int = 500
    seed: int = 1
    run_prob: float = 0.9

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}; choose from {', '.join(TASKS)}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.vocab_size < (4 if self.kind == "synonym_registers" else 2):
            raise ValueError(f"vocab_size={self.vocab_size} too small for {self.kind}")


@dataclass
class ToyCorpus:
    train: list
    valid: list
    test: list
    # test-set alternative references (only synonym_registers has them)
    test_refs: list | None = None

    def references(self, split: str = "test") -> list[list[tuple]]:
        pairs = getattr(self, split)
        if split == "test" and self.test_refs is not None:
            return self.test_refs
        return [[t] for _, t in pairs]


def _swap_adjacent(seq: list) -> list:
    out = list(seq)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def _register(src: list[int], which: int, k: int) -> tuple:
    # register 0 renders source word s as "t{s}". Register 1 renders an even s
    # as "t{s+1 mod k}", the word register 0 uses for s+1, so mixing registers
    # inside an ascending run repeats a word; an odd s gets "u{s}", a word only
    # register 1 uses, so one observed token can reveal the register.
    if which == 0:
        return tuple(f"t{s}" for s in src)
    return tuple(f"t{(s + 1) % k}" if s % 2 == 0 else f"u{s}" for s in src)


def _sample_source(spec: ToyTaskSpec, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    k = spec.vocab_size
    if spec.kind != "synonym_registers":
        return [int(x) for x in rng.integers(0, k, size=n)]
    # mostly ascending runs, no immediate repeats
    seq = [int(rng.integers(0, k))]
    while len(seq) < n:
        prev = seq[-1]
        if rng.random() < spec.run_prob:
            seq.append((prev + 1) % k)
        else:
            allowed = [x for x in range(k) if x not in (prev, (prev + 1) % k)]
            seq.append(allowed[int(rng.integers(0, len(allowed)))])
    return seq


def gen_toy_task(spec: ToyTaskSpec) -> ToyCorpus:
    """Deterministic train/valid/test corpora, disjoint by source sentence."""
    rng = np.random.default_rng(spec.seed)
    k = spec.vocab_size
    bijection = rng.permutation(k)
    total = spec.n_train + spec.n_valid + spec.n_test
    seen, sources = set(), []
    attempts = 0
    while len(sources) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise ValueError("cannot draw enough distinct source sentences; widen lengths or vocab")
        s = _sample_source(spec, rng)
        key = tuple(s)
        if key not in seen:
            seen.add(key)
            sources.append(s)

    def render(src: list[int]) -> tuple[tuple, list[tuple]]:
        words = tuple(str(x) for x in src)
        if spec.kind == "copy":
            return words, [words]
        if spec.kind == "reverse":
            return words, [words[::-1]]
        if spec.kind == "dict_swap":
            return words, [tuple(_swap_adjacent([str(int(bijection[x])) for x in src]))]
        refs = [_register(src, 0, k), _register(src, 1, k)]
        return tuple(f"s{x}" for x in src), refs

    train, valid, test, test_refs = [], [], [], []
    for i, s in enumerate(sources):
        words, refs = render(s)
        target = refs[int(rng.integers(0, len(refs)))] if len(refs) > 1 else refs[0]
        if i < spec.n_train:
            train.append((words, target))
        elif i < spec.n_train + spec.n_valid:
            valid.append((words, target))
        else:
            test.append((words, target))
            test_refs.append(refs)
    return ToyCorpus(train, valid, test, test_refs if spec.kind == "synonym_registers" else None)


def write_toy_task(corpus: ToyCorpus, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        write_corpus(d / f"{split}.tsv", getattr(corpus, split))
    if corpus.test_refs is not None:
        # one line per test sentence, alternative references separated by tabs
        (d / "test.refs").write_text(
            "".join("\t".join(" ".join(r) for r in refs) + "\n" for refs in corpus.test_refs),
            encoding="utf-8")


def read_references(path) -> list[list[tuple]]:
    return [[tuple(r.split()) for r in line.split("\t")]
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
