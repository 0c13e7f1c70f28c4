"""Shared test utilities: finite differences and lookup-table scorers."""

from __future__ import annotations

import numpy as np

from maskpredict import numerics as nx


def numeric_grad(f, x: np.ndarray, index, h: float) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``x[index]`` (``x`` mutated in place)."""
    old = x[index]
    x[index] = old + h
    up = float(f())
    x[index] = old - h
    down = float(f())
    x[index] = old
    return (up - down) / (2 * h)


def check_grads(loss_fn, tensors: dict, rng, n_coords: int = 20, h: float = 1e-6, floor: float = 1e-8):
    """Compare autodiff against central differences on random coordinates.

    ``loss_fn()`` builds and returns a scalar Tensor from ``tensors``.
    Returns the worst relative error and the number of coordinates checked.
    """
    for t in tensors.values():
        t.grad = None
    nx.backward(loss_fn())
    worst, checked = 0.0, 0
    names = sorted(tensors)
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        t = tensors[name]
        index = tuple(int(rng.integers(s)) for s in t.shape)
        with nx.no_grad():
            num = numeric_grad(lambda: loss_fn().item(), t.data, index, h)
        ana = 0.0 if t.grad is None else float(t.grad[index])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
        checked += 1
    return worst, checked


class LookupScorer:
    """CMLM scorer whose token distributions come from a table.

    ``table`` maps the tuple of decoder inputs (MASK where masked) to an
    ``[N, V]`` probability array; ``lengths`` is the length distribution
    (indexable by length class). Counts ``forward_calls`` like the real model.
    """

    class _Config:
        def __init__(self, max_len):
            self.max_len = max_len

    def __init__(self, table: dict, length_probs, max_len: int):
        self.table = {tuple(k): np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.length_probs = np.asarray(length_probs, dtype=np.float64)
        self.config = self._Config(max_len)
        self.forward_calls = 0
        self.seen = []

    def encode(self, src, rng=None):
        src = np.asarray(src)
        return nx.Tensor(np.zeros((src.shape[0], 1, 1))), src

    def length_logits(self, enc):
        rows = enc.shape[0]
        return nx.Tensor(np.log(np.tile(self.length_probs, (rows, 1)) + 1e-300), dtype=np.float64)

    def token_probs(self, tgt, enc, src_ids):
        self.forward_calls += 1
        tgt = np.asarray(tgt)
        rows = []
        for r in range(tgt.shape[0]):
            key = tuple(int(x) for x in tgt[r] if x != 0)
            self.seen.append(key)
            probs = self.table[key]
            out = np.zeros((tgt.shape[1], probs.shape[1]))
            out[: probs.shape[0]] = probs
            out[probs.shape[0]:, 0] = 1.0
            rows.append(out)
        return np.stack(rows)


class MarkovAr:
    """AR scorer with log-probs given by a function of the prefix (no source).

    ``logprob(prefix) -> [V]`` over ids; used for exhaustive beam tests.
    """

    class _State:
        def __init__(self, rows):
            self.prefixes = [[] for _ in range(rows)]

        def reorder(self, rows):
            self.prefixes = [list(self.prefixes[r]) for r in rows]

    class _Config:
        def __init__(self, max_len):
            self.max_len = max_len

    def __init__(self, logprob, max_len: int):
        self.logprob = logprob
        self.config = self._Config(max_len)
        self.forward_calls = 0

    def start(self, src, copies: int = 1):
        return self._State(np.asarray(src).shape[0] * copies)

    def step(self, tokens, state):
        self.forward_calls += 1
        out = []
        for i, tok in enumerate(np.asarray(tokens)):
            state.prefixes[i].append(int(tok))
            out.append(self.logprob(tuple(state.prefixes[i][1:])))  # drop BOS
        return np.stack(out)
