"""
Mask-predict, one iteration at a time
=====================================

Mask-predict starts from a fully masked target of a chosen length, predicts
every slot in one parallel pass, then repeatedly re-masks the slots it is
least sure about and predicts them again, now conditioned on the rest.

This demo uses a scorer built from a lookup table, so every number is
visible and nothing needs training.
"""

import numpy as np

from maskpredict.data import MASK
from maskpredict.decoding import mask_predict_single, mask_schedule

###############################################################################
# How many slots get re-masked?
# -----------------------------
# At iteration t of T the number of masked slots falls linearly from N.

for N, T in [(12, 3), (10, 10), (7, 4)]:
    print(f"N={N:2d} T={T:2d}:", [mask_schedule(N, T, t) for t in range(T)])

###############################################################################
# A scorer that reads from a table
# --------------------------------
# Ids 6, 7 and 8 stand for the words "a", "b" and "c". The table maps the
# decoder input (MASK where masked) to one probability row per slot.

WORDS = {6: "a", 7: "b", 8: "c", MASK: "_"}


def row(**p):
    out = np.zeros(9)
    for word, prob in p.items():
        out[{"a": 6, "b": 7, "c": 8}[word]] = prob
    return out


table = {
    (MASK,) * 4: [row(a=.7, b=.2, c=.1), row(b=.4, c=.35, a=.25),
                  row(b=.4, a=.35, c=.25), row(b=.4, c=.3, a=.3)],
    (6, MASK, MASK, 7): [row(a=.9, b=.1), row(c=.8, a=.2), row(a=.6, b=.4), row(b=1.0)],
}


class TableScorer:
    class config:
        max_len = 4

    def encode(self, src):
        return np.zeros((len(src), 1, 1)), np.asarray(src)

    def token_probs(self, tgt, enc, src_ids):
        rows = [table[tuple(int(x) for x in r)] for r in np.asarray(tgt)]
        return np.array(rows)


###############################################################################
# Decode with T=2
# ---------------
# The first pass guesses "a b b b", repeating "b" because every slot was
# predicted independently. The three "b" slots tie at 0.4; the two with the
# lowest index get re-masked and re-predicted with "a" and "b" visible.

y, p, history = mask_predict_single([6], 4, TableScorer(), T=2, trace=True)
for t, masked, tokens, probs in history:
    shown = " ".join(WORDS[int(x)] for x in tokens)
    print(f"t={t}: re-masked {np.flatnonzero(masked).tolist()} -> {shown}  p={np.round(probs, 2).tolist()}")
print("average log-probability:", round(float(np.log(p).mean()), 4))
