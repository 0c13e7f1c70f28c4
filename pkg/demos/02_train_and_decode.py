"""
Train a tiny CMLM and decode with it
====================================

A two-layer CMLM learns the copy task (target = source) in a few hundred
steps on one CPU core (about a minute). We then decode held-out sources
with different numbers of mask-predict iterations and length candidates.
"""

from maskpredict import data
from maskpredict import experiments as ex
from maskpredict.decoding import DecodeConfig
from maskpredict.metrics import bleu
from maskpredict.training import TrainConfig

###############################################################################
# Make a small task
# -----------------

spec = data.ToyTaskSpec(kind="copy", vocab_size=16, min_len=3, max_len=10,
                        n_train=2000, n_valid=100, n_test=100, seed=1)
task = ex.task_from_corpus(data.gen_toy_task(spec))
print("example pair:", " ".join(task.train[0][0]), "->", " ".join(task.train[0][1]))

###############################################################################
# Train
# -----
# The log has one line per step; we show every 100th.

result = ex.train_on_task(task, "cmlm", "tiny",
                          TrainConfig(steps=600, max_tokens=1024, peak_lr=1e-3, warmup=60))
for line in result.log_lines:
    if line.startswith(("valid", "final")) or any(f"step={s} " in line for s in (1, 100, 300, 600)):
        print(line)
model = result.model

###############################################################################
# Decode
# ------
# T is the number of mask-predict iterations, ell the number of length
# candidates decoded in parallel.

for T, ell in [(1, 1), (2, 1), (4, 1), (4, 3)]:
    hyps, results = ex.translate(model, task, DecodeConfig(T=T, ell=ell))
    print(f"T={T} ell={ell}: BLEU {bleu(hyps, task.test_refs):6.2f}   e.g. {' '.join(hyps[0])}")
