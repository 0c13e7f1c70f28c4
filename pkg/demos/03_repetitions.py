"""
Iterations remove repeated tokens
=================================

In ``synonym_registers`` each source word has two renderings, one per
register, and one register is used for the whole sentence. Register 0
writes ``s6 s7`` as ``t6 t7``. Register 1 writes an even word ``s6`` as
``t7``, the word register 0 uses for ``s7``, and an odd word ``s7`` as
``u7``. Sources are mostly ascending runs, so starting a run in register 1
and switching to register 0 gives ``t7 t7``, an adjacent repeat. A ``u``
word gives the register away.

A single parallel pass picks each slot's register independently and
repeats a lot. Each further iteration conditions on the slots already
kept, so the sentence settles on one register. Training takes several
minutes on one core.
"""

from maskpredict import data
from maskpredict import experiments as ex
from maskpredict.training import TrainConfig

spec = data.ToyTaskSpec(kind="synonym_registers", vocab_size=16, min_len=4, max_len=16,
                        n_train=4000, n_valid=200, n_test=200, seed=1)
task = ex.task_from_corpus(data.gen_toy_task(spec))
print("source:     ", " ".join(task.test[0][0]))
print("references: ", " | ".join(" ".join(r) for r in task.test_refs[0]))

result = ex.train_on_task(task, "cmlm", "tiny",
                          TrainConfig(steps=3000, max_tokens=1024, peak_lr=1e-3, warmup=300))
print(result.log_lines[-1])

###############################################################################
# Repetition rate and BLEU by number of iterations
# ------------------------------------------------

print(ex.format_table(ex.repetition_table(result.model, task, T_values=(1, 2, 3, 4, 5, 10))))
