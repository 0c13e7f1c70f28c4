"""Training objectives, the optimisation loop, checkpoint averaging and
sequence-level distillation."""

from __future__ import annotations

import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import transformer as tf
from .cmlm import ArModel, CmlmModel, ar_target, build_model, with_length_token
from .data import BOS, EOS, MASK, PAD, Batch, make_batches, pad
from .transformer import ModelConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


# -- masking -----------------------------------------------------------------


@dataclass
class MaskSample:
    tgt_input: np.ndarray
    mask_set: np.ndarray
    obs_set: np.ndarray
    gold: np.ndarray


def sample_mask(gold, rng: np.random.Generator) -> MaskSample:
    """Mask k ~ Uniform{1..N} positions chosen uniformly without replacement."""
    gold = np.asarray(gold, dtype=np.int64)
    n = gold.shape[0]
    if n < 1:
        raise ValueError("cannot mask an empty target")
    k = int(rng.integers(1, n + 1))
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    tgt_input = gold.copy()
    tgt_input[chosen] = MASK
    return MaskSample(tgt_input, chosen, np.setdiff1d(np.arange(n), chosen), gold)


# -- learning rate -----------------------------------------------------------


def lr_schedule(step: int, peak: float = 5e-4, warmup: int = 10000) -> float:
    """Linear warmup to ``peak`` at ``warmup``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if step <= warmup:
        return peak * step / warmup
    return peak * math.sqrt(warmup / step)


# -- losses ------------------------------------------------------------------


def cmlm_loss(batch: Batch, model: CmlmModel, rng: np.random.Generator | None,
              epsilon: float = 0.1, length_weight: float = 1.0, masks: list | None = None,
              dropout_rng: np.random.Generator | None = None, length_epsilon: float | None = None):
    """Smoothed CE over masked target slots plus the length-prediction loss.

    ``masks`` (one :class:`MaskSample` per row) overrides sampling with ``rng``.
    ``length_epsilon`` smooths the length target (default: ``epsilon``).
    Returns ``(loss, stats)`` where ``stats`` holds the two components.
    """
    if batch.size == 0:
        raise ValueError("empty batch")
    lengths = (batch.tgt != PAD).sum(axis=1)
    if masks is None:
        masks = [sample_mask(batch.tgt[i, : lengths[i]], rng) for i in range(batch.size)]
    tgt_in = pad([m.tgt_input for m in masks], batch.tgt.shape[1])
    rows = np.concatenate([np.full(len(m.mask_set), i) for i, m in enumerate(masks)])
    cols = np.concatenate([m.mask_set for m in masks])

    enc, src_ids = model.encode(batch.src, dropout_rng)
    logits = model.decode(tgt_in, enc, src_ids, dropout_rng)
    token_loss = nx.smoothed_cross_entropy(nx.take(logits, (rows, cols)), batch.tgt[rows, cols], epsilon)

    max_len = model.config.max_len
    keep = np.flatnonzero(lengths <= max_len)
    if len(keep) < batch.size:
        log.warning("skipping length loss for %d targets longer than max_len", batch.size - len(keep))
    length_logits = model.length_logits(enc)
    if len(keep):
        eps = epsilon if length_epsilon is None else length_epsilon
        length_loss = nx.smoothed_cross_entropy(nx.take(length_logits, keep), lengths[keep], eps)
        loss = nx.add(token_loss, nx.mul(length_loss, length_weight))
    else:
        length_loss = nx.Tensor(0.0)
        loss = token_loss
    stats = {"token_loss": token_loss.item(), "length_loss": length_loss.item(),
             "masked": int(len(rows)), "logits": logits}
    return loss, stats


def ar_loss(batch: Batch, model: ArModel, epsilon: float = 0.1,
            dropout_rng: np.random.Generator | None = None):
    """Teacher-forced next-token loss over every non-PAD target slot and EOS."""
    lengths = (batch.tgt != PAD).sum(axis=1)
    if (lengths == 0).any():
        raise ValueError("zero-length target in AR batch")
    inputs, outputs = ar_target([batch.tgt[i, : lengths[i]] for i in range(batch.size)])
    enc, src_ids = model.encode(batch.src, dropout_rng)
    logits = model.decode(inputs, enc, src_ids, dropout_rng)
    rows, cols = np.nonzero(outputs != PAD)
    loss = nx.smoothed_cross_entropy(nx.take(logits, (rows, cols)), outputs[rows, cols], epsilon)
    return loss, {"token_loss": loss.item()}


# -- checkpoints -------------------------------------------------------------


class CheckpointError(tf.CheckpointError):
    pass


def average_params(param_sets: list[dict]) -> dict:
    names = set(param_sets[0])
    for p in param_sets[1:]:
        if set(p) != names:
            raise CheckpointError("checkpoints have different parameter names")
        for n in names:
            if p[n].shape != param_sets[0][n].shape:
                raise CheckpointError(f"shape mismatch for {n}")
    out = {}
    for n in sorted(names):
        acc = np.zeros(param_sets[0][n].shape, dtype=np.float64)
        for p in param_sets:
            acc += p[n].data
        out[n] = nx.Tensor((acc / len(param_sets)).astype(param_sets[0][n].data.dtype), requires_grad=True)
    return out


def average_checkpoints(paths) -> tuple[dict, ModelConfig]:
    """Element-wise mean of saved checkpoints sharing one configuration."""
    if not paths:
        raise CheckpointError("no checkpoints to average")
    loaded = [tf.load_checkpoint(p) for p in paths]
    config = loaded[0][1]
    for _, c, _ in loaded[1:]:
        if c != config:
            raise CheckpointError("checkpoints were saved with different model configs")
    return average_params([p for p, _, _ in loaded]), config


@dataclass
class BestCheckpoints:
    """At most ``k`` (validation loss, path) entries, best first."""
    k: int = 5
    entries: list = field(default_factory=list)

    def offer(self, loss: float, step: int, save) -> bool:
        if len(self.entries) >= self.k and loss >= self.entries[-1][0]:
            return False
        path = save(step)
        self.entries.append((loss, step, str(path)))
        self.entries.sort(key=lambda e: (e[0], e[1]))
        while len(self.entries) > self.k:
            _, _, dropped = self.entries.pop()
            Path(dropped).unlink(missing_ok=True)
        return True

    @property
    def paths(self) -> list[str]:
        return [p for _, _, p in self.entries]


# -- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 2000
    max_tokens: int = 4096
    peak_lr: float = 5e-4
    warmup: int | None = None  # default: 5% of steps
    weight_decay: float = 0.01
    clip_norm: float = 10.0
    label_smoothing: float = 0.1
    length_weight: float = 1.0
    length_smoothing: float | None = None  # None: same as label_smoothing
    keep_best: int = 5
    min_steps_between_validations: int = 50
    seed: int = 1
    log_every: int = 1
    # length-sorted batches hold one or two target lengths each, which makes
    # the length classifier chase whatever length the last batch had
    sorted_batches: bool = False

    @property
    def warmup_steps(self) -> int:
        return self.warmup if self.warmup is not None else max(1, int(0.05 * self.steps))


@dataclass
class TrainResult:
    model: object
    validations: list  # (step, loss, token_loss)
    best: BestCheckpoints
    final_valid: dict
    log_lines: list


def validation_loss(model, batches: list[Batch], config: TrainConfig, seed: int = 12345) -> dict:
    """Dropout-free loss over ``batches``; CMLM masks come from a fixed seed."""
    rng = np.random.default_rng(seed)
    tot = tok = 0.0
    weight = 0
    with nx.no_grad():
        for b in batches:
            if isinstance(model, CmlmModel):
                loss, stats = cmlm_loss(b, model, rng, config.label_smoothing, config.length_weight,
                                        length_epsilon=config.length_smoothing)
                w = stats["masked"]
            else:
                loss, stats = ar_loss(b, model, config.label_smoothing)
                w = int((b.tgt != PAD).sum() + b.size)
            tot += loss.item() * w
            tok += stats["token_loss"] * w
            weight += w
    return {"loss": tot / weight, "token_loss": tok / weight}


def train(train_data, valid_data, kind: str, model_config: ModelConfig, config: TrainConfig,
          checkpoint_dir=None, log_file=None) -> TrainResult:
    """Train a ``kind`` ("cmlm" or "ar") model and return the best-k average.

    ``train_data`` / ``valid_data`` are lists of (source ids, target ids).
    Validation runs at each epoch end (no more often than every
    ``min_steps_between_validations`` steps) and once after the last step.
    """
    if not train_data or not valid_data:
        raise ValueError("need nonempty train and valid splits")
    rng = np.random.default_rng(config.seed)
    model = build_model(kind, model_config, config.seed)
    extra = 1
    valid_batches = make_batches(valid_data, config.max_tokens, extra=extra)
    state = nx.AdamState(weight_decay=config.weight_decay)
    no_decay = tf.no_decay_names(model.params)
    tmp = None
    if checkpoint_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="maskpredict-ckpt-")
        checkpoint_dir = tmp.name
    ckpt_dir = Path(checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    best = BestCheckpoints(config.keep_best)
    validations, lines = [], []

    def emit(line: str):
        lines.append(line)
        if log_file is not None:
            log_file.write(line + "\n")
        log.debug(line)

    def save(step):
        path = ckpt_dir / f"{kind}_step{step:06d}.ckpt"
        tf.save_checkpoint(path, model.params, model_config, {"kind": kind, "step": step})
        return path

    def validate(step):
        v = validation_loss(model, valid_batches, config)
        validations.append((step, v["loss"], v["token_loss"]))
        emit(f"valid step={step} loss={v['loss']:.6f} token_loss={v['token_loss']:.6f}")
        best.offer(v["loss"], step, save)

    step = last_valid = 0
    try:
        while step < config.steps:
            for batch in make_batches(train_data, config.max_tokens, rng, extra=extra,
                                      sort=config.sorted_batches):
                step += 1
                lr = lr_schedule(step, config.peak_lr, config.warmup_steps)
                if kind == "cmlm":
                    loss, stats = cmlm_loss(batch, model, rng, config.label_smoothing,
                                            config.length_weight, dropout_rng=rng,
                                            length_epsilon=config.length_smoothing)
                else:
                    loss, stats = ar_loss(batch, model, config.label_smoothing, dropout_rng=rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at step {step} (lr={lr:.3g})")
                for p in model.params.values():
                    p.grad = None
                nx.backward(loss)
                grads = {n: p.grad for n, p in model.params.items() if p.grad is not None}
                gnorm = nx.clip_grad_norm(grads, config.clip_norm)
                nx.adam_step(model.params, grads, state, lr, no_decay)
                if step % config.log_every == 0 or step == 1:
                    extra_stats = "".join(f" {k}={v:.6f}" for k, v in stats.items() if k.endswith("_loss"))
                    emit(f"train step={step} lr={lr:.6g} loss={value:.6f}{extra_stats} gnorm={gnorm:.4f}")
                if step >= config.steps:
                    break
            if step - last_valid >= config.min_steps_between_validations or step >= config.steps:
                validate(step)
                last_valid = step
        for p in model.params.values():
            p.grad = None
        if len(best.paths) > 1:
            params, _ = average_checkpoints(best.paths)
        else:
            params = tf.load_checkpoint(best.paths[0])[0]
        final = build_model(kind, model_config, config.seed)
        final.params = params
        final_valid = validation_loss(final, valid_batches, config)
        emit(f"final averaged={len(best.paths)} loss={final_valid['loss']:.6f} "
             f"token_loss={final_valid['token_loss']:.6f}")
        return TrainResult(final, validations, best, final_valid, lines)
    finally:
        if tmp is not None:
            tmp.cleanup()


# -- distillation ------------------------------------------------------------


def distill_corpus(teacher: ArModel, encoded, beam: int = 5, batch_size: int = 32,
                   max_len: int | None = None) -> tuple[list, int]:
    """Replace each target with the teacher's beam output.

    Returns the new (source, target) list and the number of lines where the
    teacher produced nothing and the gold target was kept.
    """
    from .decoding import beam_decode_batch

    max_len = max_len or teacher.config.max_len
    out, kept = [], 0
    for start in range(0, len(encoded), batch_size):
        chunk = encoded[start:start + batch_size]
        hyps = beam_decode_batch([s for s, _ in chunk], teacher, beam, max_len)
        for (src, gold), hyp in zip(chunk, hyps):
            hyp = [t for t in hyp.tokens if t not in (PAD, BOS, EOS)]
            if not hyp:
                kept += 1
                log.warning("teacher produced an empty translation; keeping the gold target")
                hyp = list(gold)
            out.append((list(src), hyp))
    return out, kept
