"""Conditional masked language models with mask-predict decoding, an
autoregressive baseline, and the tooling to train, distill, decode,
score and time them on synthetic transduction tasks.

Everything runs on numpy: a small reverse-mode autodiff engine lives in
:mod:`maskpredict.numerics` and the encoder-decoder in
:mod:`maskpredict.transformer`.
"""

from .cmlm import ArModel, CmlmModel, build_model
from .decoding import DecodeConfig, beam_decode, mask_predict, mask_predict_single, mask_schedule
from .metrics import bleu, repetition_rate
from .transformer import ModelConfig

__all__ = [
    "ArModel", "CmlmModel", "DecodeConfig", "ModelConfig", "beam_decode", "bleu", "build_model",
    "mask_predict", "mask_predict_single", "mask_schedule", "repetition_rate",
]
__version__ = "0.1.0"
