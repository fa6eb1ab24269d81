"""Lightweight image captioning pipeline.

Concept retrieval over frozen grid features, concept-conditioned channel
modulation, a small seq2seq-masked fusion transformer with an ensemble
prediction head, staged knowledge distillation, beam-search decoding with
an incremental cache, caption metrics, and a parameter/FLOPs/latency
profiler.
"""

from .config import RunConfig, load_run_config, save_run_config
from .decoding import beam_search, greedy_decode, make_context
from .fusion import FusionConfig, build_seq2seq_mask
from .metrics import bleu4, cider
from .model import CaptionModel, ModelConfig, desk_config, production_config
from .pipeline import caption_image
from .profiler import build_budget_report, count_flops, count_params
from .tensor import Tensor, backward, gradient_check
from .tokenizer import Vocab, decode, encode, load_vocab

__version__ = "0.1.0"

__all__ = [
    "CaptionModel",
    "FusionConfig",
    "ModelConfig",
    "RunConfig",
    "Tensor",
    "Vocab",
    "backward",
    "beam_search",
    "bleu4",
    "build_budget_report",
    "build_seq2seq_mask",
    "caption_image",
    "cider",
    "count_flops",
    "count_params",
    "decode",
    "desk_config",
    "encode",
    "gradient_check",
    "greedy_decode",
    "load_run_config",
    "load_vocab",
    "make_context",
    "production_config",
    "save_run_config",
    "__version__",
]
