"""distilrank: desk-scale neural re-ranking and knowledge distillation.

A MaxP passage re-ranker over a mini-BERT encoder, the TinyBERT loss
family, one-step hard-label-augmented distillation, IR evaluation with
significance testing, and MAC accounting.
"""

from .encoder import Encoder, EncoderConfig, EncoderTrace
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .flops import estimate_macs
from .losses import KDHyper, LayerMap, LossBreakdown, ProjectionSet
from .pipeline import DistillPlan, finetune, run_distillation
from .tensor import Tensor

__all__ = [
    "Checkpoint",
    "DistillPlan",
    "Encoder",
    "EncoderConfig",
    "EncoderTrace",
    "KDHyper",
    "LayerMap",
    "LossBreakdown",
    "ProjectionSet",
    "Tensor",
    "estimate_macs",
    "finetune",
    "load_checkpoint",
    "run_distillation",
    "save_checkpoint",
]
