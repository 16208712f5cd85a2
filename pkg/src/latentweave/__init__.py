"""Desk-scale interleaved latent-text reasoning.

A tiny causal transformer that alternates text generation with fixed-length
segments of continuous latent vectors, trained in two stages against
supervision targets selected from helper-image features by a momentum
teacher.
"""

from .autograd import Tensor, cosine_sim, finite_diff_check, no_grad, softmax
from .model import ModelConfig, TransformerModel
from .sequences import (
    InterleavedSequence,
    LatentSegment,
    TextSegment,
    build_supervision_sequence,
    decode,
    validate,
)
from .teacher import SupervisionSet, build_targets, ema_update, group_mean, select_topk
from .training import TrainConfig, run_training, stage1_loss, stage2_loss
from .tasks import DatasetSpec, Trajectory, generate

__all__ = [
    "Tensor", "cosine_sim", "finite_diff_check", "no_grad", "softmax",
    "ModelConfig", "TransformerModel",
    "InterleavedSequence", "LatentSegment", "TextSegment",
    "build_supervision_sequence", "decode", "validate",
    "SupervisionSet", "build_targets", "ema_update", "group_mean", "select_topk",
    "TrainConfig", "run_training", "stage1_loss", "stage2_loss",
    "DatasetSpec", "Trajectory", "generate",
]

__version__ = "0.1.0"
