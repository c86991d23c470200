"""Margin-MSE knowledge distillation across neural re-ranking architectures.

A numpy reverse-mode autodiff engine drives a small transformer encoder and
five scorers (CAT, DOT, ColBERT, PreTT, TK) trained on synthetic triples.
"""

from .autodiff import NonFiniteError, ShapeError, Tensor, no_grad
from .losses import LossKind, ScorePairBatch, compute_loss
from .pipeline import (Checkpoint, TrainConfig, ensemble_scores, generate_teacher_scores, rerank,
                       train_student, train_teacher)
from .scorers import ScorerConfig, ScorerKind, make_scorer

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "LossKind", "NonFiniteError", "ScorePairBatch", "ScorerConfig", "ScorerKind",
    "ShapeError", "Tensor", "TrainConfig", "compute_loss", "ensemble_scores",
    "generate_teacher_scores", "make_scorer", "no_grad", "rerank", "train_student",
    "train_teacher",
]
