"""Pairwise training and distillation losses over (positive, negative) score pairs.

Student scores are :class:`Tensor` objects so gradients flow back into the
scorer; teacher scores are constants. Every loss is a batch mean.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .autodiff import Tensor

ArrayLike = Union[Tensor, np.ndarray, list, tuple]


class LossKind(str, enum.Enum):
    MARGIN_MSE = "margin_mse"
    POINTWISE_MSE = "pointwise_mse"
    WEIGHTED_RANKNET = "weighted_ranknet"
    RANKNET = "ranknet"

    @property
    def needs_teacher(self) -> bool:
        return self is not LossKind.RANKNET


class MissingTeacherScores(ValueError):
    pass


def _vec(x: ArrayLike, name: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim != 1:
        t = t.reshape(-1)
    if t.size == 0:
        raise ValueError(f"{name}: empty batch")
    return t


@dataclass
class ScorePairBatch:
    student_pos: ArrayLike
    student_neg: ArrayLike
    teacher_pos: Optional[ArrayLike] = None
    teacher_neg: Optional[ArrayLike] = None

    def __post_init__(self):
        self.student_pos = _vec(self.student_pos, "student_pos")
        self.student_neg = _vec(self.student_neg, "student_neg")
        if (self.teacher_pos is None) != (self.teacher_neg is None):
            raise MissingTeacherScores("teacher_pos and teacher_neg must both be given")
        if self.teacher_pos is not None:
            self.teacher_pos = np.asarray(
                self.teacher_pos.data if isinstance(self.teacher_pos, Tensor) else self.teacher_pos,
                dtype=np.float64).reshape(-1)
            self.teacher_neg = np.asarray(
                self.teacher_neg.data if isinstance(self.teacher_neg, Tensor) else self.teacher_neg,
                dtype=np.float64).reshape(-1)
        sizes = {self.student_pos.size, self.student_neg.size}
        if self.has_teacher:
            sizes |= {self.teacher_pos.size, self.teacher_neg.size}
        if len(sizes) != 1:
            raise ValueError(f"score lists are not aligned: sizes {sorted(sizes)}")

    @property
    def has_teacher(self) -> bool:
        return self.teacher_pos is not None

    @property
    def size(self) -> int:
        return self.student_pos.size

    def student_margin(self) -> Tensor:
        return self.student_pos - self.student_neg

    def teacher_margin(self) -> np.ndarray:
        if not self.has_teacher:
            raise MissingTeacherScores("this loss needs teacher scores")
        return self.teacher_pos - self.teacher_neg


def ranknet_loss(pos: ArrayLike, neg: ArrayLike) -> Tensor:
    """Mean of ``log(1 + exp(-(pos - neg)))``."""
    batch = ScorePairBatch(pos, neg)
    return (-batch.student_margin()).softplus().mean()


def margin_mse_loss(batch: ScorePairBatch) -> Tensor:
    """Mean squared difference between student and teacher margins."""
    diff = batch.student_margin() - batch.teacher_margin()
    return (diff * diff).mean()


def pointwise_mse_loss(batch: ScorePairBatch) -> Tensor:
    if not batch.has_teacher:
        raise MissingTeacherScores("pointwise MSE needs teacher scores")
    dp = batch.student_pos - batch.teacher_pos
    dn = batch.student_neg - batch.teacher_neg
    return (dp * dp).mean() + (dn * dn).mean()


def weighted_ranknet_loss(batch: ScorePairBatch) -> Tensor:
    """RankNet per pair, scaled by ``|teacher margin|``, averaged over the batch."""
    weight = np.abs(batch.teacher_margin())
    return ((-batch.student_margin()).softplus() * weight).mean()


def compute_loss(kind: LossKind | str, batch: ScorePairBatch) -> Tensor:
    kind = LossKind(kind)
    if kind is LossKind.RANKNET:
        return ranknet_loss(batch.student_pos, batch.student_neg)
    if not batch.has_teacher:
        raise MissingTeacherScores(f"{kind.value} needs teacher scores")
    if kind is LossKind.MARGIN_MSE:
        return margin_mse_loss(batch)
    if kind is LossKind.POINTWISE_MSE:
        return pointwise_mse_loss(batch)
    return weighted_ranknet_loss(batch)
