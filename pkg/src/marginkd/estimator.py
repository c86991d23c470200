"""A scikit-learn style wrapper: fit on text triples, predict pair scores.

The file-based pipeline is the main interface; this wrapper is a thin,
in-memory convenience over the same training code.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TeacherScoreRecord, TrainingTriple
from .encoder import Vocabulary
from .evaluation import pairwise_accuracy
from .losses import LossKind
from .pipeline import TextIndex, TrainConfig, train_student, train_teacher
from .scorers import NotCacheableError, ScorerConfig, ScorerKind, make_scorer


def _check_texts(row, width: int, what: str) -> tuple[str, ...]:
    if isinstance(row, str) or len(row) != width:
        raise ValueError(f"each {what} must have {width} text fields")
    out = tuple(row)
    for text in out:
        if not isinstance(text, str) or not text.split():
            raise ValueError(f"{what} fields must be non-empty strings")
    return out


def check_triples(X) -> list[tuple[str, str, str]]:
    """Validate ``(query, positive, negative)`` text triples."""
    rows = [_check_texts(r, 3, "triple") for r in X]
    if not rows:
        raise ValueError("no training triples")
    return rows


def check_pairs(X) -> list[tuple[str, str]]:
    rows = [_check_texts(r, 2, "pair") for r in X]
    if not rows:
        raise ValueError("no pairs to score")
    return rows


def check_teacher_scores(y, n: int) -> np.ndarray:
    """Teacher ``(pos, neg)`` scores as a finite ``[n, 2]`` float array."""
    y = check_array(y, dtype=np.float64, ensure_2d=True)
    if y.shape != (n, 2):
        raise ValueError(f"teacher scores must have shape ({n}, 2), got {y.shape}")
    return y


class NeuralRanker(BaseEstimator):
    """Train one of the five scorers on text triples.

    ``fit(X, y)`` takes ``(query, positive, negative)`` texts and, for the
    distillation losses, teacher scores ``y`` of shape ``[n, 2]``.
    ``predict`` scores ``(query, passage)`` pairs and ``transform`` returns
    cached passage representations for the cacheable kinds.
    """

    def __init__(self, kind="dot", loss="ranknet", embed_dim=32, num_layers=2, num_heads=4,
                 ffn_dim=64, learning_rate=3e-3, batch_size=32, max_steps=300, seed=0):
        self.kind = kind
        self.loss = loss
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.seed = seed

    def _texts(self, queries, passages) -> TextIndex:
        return TextIndex(self.vocab_, queries, passages)

    def fit(self, X, y=None):
        rows = check_triples(X)
        loss = LossKind(self.loss)
        kind = ScorerKind(self.kind)
        if loss.needs_teacher and y is None:
            raise ValueError(f"loss {loss.value} needs teacher scores y")
        if kind is ScorerKind.CAT and loss is not LossKind.RANKNET:
            raise ValueError("a CAT ranker is trained as a teacher with the ranknet loss")
        words = sorted({w.casefold() for r in rows for text in r for w in text.split()})
        self.vocab_ = Vocabulary(words)

        queries, passages, pid_of = {}, {}, {}
        triples = []
        for i, (q, p, n) in enumerate(rows):
            queries[f"q{i}"] = q
            for text in (p, n):
                if text not in pid_of:
                    pid_of[text] = str(len(pid_of))
                    passages[pid_of[text]] = text
            triples.append(TrainingTriple(f"q{i}", pid_of[p], pid_of[n]))
        if any(t.pos_id == t.neg_id for t in triples):
            raise ValueError("a triple has identical positive and negative text")

        config = ScorerConfig.default(kind, seed=self.seed, vocab_size=len(self.vocab_),
                                      embed_dim=self.embed_dim, num_layers=self.num_layers,
                                      num_heads=self.num_heads, ffn_dim=self.ffn_dim)
        scorer = make_scorer(config)
        cfg = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                          max_steps=self.max_steps, seed=self.seed, loss_kind=loss,
                          log_interval=max(1, self.max_steps))
        texts = self._texts(queries, passages)
        if kind is ScorerKind.CAT:
            ckpt = train_teacher(scorer, triples, texts, cfg)
        else:
            teacher = None
            if y is not None:
                y = check_teacher_scores(y, len(triples))
                teacher = [TeacherScoreRecord(float(a), float(b)) for a, b in y]
            ckpt = train_student(scorer, triples, texts, cfg, teacher)
        self.scorer_ = ckpt.to_scorer()
        self.training_log_ = ckpt.log
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "scorer_")
        rows = check_pairs(X)
        texts = self._texts({str(i): q for i, (q, _) in enumerate(rows)},
                            {str(i): p for i, (_, p) in enumerate(rows)})
        return np.array([self.scorer_.score(texts.query(str(i)), texts.passage(str(i)))
                         for i in range(len(rows))])

    def transform(self, X: Sequence[str]) -> list[np.ndarray]:
        """Cached passage representations, one ``[n_i, dim]`` array per passage."""
        check_is_fitted(self, "scorer_")
        if not self.scorer_.kind.cacheable:
            raise NotCacheableError(f"{self.scorer_.kind.value} has no passage representation")
        texts = self._texts({}, {str(i): p for i, p in enumerate(X)})
        return [self.scorer_.passage_entry(texts.passage(str(i))) for i in range(len(X))]

    def score(self, X, y=None) -> float:
        """Pairwise accuracy on ``(query, positive, negative)`` triples."""
        rows = check_triples(X)
        pos = self.predict([(q, p) for q, p, _ in rows])
        neg = self.predict([(q, n) for q, _, n in rows])
        return pairwise_accuracy(pos, neg)
