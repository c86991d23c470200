import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from marginkd.autodiff import Tensor, finite_diff_check
from marginkd.losses import (LossKind, MissingTeacherScores, ScorePairBatch, compute_loss,
                             margin_mse_loss, pointwise_mse_loss, ranknet_loss,
                             weighted_ranknet_loss)

# multiples of 2**-8 in a small range add and subtract without rounding
dyadic = st.integers(-4096, 4096).map(lambda i: i / 256.0)


def test_margin_mse_hand_case():
    b = ScorePairBatch([3.0], [1.0], [5.0], [2.0])
    assert margin_mse_loss(b).item() == 1.0


def test_margin_mse_is_batch_mean():
    b = ScorePairBatch([3.0, 0.0], [1.0, 0.0], [5.0, 1.0], [2.0, 0.0])
    assert margin_mse_loss(b).item() == (1.0 + 1.0) / 2


def test_ranknet_at_zero_margin():
    assert ranknet_loss([0.5], [0.5]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_weighted_ranknet_scales_by_teacher_margin():
    b = ScorePairBatch([0.0], [0.0], [1.0], [4.0])
    assert weighted_ranknet_loss(b).item() == pytest.approx(3 * math.log(2), abs=1e-14)


def test_pointwise_hand_case():
    b = ScorePairBatch([1.0], [0.0], [0.0], [2.0])
    assert pointwise_mse_loss(b).item() == 1.0 + 4.0


def test_missing_teacher():
    b = ScorePairBatch([1.0], [0.0])
    for kind in ("margin_mse", "pointwise_mse", "weighted_ranknet"):
        with pytest.raises(MissingTeacherScores):
            compute_loss(kind, b)
    assert compute_loss("ranknet", b).item() > 0


def test_half_teacher_rejected():
    with pytest.raises(MissingTeacherScores):
        ScorePairBatch([1.0], [0.0], teacher_pos=[1.0])


def test_misaligned_rejected():
    with pytest.raises(ValueError):
        ScorePairBatch([1.0, 2.0], [0.0], [1.0], [0.0])


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        ScorePairBatch([], [])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(dyadic, dyadic, dyadic), min_size=1, max_size=8))
def test_margin_mse_zero_at_teacher_fixpoint(rows):
    tp = [r[0] for r in rows]
    tn = [r[1] for r in rows]
    sp = [a + r[2] for a, r in zip(tp, rows)]
    sn = [b + r[2] for b, r in zip(tn, rows)]
    assert margin_mse_loss(ScorePairBatch(sp, sn, tp, tn)).item() == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(dyadic, dyadic, dyadic, dyadic, dyadic), min_size=1, max_size=8))
def test_margin_mse_shift_invariant_exactly(rows):
    sp, sn, tp, tn, c = (list(col) for col in zip(*rows))
    base = margin_mse_loss(ScorePairBatch(sp, sn, tp, tn)).item()
    shifted = margin_mse_loss(ScorePairBatch([a + d for a, d in zip(sp, c)],
                                             [b + d for b, d in zip(sn, c)], tp, tn)).item()
    assert shifted == base


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(dyadic, dyadic), min_size=1, max_size=8),
       dyadic.filter(lambda c: c != 0.0))
def test_pointwise_mse_not_shift_invariant(rows, c):
    tp, tn = (list(col) for col in zip(*rows))
    at_fixpoint = pointwise_mse_loss(ScorePairBatch(tp, tn, tp, tn)).item()
    shifted = pointwise_mse_loss(ScorePairBatch([a + c for a in tp], [b + c for b in tn],
                                                tp, tn)).item()
    assert at_fixpoint == 0.0
    assert shifted == 2 * c * c


def test_margin_mse_gradient_sign():
    # student margin below the teacher's: descent raises pos and lowers neg
    pos = Tensor(np.array([1.0]), requires_grad=True)
    neg = Tensor(np.array([0.0]), requires_grad=True)
    margin_mse_loss(ScorePairBatch(pos, neg, [3.0], [0.0])).backward()
    assert pos.grad[0] < 0 < neg.grad[0]


@pytest.mark.parametrize("kind", list(LossKind))
@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    pos = Tensor(rng.normal(size=5), requires_grad=True)
    neg = Tensor(rng.normal(size=5), requires_grad=True)
    tp, tn = rng.normal(size=5), rng.normal(size=5)

    def f(_):
        return compute_loss(kind, ScorePairBatch(pos, neg, tp, tn))

    assert finite_diff_check(f, pos) < 1e-4
    assert finite_diff_check(f, neg) < 1e-4
