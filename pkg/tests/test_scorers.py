import math

import numpy as np
import pytest

from marginkd.autodiff import ShapeError, Tensor, finite_diff_check, no_grad
from marginkd.scorers import (KernelConfig, NotCacheableError, PassageCache, Rep, ScorerConfig,
                              ScorerKind, kernel_activations, kernel_pooling, make_scorer,
                              maxsim_aggregate)

from oracles import colbert_from_sim, colbert_naive, tk_pooling_naive

SMALL = dict(vocab_size=40, embed_dim=8, num_heads=2, ffn_dim=16, max_positions=64)


def small_scorer(kind, seed=0, **over):
    enc = dict(SMALL)
    enc.update(over)
    if kind == "prett":
        enc.setdefault("num_layers", 3)
    cfg = ScorerConfig.default(kind, **enc)
    cfg.seed = seed
    if kind == "prett":
        cfg.split_layer = 1
    return make_scorer(cfg)


def rand_seq(rng, lo=1, hi=7):
    return rng.integers(5, SMALL["vocab_size"], size=int(rng.integers(lo, hi + 1)))


# -- hand cases ------------------------------------------------------------------


def test_cat_zero_head_scores_zero():
    s = small_scorer("cat")
    s.W_s.data[:] = 0.0
    assert s.score(np.array([6, 7]), np.array([8, 9, 10])) == 0.0


def test_dot_hand_case():
    s = small_scorer("dot")
    e1 = np.zeros((1, 8))
    e1[0, 0] = 1.0
    q = Rep(Tensor(e1[None]), np.ones((1, 1), bool))
    assert s.interact(q, Rep(Tensor(e1[None]), np.ones((1, 1), bool))).item() == 1.0
    zero = Rep(Tensor(np.zeros((1, 1, 8))), np.ones((1, 1), bool))
    assert s.interact(q, zero).item() == 0.0


def test_maxsim_hand_case():
    sim = Tensor(np.array([[[0.2, 0.9], [0.5, -1.0]]]))
    out = maxsim_aggregate(sim, np.ones((1, 2), bool), np.ones((1, 2), bool))
    assert out.item() == pytest.approx(1.4, abs=1e-15)


def test_maxsim_ignores_padded_columns():
    sim = Tensor(np.array([[[0.2, 9.0], [0.5, 9.0]]]))
    out = maxsim_aggregate(sim, np.ones((1, 2), bool), np.array([[True, False]]))
    assert out.item() == pytest.approx(0.7, abs=1e-15)


def test_kernel_at_center_is_one():
    act = kernel_activations(Tensor(np.array([[0.5]])), KernelConfig(mus=(0.5,), sigma=0.1))
    assert act.data.item() == 1.0


def test_kernel_one_sigma_away():
    act = kernel_activations(Tensor(np.array([[1.0]])), KernelConfig(mus=(0.9,), sigma=0.1))
    assert abs(act.data.item() - math.exp(-0.5)) < 1e-12
    assert abs(act.data.item() - 0.606531) < 1e-6


def test_kernel_wide_sigma_is_flat():
    act = kernel_activations(Tensor(np.array([[-1.0, 1.0]])), KernelConfig(mus=(0.0,), sigma=1e6))
    np.testing.assert_allclose(act.data, 1.0, atol=1e-12)


def test_tk_single_flat_kernel():
    # every activation is 1, so each query row contributes log(n)
    cos = Tensor(np.full((1, 2, 3), 0.5))
    out = kernel_pooling(cos, np.ones((1, 2), bool), np.ones((1, 3), bool),
                         KernelConfig(mus=(0.5,), sigma=0.1), Tensor(np.array([1.0])))
    assert out.item() == pytest.approx(2 * math.log(3 + 1e-10), abs=1e-14)


def test_kernel_centers_must_increase():
    with pytest.raises(ValueError):
        KernelConfig(mus=(0.5, 0.1))


def test_prett_split_bounds():
    with pytest.raises(ValueError):
        ScorerConfig(kind="prett", split_layer=4)
    with pytest.raises(ValueError):
        ScorerConfig(kind="prett", split_layer=0)


def test_empty_passage_rejected():
    sim = Tensor(np.zeros((1, 2, 0)))
    with pytest.raises(ShapeError):
        maxsim_aggregate(sim, np.ones((1, 2), bool), np.ones((1, 0), bool))


def test_dimension_mismatch_rejected():
    s = small_scorer("dot")
    q = Rep(Tensor(np.zeros((1, 1, 8))), np.ones((1, 1), bool))
    p = Rep(Tensor(np.zeros((1, 1, 4))), np.ones((1, 1), bool))
    with pytest.raises(ShapeError):
        s.interact(q, p)


def test_cat_has_no_cache():
    s = small_scorer("cat")
    assert not ScorerKind.CAT.cacheable
    with pytest.raises(NotCacheableError):
        s.passage_entry(np.array([5, 6]))


# -- oracle equivalence -------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_colbert_aggregation_matches_loops_bitwise(seed):
    rng = np.random.default_rng(seed)
    m, n, d = rng.integers(1, 13, size=3)
    d = min(d, 16)
    q, p = rng.normal(size=(m, d)), rng.normal(size=(n, d))
    sim = q @ p.T
    got = maxsim_aggregate(Tensor(sim[None]), np.ones((1, m), bool), np.ones((1, n), bool))
    assert got.item() == colbert_from_sim(sim)
    assert abs(got.item() - colbert_naive(q, p)) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_tk_pooling_matches_loops_bitwise(seed):
    rng = np.random.default_rng(100 + seed)
    m, n = rng.integers(1, 13, size=2)
    cos = rng.uniform(-1, 1, size=(m, n))
    kernels = KernelConfig()
    w = rng.normal(size=kernels.count)
    got = kernel_pooling(Tensor(cos[None]), np.ones((1, m), bool), np.ones((1, n), bool),
                         kernels, Tensor(w))
    assert got.item() == tk_pooling_naive(cos, kernels.mus, kernels.sigma, w)


def test_end_to_end_colbert_matches_naive():
    rng = np.random.default_rng(3)
    s = small_scorer("colbert")
    q, p = rand_seq(rng), rand_seq(rng)
    with no_grad():
        qh = s.encode_queries([q]).h.data[0]
    entry = s.passage_entry(p)
    assert abs(s.score(q, p) - colbert_naive(qh, entry)) < 1e-12


# -- invariants ------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["dot", "colbert", "prett", "tk"])
def test_cached_equals_fresh_bitwise(kind, tmp_path):
    rng = np.random.default_rng(7)
    s = small_scorer(kind)
    passages = [rand_seq(rng, 1, 12) for _ in range(8)]
    cache = PassageCache(kind, s.passage_entry(passages[0]).shape[1])
    for i, p in enumerate(passages):
        cache.add(i, s.passage_entry(p))
    cache.save(tmp_path / "c.bin")
    loaded = PassageCache.load(tmp_path / "c.bin")
    for _ in range(25):
        q = rand_seq(rng)
        i = int(rng.integers(len(passages)))
        assert s.score_cached(q, loaded[i]) == s.score(q, passages[i])


@pytest.mark.parametrize("kind", ["dot", "colbert", "prett", "tk"])
def test_batched_candidates_close_to_single(kind):
    rng = np.random.default_rng(8)
    s = small_scorer(kind)
    q = rand_seq(rng)
    passages = [rand_seq(rng, 1, 12) for _ in range(6)]
    batch = s.score_candidates(q, [s.passage_entry(p) for p in passages])
    single = [s.score(q, p) for p in passages]
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-12)


def test_cache_file_layout(tmp_path):
    cache = PassageCache("colbert", 3)
    cache.add(42, np.arange(6.0).reshape(2, 3))
    cache.save(tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:8] == b"MKDCACHE"
    assert len(raw) == 24 + 16 + 6 * 8
    assert cache.total_rows == 2


def test_cache_rejects_truncated_file(tmp_path):
    cache = PassageCache("dot", 2)
    cache.add(1, np.ones((1, 2)))
    cache.save(tmp_path / "c.bin")
    (tmp_path / "t.bin").write_bytes((tmp_path / "c.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        PassageCache.load(tmp_path / "t.bin")


def test_colbert_monotone_in_passage_rows():
    rng = np.random.default_rng(4)
    s = small_scorer("colbert")
    q = rand_seq(rng)
    entry = s.passage_entry(rand_seq(rng))
    base = s.score_cached(q, entry)
    for _ in range(10):
        entry = np.vstack([entry, rng.normal(size=(1, entry.shape[1]))])
        nxt = s.score_cached(q, entry)
        assert nxt >= base
        base = nxt


def test_kernel_activations_bounded():
    rng = np.random.default_rng(5)
    act = kernel_activations(Tensor(rng.uniform(-1, 1, size=(6, 9))), KernelConfig())
    assert (act.data > 0).all() and (act.data <= 1).all()


@pytest.mark.parametrize("kind", ["cat", "prett", "tk"])
def test_scores_are_not_clamped(kind):
    rng = np.random.default_rng(6)
    s = small_scorer(kind)
    q, p = rand_seq(rng), rand_seq(rng)
    before = s.score(q, p)
    s.W_s.data *= 1000.0
    after = s.score(q, p)
    assert after == pytest.approx(1000.0 * before, rel=1e-9)
    assert abs(after) > 1.0


def test_prett_passage_padding_invariance():
    rng = np.random.default_rng(9)
    s = small_scorer("prett")
    q = rand_seq(rng)
    short, long = rand_seq(rng, 2, 3), rand_seq(rng, 10, 12)
    alone = s.score(q, short)
    with no_grad():
        batch = s.score_pairs([q, q], [short, long]).data[0]
    assert abs(batch - alone) < 1e-12


@pytest.mark.parametrize("split", [1, 2, 3])
def test_prett_cached_equals_fresh_for_every_split(split):
    rng = np.random.default_rng(10 + split)
    cfg = ScorerConfig.default("prett", **dict(SMALL, num_layers=4))
    cfg.split_layer = split
    s = make_scorer(cfg)
    q, p = rand_seq(rng), rand_seq(rng)
    assert s.score_cached(q, s.passage_entry(p)) == s.score(q, p)


def test_tk_gate_receives_gradient():
    rng = np.random.default_rng(11)
    s = small_scorer("tk")
    out = s.score_pairs([rand_seq(rng)], [rand_seq(rng)]).sum()
    out.backward()
    assert s.alpha_raw.grad is not None and np.isfinite(s.alpha_raw.grad).all()


def test_state_dict_roundtrip():
    a, b = small_scorer("colbert", seed=1), small_scorer("colbert", seed=2)
    b.load_state_dict(a.state_dict())
    q, p = np.array([6, 7, 8]), np.array([9, 10])
    assert a.score(q, p) == b.score(q, p)


def test_config_dict_roundtrip():
    cfg = ScorerConfig.default("tk", embed_dim=8, num_heads=2)
    assert ScorerConfig.from_dict(cfg.to_dict()) == cfg


# -- gradients --------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["cat", "dot", "colbert", "prett", "tk"])
def test_scorer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(12)
    s = small_scorer(kind, num_layers=2 if kind != "prett" else 3)
    qs = [rand_seq(rng) for _ in range(2)]
    ps = [rand_seq(rng) for _ in range(2)]
    w = rng.normal(size=2)

    def f(_):
        return (s.score_pairs(qs, ps) * w).sum()

    for name, param in s.named_parameters():
        coords = rng.choice(param.data.size, size=min(3, param.data.size), replace=False)
        err = finite_diff_check(f, param, coords=coords)
        assert err < 1e-4, (name, err)
