import numpy as np
import pytest

from marginkd.autodiff import ShapeError, Tensor, no_grad
from marginkd.encoder import (CLS_ID, OOV_ID, PAD_ID, SPECIAL_TOKENS, EncoderConfig, EncoderStack,
                              Vocabulary, contextualize_gated, pad_batch, tokenize)
from marginkd.scorers import ScorerConfig, TKScorer


@pytest.fixture
def vocab():
    return Vocabulary(["blue", "sky", "green", "grass"])


@pytest.fixture
def stack():
    cfg = EncoderConfig(vocab_size=40, embed_dim=16, num_layers=3, num_heads=2, ffn_dim=32,
                        max_positions=24)
    return EncoderStack(cfg, np.random.default_rng(0))


def test_tokenize_known_words(vocab):
    ids = tokenize("Blue SKY", vocab, cap=30)
    assert ids.tolist() == [vocab.lookup("blue"), vocab.lookup("sky")]


def test_tokenize_unknown_maps_to_oov(vocab):
    assert tokenize("zzzz", vocab, cap=30).tolist() == [OOV_ID]


def test_query_cap_truncates_to_30(vocab):
    assert len(tokenize(" ".join(["blue"] * 35), vocab, cap=30)) == 30


def test_tokenize_empty_raises(vocab):
    with pytest.raises(ValueError):
        tokenize("   ", vocab, cap=30)


def test_vocab_file_roundtrip(tmp_path, vocab):
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    lines = path.read_text().splitlines()
    assert tuple(lines[:5]) == SPECIAL_TOKENS
    assert Vocabulary.load(path).itos == vocab.itos


def test_vocab_file_requires_special_header(tmp_path):
    path = tmp_path / "vocab.txt"
    path.write_text("blue\nsky\n")
    with pytest.raises(ValueError):
        Vocabulary.load(path)


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=10, num_heads=4)


def test_zero_layers_is_embedding_plus_position(stack):
    ids = np.array([7])
    out = stack.encode(ids, stop=0)
    expected = stack.token_embedding.data[7] + stack.position_embedding.data[0]
    np.testing.assert_array_equal(out.data[0], expected)


def test_output_shape(stack):
    ids = np.random.default_rng(1).integers(5, 40, size=9)
    assert stack.encode(ids).shape == (9, 16)


@pytest.mark.parametrize("b", [0, 1, 2, 3])
def test_split_layer_equivalence_bitwise(stack, b):
    ids, mask = pad_batch([np.array([CLS_ID, 9, 12, 30]), np.array([CLS_ID, 5])])
    full = stack.encode(ids, mask)
    lower = stack.encode(ids, mask, stop=b)
    upper = stack.encode(ids, mask, start=b, hidden=lower)
    np.testing.assert_array_equal(full.data, upper.data)


def test_position_budget(stack):
    with pytest.raises(ShapeError):
        stack.encode(np.full(25, 6))


def test_padding_does_not_change_real_tokens(stack):
    seq = np.array([CLS_ID, 9, 12, 30, 7])
    alone = stack.encode(seq).data
    ids, mask = pad_batch([seq, np.arange(5, 14)])
    padded = stack.encode(ids, mask).data[0, : len(seq)]
    np.testing.assert_allclose(padded, alone, rtol=0, atol=1e-12)
    assert ids[0, -1] == PAD_ID


def _tk():
    cfg = ScorerConfig.default("tk", vocab_size=30, embed_dim=8, num_heads=2, ffn_dim=16)
    return TKScorer(cfg)


def test_gate_closed_returns_embeddings():
    tk = _tk()
    ids, mask = pad_batch([np.array([6, 7, 8])])
    with no_grad():
        out = tk.contextualize(ids, mask, alpha=1.0)
    np.testing.assert_array_equal(out.data, tk.encoder.token_embed(ids).data)


def test_gate_open_returns_transformer_output():
    tk = _tk()
    ids, mask = pad_batch([np.array([6, 7, 8])])
    with no_grad():
        out = tk.contextualize(ids, mask, alpha=0.0)
        tf = tk.encoder.run_layers(tk.encoder.embed(ids), mask)
    np.testing.assert_array_equal(out.data, tf.data)


def test_gate_half_is_mean_of_endpoints():
    tk = _tk()
    ids, mask = pad_batch([np.array([6, 7, 8, 11])])
    with no_grad():
        lo = tk.contextualize(ids, mask, alpha=0.0).data
        hi = tk.contextualize(ids, mask, alpha=1.0).data
        mid = tk.contextualize(ids, mask, alpha=0.5).data
    np.testing.assert_allclose(mid, (lo + hi) / 2, rtol=0, atol=1e-15)


@pytest.mark.parametrize("alpha", [0.1, 0.37, 0.8])
def test_gate_is_affine_in_alpha(alpha):
    rng = np.random.default_rng(2)
    emb, ctx = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    out = contextualize_gated(emb, ctx, alpha).data
    np.testing.assert_allclose(out, ctx.data + alpha * (emb.data - ctx.data), atol=1e-14)


def test_gate_alpha_stays_in_unit_interval():
    tk = _tk()
    tk.alpha_raw.data = np.array(50.0)
    assert 0.0 <= tk.alpha.item() <= 1.0
    tk.alpha_raw.data = np.array(-50.0)
    assert 0.0 <= tk.alpha.item() <= 1.0
