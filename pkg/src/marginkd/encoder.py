"""Token vocabulary and a small post-LN transformer encoder."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ShapeError, layer_norm

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[OOV]")
CLS_ID, SEP_ID, MASK_ID, PAD_ID, OOV_ID = range(5)

QUERY_CAP = 30
PASSAGE_CAP = 200

# additive attention bias on padded keys; exp() of it underflows to exactly 0
MASK_BIAS = -1e9


class Vocabulary:
    """Token to id map whose first five ids are the special tokens."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        token = token.casefold()
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token.casefold() in self.stoi

    def lookup(self, token: str) -> int:
        return self.stoi.get(token.casefold(), OOV_ID)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.itos:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f]
        if tuple(lines[:5]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: first five lines must be {', '.join(SPECIAL_TOKENS)}")
        vocab = cls()
        for lineno, tok in enumerate(lines[5:], start=6):
            if tok in vocab.stoi:
                raise ValueError(f"{path}:{lineno}: duplicate token {tok!r}")
            vocab.add(tok)
        return vocab


def tokenize(text: str, vocab: Vocabulary, cap: int) -> np.ndarray:
    """Whitespace-split, case-fold, map unknowns to OOV, truncate to ``cap`` ids."""
    ids = [vocab.lookup(tok) for tok in text.split()]
    if not ids:
        raise ValueError("text is empty after tokenization")
    return np.asarray(ids[:cap], dtype=np.int64)


def pad_batch(seqs: Sequence[np.ndarray], pad_id: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences into ``ids [B, T]`` and a boolean ``mask [B, T]``."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


# -- parameter containers -------------------------------------------------


class Module:
    """Collects ``Tensor`` parameters from attributes, recursively."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = _param(rng, (d_in, d_out), 1.0 / np.sqrt(d_in))
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class TransformerLayer(Module):
    """Multi-head self-attention and a GELU feed-forward, each followed by add & norm."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, ffn_dim: int):
        if dim % heads:
            raise ValueError(f"embed_dim {dim} not divisible by num_heads {heads}")
        self.heads = heads
        self.qkv = Linear(rng, dim, 3 * dim)
        self.out = Linear(rng, dim, dim)
        self.norm1 = LayerNorm(dim)
        self.ff1 = Linear(rng, dim, ffn_dim)
        self.ff2 = Linear(rng, ffn_dim, dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, T, D = x.shape
        H, dh = self.heads, D // self.heads
        qkv = self.qkv(x).reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        bias = np.where(mask, 0.0, MASK_BIAS)[:, None, None, :]
        att = ((q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)) + bias).softmax(axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
        x = self.norm1(x + self.out(ctx))
        return self.norm2(x + self.ff2(self.ff1(x).gelu()))


# -- encoder --------------------------------------------------------------


@dataclass
class EncoderConfig:
    vocab_size: int = 5000
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 128
    max_positions: int = 256
    gate_alpha: float = 0.5

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if not 0.0 <= self.gate_alpha <= 1.0:
            raise ValueError("gate_alpha must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderStack(Module):
    """Token + learned position embeddings followed by ``num_layers`` transformer layers.

    ``run_layers(h, mask, start, stop)`` applies layers ``start..stop-1`` so a
    prefix and a suffix can be evaluated separately and composed.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        d = config.embed_dim
        self.token_embedding = _param(rng, (config.vocab_size, d), 1.0 / np.sqrt(d))
        self.position_embedding = _param(rng, (config.max_positions, d), 0.1 / np.sqrt(d))
        self.layers = [TransformerLayer(rng, d, config.num_heads, config.ffn_dim)
                       for _ in range(config.num_layers)]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.shape[-1] > self.config.max_positions:
            raise ShapeError(f"sequence length {ids.shape[-1]} exceeds max_positions "
                             f"{self.config.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary range")

    def token_embed(self, ids: np.ndarray) -> Tensor:
        self._check_ids(ids)
        return self.token_embedding[ids]

    def embed(self, ids: np.ndarray) -> Tensor:
        """Token plus position embeddings for ``ids [B, T]``."""
        self._check_ids(ids)
        T = ids.shape[-1]
        return self.token_embedding[ids] + self.position_embedding[np.arange(T)]

    def run_layers(self, h: Tensor, mask: np.ndarray, start: int = 0,
                   stop: Optional[int] = None) -> Tensor:
        stop = self.num_layers if stop is None else stop
        if not 0 <= start <= stop <= self.num_layers:
            raise ValueError(f"layer range {start}..{stop} outside 0..{self.num_layers}")
        for layer in self.layers[start:stop]:
            h = layer(h, mask)
        return h

    def encode(self, ids: np.ndarray, mask: Optional[np.ndarray] = None, start: int = 0,
               stop: Optional[int] = None, hidden: Optional[Tensor] = None) -> Tensor:
        """Contextualize a padded batch ``ids [B, T]`` (or a single 1-D sequence).

        With ``start > 0`` the input is ``hidden``, the activations after
        layer ``start``.
        """
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
            if mask is not None:
                mask = mask[None, :]
        if mask is None:
            mask = np.ones(ids.shape, dtype=bool)
        if start == 0:
            h = self.embed(ids)
        elif hidden is None:
            raise ValueError("hidden activations are required when start > 0")
        else:
            h = hidden if not single else hidden.reshape(1, *hidden.shape[-2:])
        out = self.run_layers(h, mask, start, stop)
        return out[0] if single else out


def contextualize_gated(embeddings: Tensor, contextualized: Tensor, alpha) -> Tensor:
    """``emb * alpha + ctx * (1 - alpha)``; ``alpha`` may be a float or scalar Tensor."""
    return embeddings * alpha + contextualized * (1.0 - alpha)
