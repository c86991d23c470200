"""Five ranking architectures over the toy encoder.

Every scorer maps a (query, passage) pair of token-id arrays to one
unbounded float. All but CAT split their work into a passage side, which
can be computed once and cached, and a query-time interaction.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ShapeError, concat, cosine_similarity, no_grad
from .encoder import (CLS_ID, MASK_BIAS, MASK_ID, SEP_ID, EncoderConfig, EncoderStack,
                      Module, pad_batch)

DEFAULT_KERNEL_MUS = (-0.9, -0.7, -0.5, -0.3, -0.1, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
LOG_GUARD = 1e-10


class ScorerKind(str, enum.Enum):
    CAT = "cat"
    DOT = "dot"
    COLBERT = "colbert"
    PRETT = "prett"
    TK = "tk"

    @property
    def cacheable(self) -> bool:
        return self is not ScorerKind.CAT


class NotCacheableError(TypeError):
    """The scorer has no query-independent passage representation."""


@dataclass
class KernelConfig:
    mus: tuple = DEFAULT_KERNEL_MUS
    sigma: float = 0.1

    def __post_init__(self):
        self.mus = tuple(float(m) for m in self.mus)
        if not self.mus:
            raise ValueError("at least one kernel is required")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if any(b <= a for a, b in zip(self.mus, self.mus[1:])):
            raise ValueError("kernel centers must be strictly increasing")

    @property
    def count(self) -> int:
        return len(self.mus)


@dataclass
class PreTTConfig:
    split_layer: int = 2
    total_layers: int = 4

    def __post_init__(self):
        if not 1 <= self.split_layer < self.total_layers:
            raise ValueError(f"need 1 <= split_layer < total_layers, got "
                             f"{self.split_layer}, {self.total_layers}")


@dataclass
class ScorerConfig:
    kind: ScorerKind = ScorerKind.CAT
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    output_dim: Optional[int] = None
    mask_repeat: int = 8
    split_layer: int = 2
    kernels: KernelConfig = field(default_factory=KernelConfig)
    seed: int = 0

    def __post_init__(self):
        self.kind = ScorerKind(self.kind)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.kernels, dict):
            self.kernels = KernelConfig(**self.kernels)
        if self.mask_repeat < 0:
            raise ValueError("mask_repeat must be >= 0")
        if self.kind is ScorerKind.PRETT:
            PreTTConfig(self.split_layer, self.encoder.num_layers)

    @classmethod
    def default(cls, kind, *, seed: int = 0, split_layer: Optional[int] = None,
                output_dim: Optional[int] = None, **encoder_overrides) -> "ScorerConfig":
        kind = ScorerKind(kind)
        enc = {"num_layers": 2} if kind is ScorerKind.TK else {}
        enc.update(encoder_overrides)
        encoder = EncoderConfig(**enc)
        if split_layer is None:
            split_layer = max(1, min(2, encoder.num_layers - 1))
        return cls(kind=kind, encoder=encoder, output_dim=output_dim, split_layer=split_layer,
                   seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["kernels"]["mus"] = list(self.kernels.mus)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerConfig":
        return cls(**d)


@dataclass
class Rep:
    """A padded batch of vectors with its validity mask."""

    h: Tensor
    mask: np.ndarray

    def take(self, index: np.ndarray) -> "Rep":
        return Rep(self.h[index], self.mask[index])


# -- interaction primitives -------------------------------------------------


def maxsim_aggregate(sim: Tensor, q_mask: np.ndarray, p_mask: np.ndarray) -> Tensor:
    """Sum over query rows of the row-wise max over valid passage columns.

    ``sim [..., m, n]`` -> ``[...]``.
    """
    if sim.shape[-1] == 0 or not p_mask.any(axis=-1).all():
        raise ShapeError("empty passage representation")
    bias = np.where(p_mask, 0.0, MASK_BIAS)[..., None, :]
    best = (sim + bias).max(axis=-1)
    return (best * q_mask.astype(np.float64)).sum(axis=-1)


def kernel_activations(cos: Tensor, kernels: KernelConfig) -> Tensor:
    """Gaussian kernel responses ``[..., m, n]`` -> ``[..., K, m, n]``."""
    cos = cos if isinstance(cos, Tensor) else Tensor(cos)
    mus = np.asarray(kernels.mus).reshape((-1, 1, 1))
    diff = cos.reshape(*cos.shape[:-2], 1, *cos.shape[-2:]) - mus
    return (-(diff * diff) / (2.0 * kernels.sigma ** 2)).exp()


def kernel_pooling(cos: Tensor, q_mask: np.ndarray, p_mask: np.ndarray,
                   kernels: KernelConfig, weights: Tensor) -> Tensor:
    """Soft-histogram pooling: per kernel, sum over query terms of log(sum over passage terms).

    ``cos [..., m, n]``, ``weights [K]`` -> ``[...]``.
    """
    if cos.shape[-1] == 0 or not p_mask.any(axis=-1).all():
        raise ShapeError("empty passage representation")
    act = kernel_activations(cos, kernels) * p_mask.astype(np.float64)[..., None, None, :]
    per_term = (act.sum(axis=-1) + LOG_GUARD).log()
    per_kernel = (per_term * q_mask.astype(np.float64)[..., None, :]).sum(axis=-1)
    return (per_kernel * weights).sum(axis=-1)


def stack_entries(entries: Sequence[np.ndarray]) -> Rep:
    if not entries:
        raise ValueError("no passage entries")
    width = max(len(e) for e in entries)
    if width == 0:
        raise ShapeError("empty passage representation")
    dim = entries[0].shape[-1]
    data = np.zeros((len(entries), width, dim))
    mask = np.zeros((len(entries), width), dtype=bool)
    for i, e in enumerate(entries):
        if e.ndim != 2 or e.shape[-1] != dim:
            raise ShapeError(f"cache entry {i} has shape {e.shape}, expected [n, {dim}]")
        data[i, : len(e)] = e
        mask[i, : len(e)] = True
    return Rep(Tensor(data), mask)


# -- scorers ------------------------------------------------------------------


class Scorer(Module):
    """Shared plumbing; subclasses provide ``encode_queries``, ``encode_passages`` and ``interact``."""

    kind: ScorerKind

    def __init__(self, config: ScorerConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.encoder = EncoderStack(config.encoder, rng)
        self._init_head(rng)

    def _init_head(self, rng: np.random.Generator) -> None:
        d = self.config.encoder.embed_dim
        self.W_s = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 1)), requires_grad=True)

    # batched, differentiable path

    def encode_queries(self, queries: Sequence[np.ndarray]) -> Rep:
        raise NotImplementedError

    def encode_passages(self, passages: Sequence[np.ndarray]) -> Rep:
        raise NotImplementedError

    def interact(self, q: Rep, p: Rep) -> Tensor:
        raise NotImplementedError

    def score_pairs(self, queries: Sequence[np.ndarray], passages: Sequence[np.ndarray]) -> Tensor:
        if len(queries) != len(passages):
            raise ValueError("queries and passages must align")
        return self.interact(self.encode_queries(queries), self.encode_passages(passages))

    def score_triples(self, queries, positives, negatives) -> tuple[Tensor, Tensor]:
        """Scores for (q, p+) and (q, p-) with each query encoded once."""
        B = len(queries)
        q = self.encode_queries(queries)
        p = self.encode_passages(list(positives) + list(negatives))
        s = self.interact(q.take(np.tile(np.arange(B), 2)), p)
        return s[:B], s[B:]

    # cache path

    def passage_entry(self, passage: np.ndarray) -> np.ndarray:
        """Query-independent passage representation ``[n, dim]``."""
        with no_grad():
            rep = self.encode_passages([np.asarray(passage)])
        return rep.h.data[0][rep.mask[0]].copy()

    def score_cached(self, query: np.ndarray, entry: np.ndarray) -> float:
        return float(self.score_candidates(query, [entry])[0])

    def score(self, query: np.ndarray, passage: np.ndarray) -> float:
        """Score one pair by encoding the passage now (no cache)."""
        return self.score_cached(query, self.passage_entry(passage))

    def score_candidates(self, query: np.ndarray, entries: Sequence[np.ndarray]) -> np.ndarray:
        """Score one query against cached entries in a single batch."""
        return self.score_block(query, stack_entries(entries))

    def score_block(self, query: np.ndarray, block: Rep) -> np.ndarray:
        """Score one query against candidates already stacked by :func:`stack_entries`."""
        with no_grad():
            q = self.encode_queries([np.asarray(query)])
            s = self.interact(q.take(np.zeros(block.h.shape[0], dtype=np.int64)), block)
        return s.data.copy()

    @property
    def kind(self) -> ScorerKind:  # type: ignore[override]
        return self.config.kind


class CatScorer(Scorer):
    """Joint encoding of ``[CLS; q; SEP; p]``; the CLS output is projected to a score."""

    def score_pairs(self, queries, passages) -> Tensor:
        if len(queries) != len(passages):
            raise ValueError("queries and passages must align")
        seqs = [np.concatenate(([CLS_ID], q, [SEP_ID], p)) for q, p in zip(queries, passages)]
        ids, mask = pad_batch(seqs)
        h = self.encoder.encode(ids, mask)
        return (h[:, 0, :] @ self.W_s)[:, 0]

    def score_triples(self, queries, positives, negatives):
        B = len(queries)
        s = self.score_pairs(list(queries) * 2, list(positives) + list(negatives))
        return s[:B], s[B:]

    def passage_entry(self, passage):
        raise NotCacheableError("CAT scoring has no passage cache")

    def score_candidates(self, query, entries):
        raise NotCacheableError("CAT scoring has no passage cache; use score_passages")

    score_block = score_candidates

    def score(self, query, passage) -> float:
        with no_grad():
            return float(self.score_pairs([np.asarray(query)], [np.asarray(passage)]).data[0])

    def score_passages(self, query: np.ndarray, passages: Sequence[np.ndarray]) -> np.ndarray:
        with no_grad():
            return self.score_pairs([np.asarray(query)] * len(passages), passages).data.copy()


class _ProjectedScorer(Scorer):
    """Encoder output projected by ``W_s [d, output_dim]``."""

    def _init_head(self, rng):
        d = self.config.encoder.embed_dim
        out = self.config.output_dim or d
        self.W_s = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, out)), requires_grad=True)

    def _project(self, seqs) -> Rep:
        ids, mask = pad_batch(seqs)
        return Rep(self.encoder.encode(ids, mask) @ self.W_s, mask)


class DotScorer(_ProjectedScorer):
    """Dot product of projected CLS vectors from independent encodings."""

    def encode_queries(self, queries):
        rep = self._project([np.concatenate(([CLS_ID], q)) for q in queries])
        return Rep(rep.h[:, 0:1, :], rep.mask[:, 0:1])

    encode_passages = encode_queries

    def interact(self, q, p):
        if q.h.shape[-1] != p.h.shape[-1]:
            raise ShapeError(f"query dim {q.h.shape[-1]} != passage dim {p.h.shape[-1]}")
        return (q.h[:, 0, :] * p.h[:, 0, :]).sum(axis=-1)


class ColbertScorer(_ProjectedScorer):
    """Per-token projections; sum over query positions of the max dot product over passage positions.

    The query is augmented with CLS and ``mask_repeat`` MASK tokens, all of
    which take part in the aggregation.
    """

    def encode_queries(self, queries):
        tail = [MASK_ID] * self.config.mask_repeat
        return self._project([np.concatenate(([CLS_ID], q, tail)) for q in queries])

    def encode_passages(self, passages):
        return self._project([np.concatenate(([CLS_ID], p)) for p in passages])

    def interact(self, q, p):
        if q.h.shape[-1] != p.h.shape[-1]:
            raise ShapeError(f"query dim {q.h.shape[-1]} != passage dim {p.h.shape[-1]}")
        return maxsim_aggregate(q.h @ p.h.swapaxes(-1, -2), q.mask, p.mask)


class PreTTScorer(Scorer):
    """Lower ``split_layer`` layers run separately on ``[CLS; q; SEP]`` and ``[CLS; p]``;
    the upper layers run on the concatenation and the CLS output is projected.

    The passage CLS is dropped before concatenation so the joint sequence has
    a single CLS at position 0.
    """

    @property
    def split(self) -> int:
        return self.config.split_layer

    def encode_queries(self, queries):
        ids, mask = pad_batch([np.concatenate(([CLS_ID], q, [SEP_ID])) for q in queries])
        return Rep(self.encoder.encode(ids, mask, stop=self.split), mask)

    def encode_passages(self, passages):
        ids, mask = pad_batch([np.concatenate(([CLS_ID], p)) for p in passages])
        h = self.encoder.encode(ids, mask, stop=self.split)
        return Rep(h[:, 1:, :], mask[:, 1:])

    def interact(self, q, p):
        if not p.mask.any(axis=-1).all():
            raise ShapeError("empty passage representation")
        h = concat([q.h, p.h], axis=1)
        mask = np.concatenate([q.mask, p.mask], axis=1)
        out = self.encoder.run_layers(h, mask, self.split, None)
        return (out[:, 0, :] @ self.W_s)[:, 0]


class TKScorer(Scorer):
    """Gated shallow contextualization, cosine match matrix, Gaussian kernel pooling."""

    def _init_head(self, rng):
        a = float(np.clip(self.config.encoder.gate_alpha, 1e-6, 1 - 1e-6))
        self.alpha_raw = Tensor(np.array(np.log(a / (1 - a))), requires_grad=True)
        K = self.config.kernels.count
        self.W_s = Tensor(rng.normal(0.0, 0.1, size=(K,)), requires_grad=True)

    @property
    def alpha(self) -> Tensor:
        return self.alpha_raw.sigmoid()

    def contextualize(self, ids: np.ndarray, mask: np.ndarray, alpha=None) -> Tensor:
        emb = self.encoder.token_embed(ids)
        ctx = self.encoder.run_layers(self.encoder.embed(ids), mask)
        alpha = self.alpha if alpha is None else alpha
        return emb * alpha + ctx * (1.0 - alpha)

    def _encode(self, seqs) -> Rep:
        ids, mask = pad_batch(seqs)
        return Rep(self.contextualize(ids, mask), mask)

    def encode_queries(self, queries):
        return self._encode([np.asarray(q) for q in queries])

    encode_passages = encode_queries

    def interact(self, q, p):
        cos = cosine_similarity(q.h, p.h)
        return kernel_pooling(cos, q.mask, p.mask, self.config.kernels, self.W_s)


_SCORERS = {
    ScorerKind.CAT: CatScorer,
    ScorerKind.DOT: DotScorer,
    ScorerKind.COLBERT: ColbertScorer,
    ScorerKind.PRETT: PreTTScorer,
    ScorerKind.TK: TKScorer,
}


def make_scorer(config: ScorerConfig) -> Scorer:
    return _SCORERS[config.kind](config)


# -- passage cache ----------------------------------------------------------

_CACHE_MAGIC = b"MKDCACHE"
_KIND_CODES = {k: i for i, k in enumerate(ScorerKind)}
_HEADER = struct.Struct("<8sIIQ")
_ENTRY = struct.Struct("<qQ")


@dataclass
class PassageCacheEntry:
    passage_id: int
    rep: np.ndarray


class PassageCache:
    """Precomputed passage representations keyed by integer passage id."""

    def __init__(self, kind: ScorerKind, dim: int):
        self.kind = ScorerKind(kind)
        self.dim = int(dim)
        self.entries: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, pid) -> bool:
        return int(pid) in self.entries

    def __getitem__(self, pid) -> np.ndarray:
        return self.entries[int(pid)]

    def add(self, pid, rep: np.ndarray) -> None:
        rep = np.asarray(rep, dtype=np.float64)
        if rep.ndim != 2 or rep.shape[1] != self.dim:
            raise ShapeError(f"entry shape {rep.shape} does not match dim {self.dim}")
        self.entries[int(pid)] = rep

    @property
    def total_rows(self) -> int:
        return sum(len(r) for r in self.entries.values())

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(_CACHE_MAGIC, _KIND_CODES[self.kind], self.dim, len(self.entries)))
            for pid, rep in self.entries.items():
                f.write(_ENTRY.pack(pid, len(rep)))
                f.write(np.ascontiguousarray(rep, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PassageCache":
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) < _HEADER.size:
            raise ValueError(f"{path}: truncated cache header")
        magic, code, dim, count = _HEADER.unpack_from(raw, 0)
        if magic != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a passage cache file")
        cache = cls(list(ScorerKind)[code], dim)
        off = _HEADER.size
        for _ in range(count):
            pid, n = _ENTRY.unpack_from(raw, off)
            off += _ENTRY.size
            nbytes = n * dim * 8
            if off + nbytes > len(raw):
                raise ValueError(f"{path}: truncated entry for passage {pid}")
            cache.entries[pid] = np.frombuffer(raw, dtype="<f8", count=n * dim,
                                               offset=off).reshape(n, dim).astype(np.float64)
            off += nbytes
        return cache
