"""Teacher training, teacher-score generation, ensembling, student training, re-ranking."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError, no_grad
from .data import Qrels, Run, TeacherScoreRecord, TrainingTriple, check_alignment, sort_ranking
from .encoder import PASSAGE_CAP, QUERY_CAP, Vocabulary, tokenize
from .evaluation import evaluate, pairwise_accuracy
from .losses import LossKind, MissingTeacherScores, ScorePairBatch, compute_loss
from .scorers import Scorer, ScorerConfig, ScorerKind, make_scorer

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "loss", "pairwise_acc", "margin_mean_pos", "margin_mean_neg", "val_ndcg10")


class TrainingDiverged(RuntimeError):
    pass


class UnknownIdError(KeyError):
    pass


def default_learning_rate(kind) -> float:
    return 1e-5 if ScorerKind(kind) is ScorerKind.TK else 7e-6


@dataclass
class TrainConfig:
    learning_rate: float = 7e-6
    batch_size: int = 32
    max_steps: int = 1000
    validation_interval: int = 500
    early_stop_patience: int = 10
    log_interval: int = 100
    seed: int = 0
    loss_kind: LossKind = LossKind.RANKNET

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.validation_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_kind"] = self.loss_kind.value
        return d


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- text lookup ---------------------------------------------------------------


class TextIndex:
    """Resolves query and passage ids to capped token-id arrays, memoized."""

    def __init__(self, vocab: Vocabulary, queries: Mapping[str, str], collection: Mapping[str, str],
                 query_cap: int = QUERY_CAP, passage_cap: int = PASSAGE_CAP):
        self.vocab = vocab
        self.queries = queries
        self.collection = collection
        self.query_cap = query_cap
        self.passage_cap = passage_cap
        self._q: dict[str, np.ndarray] = {}
        self._p: dict[str, np.ndarray] = {}

    def query(self, qid: str) -> np.ndarray:
        if qid not in self._q:
            if qid not in self.queries:
                raise UnknownIdError(f"unknown query id {qid!r}")
            self._q[qid] = tokenize(self.queries[qid], self.vocab, self.query_cap)
        return self._q[qid]

    def passage(self, pid: str) -> np.ndarray:
        if pid not in self._p:
            if pid not in self.collection:
                raise UnknownIdError(f"unknown passage id {pid!r}")
            self._p[pid] = tokenize(self.collection[pid], self.vocab, self.passage_cap)
        return self._p[pid]

    def triple(self, t: TrainingTriple):
        return self.query(t.query_id), self.passage(t.pos_id), self.passage(t.neg_id)


# -- checkpoints ---------------------------------------------------------------


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    scorer_config: dict
    state: dict[str, np.ndarray]
    step: int = 0
    val_ndcg10: float = float("nan")
    log: list[dict] = field(default_factory=list, repr=False)

    @classmethod
    def capture(cls, scorer: Scorer, step: int, val: float) -> "Checkpoint":
        return cls(scorer.config.to_dict(), scorer.state_dict(), step, val)

    def to_scorer(self) -> Scorer:
        scorer = make_scorer(ScorerConfig.from_dict(json.loads(json.dumps(self.scorer_config))))
        scorer.load_state_dict(self.state)
        return scorer

    def save(self, path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "scorer_config": self.scorer_config,
                "config_hash": config_hash(self.scorer_config), "step": self.step,
                "val_ndcg10": None if math.isnan(self.val_ndcg10) else self.val_ndcg10}
        arrays = {f"param/{k}": v for k, v in self.state.items()}
        with open(path, "wb") as f:
            np.savez(f, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                     **arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            state = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        if meta["config_hash"] != config_hash(meta["scorer_config"]):
            raise ValueError(f"{path}: config hash mismatch")
        val = meta["val_ndcg10"]
        return cls(meta["scorer_config"], state, meta["step"], float("nan") if val is None else val)


def write_log(path, rows: Sequence[dict]) -> None:
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        if not exists:
            f.write("\t".join(LOG_COLUMNS) + "\n")
        for row in rows:
            f.write("\t".join(_fmt(row.get(c)) for c in LOG_COLUMNS) + "\n")


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return str(x) if isinstance(x, int) else f"{x:.6f}"


def read_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        rows = []
        for line in f:
            vals = line.rstrip("\n").split("\t")
            row = {}
            for k, v in zip(header, vals):
                row[k] = int(v) if k == "step" else (float(v) if v else float("nan"))
            rows.append(row)
    return rows


# -- scoring & re-ranking ------------------------------------------------------------


def score_passages(scorer: Scorer, query: np.ndarray, passages: Sequence[np.ndarray]) -> np.ndarray:
    """Score one query against many passages in one batch, without a cache."""
    with no_grad():
        if scorer.kind is ScorerKind.CAT:
            return scorer.score_passages(query, passages)
        q = scorer.encode_queries([query])
        p = scorer.encode_passages(passages)
        return scorer.interact(q.take(np.zeros(len(passages), dtype=np.int64)), p).data.copy()


def rerank(scorer: Scorer | Checkpoint, candidates: Mapping[str, Sequence[str]],
           texts: TextIndex) -> Run:
    """Score each query's candidates and order them (descending, ties by passage id)."""
    if isinstance(scorer, Checkpoint):
        scorer = scorer.to_scorer()
    run: Run = {}
    for qid, pids in candidates.items():
        if not pids:
            continue
        scores = score_passages(scorer, texts.query(qid), [texts.passage(p) for p in pids])
        run[qid] = sort_ranking(zip(pids, (float(s) for s in scores)))
    return run


@dataclass
class Validation:
    candidates: Mapping[str, Sequence[str]]
    qrels: Qrels
    texts: TextIndex

    def ndcg10(self, scorer: Scorer) -> float:
        return evaluate(rerank(scorer, self.candidates, self.texts), self.qrels, k=10)["ndcg@10"]


def generate_teacher_scores(scorer: Scorer | Checkpoint, triples: Sequence[TrainingTriple],
                            texts: TextIndex, batch_size: int = 64) -> list[TeacherScoreRecord]:
    """Score every triple with frozen parameters, preserving order."""
    if isinstance(scorer, Checkpoint):
        scorer = scorer.to_scorer()
    out: list[TeacherScoreRecord] = []
    with no_grad():
        for start in range(0, len(triples), batch_size):
            chunk = triples[start:start + batch_size]
            q, p, n = zip(*(texts.triple(t) for t in chunk))
            pos, neg = scorer.score_triples(q, p, n)
            out.extend(TeacherScoreRecord(float(a), float(b), *t)
                       for a, b, t in zip(pos.data, neg.data, chunk))
    return out


def ensemble_scores(score_sets: Sequence[Sequence[TeacherScoreRecord]]) -> list[TeacherScoreRecord]:
    """Per-record mean of pos and neg scores across teachers."""
    if not score_sets:
        raise ValueError("no score files to ensemble")
    n = len(score_sets[0])
    if any(len(s) != n for s in score_sets):
        raise ValueError(f"score files differ in length: {[len(s) for s in score_sets]}")
    k = len(score_sets)
    out = []
    for i in range(n):
        recs = [s[i] for s in score_sets]
        ids = (recs[0].query_id, recs[0].pos_id, recs[0].neg_id)
        for r in recs[1:]:
            if r.query_id is not None and ids[0] is not None and (r.query_id, r.pos_id, r.neg_id) != ids:
                raise ValueError(f"record {i + 1}: score files are not aligned to the same triples")
        pos = neg = 0.0
        for r in recs:
            pos += r.pos_score
            neg += r.neg_score
        out.append(TeacherScoreRecord(pos / k, neg / k, *ids))
    return out


# -- training ------------------------------------------------------------------------


def _train(scorer: Scorer, triples: Sequence[TrainingTriple], texts: TextIndex, cfg: TrainConfig,
           teacher: Optional[Sequence[TeacherScoreRecord]] = None,
           validation: Optional[Validation] = None, log_path=None) -> Checkpoint:
    if not triples:
        raise ValueError("no training triples")
    kind = cfg.loss_kind
    if kind.needs_teacher:
        if teacher is None:
            raise MissingTeacherScores(f"loss {kind.value} needs teacher scores")
        check_alignment(teacher, triples, "teacher scores")
        t_pos = np.array([r.pos_score for r in teacher])
        t_neg = np.array([r.neg_score for r in teacher])

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(scorer.parameters(), cfg.learning_rate)
    log: list[dict] = []
    init_val = validation.ndcg10(scorer) if validation else float("nan")
    best = Checkpoint.capture(scorer, 0, init_val)
    bad_intervals = 0
    order = rng.permutation(len(triples))
    cursor = 0
    acc_loss, acc_pos, acc_neg, acc_hits, acc_n, acc_steps = 0.0, 0.0, 0.0, 0, 0, 0

    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > len(order):
            order = rng.permutation(len(triples))
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        q, p, n = zip(*(texts.triple(triples[i]) for i in idx))

        pos, neg = scorer.score_triples(q, p, n)
        if kind.needs_teacher:
            batch = ScorePairBatch(pos, neg, t_pos[idx], t_neg[idx])
        else:
            batch = ScorePairBatch(pos, neg)
        try:
            loss = compute_loss(kind, batch)
            opt.zero_grad()
            loss.backward()
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        opt.step()

        acc_loss += loss.item()
        acc_pos += float(pos.data.sum())
        acc_neg += float(neg.data.sum())
        acc_hits += int((pos.data > neg.data).sum())
        acc_n += len(idx)
        acc_steps += 1

        validate = validation is not None and step % cfg.validation_interval == 0
        if step % cfg.log_interval == 0 or validate or step == cfg.max_steps:
            row = {"step": step, "loss": acc_loss / acc_steps, "pairwise_acc": acc_hits / acc_n,
                   "margin_mean_pos": acc_pos / acc_n, "margin_mean_neg": acc_neg / acc_n,
                   "val_ndcg10": float("nan")}
            acc_loss, acc_pos, acc_neg, acc_hits, acc_n, acc_steps = 0.0, 0.0, 0.0, 0, 0, 0
            if validate:
                val = validation.ndcg10(scorer)
                row["val_ndcg10"] = val
                if val > best.val_ndcg10 or math.isnan(best.val_ndcg10):
                    best = Checkpoint.capture(scorer, step, val)
                    bad_intervals = 0
                else:
                    bad_intervals += 1
            log.append(row)
            logger.debug("step %d loss %.5f acc %.3f val %s", step, row["loss"],
                         row["pairwise_acc"], row["val_ndcg10"])
            if validate and bad_intervals >= cfg.early_stop_patience:
                break

    if validation is None:
        best = Checkpoint.capture(scorer, step if cfg.max_steps else 0, float("nan"))
    best.log = log
    if log_path is not None:
        write_log(log_path, log)
    return best


def train_teacher(scorer: Scorer, triples: Sequence[TrainingTriple], texts: TextIndex,
                  cfg: TrainConfig, validation: Optional[Validation] = None,
                  log_path=None) -> Checkpoint:
    """Train a CAT scorer on binary triple labels with RankNet."""
    if scorer.kind is not ScorerKind.CAT:
        raise ValueError("the teacher must be a CAT scorer")
    if cfg.loss_kind is not LossKind.RANKNET:
        raise ValueError("teachers train with the ranknet loss")
    return _train(scorer, triples, texts, cfg, None, validation, log_path)


def train_student(scorer: Scorer, triples: Sequence[TrainingTriple], texts: TextIndex,
                  cfg: TrainConfig, teacher_scores: Optional[Sequence[TeacherScoreRecord]] = None,
                  validation: Optional[Validation] = None, log_path=None) -> Checkpoint:
    """Train any scorer; the ``ranknet`` loss ignores ``teacher_scores`` entirely."""
    teacher = teacher_scores if cfg.loss_kind.needs_teacher else None
    return _train(scorer, triples, texts, cfg, teacher, validation, log_path)


def held_out_accuracy(scorer: Scorer, triples: Sequence[TrainingTriple], texts: TextIndex) -> float:
    recs = generate_teacher_scores(scorer, triples, texts)
    return pairwise_accuracy([r.pos_score for r in recs], [r.neg_score for r in recs])
