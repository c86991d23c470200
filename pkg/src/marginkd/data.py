"""Training triples, teacher-score files, qrels, TREC runs, and a synthetic corpus.

Formats (all UTF-8, ``\\n`` line endings):

* collection / queries: ``id<TAB>text``
* triples: ``query_id<TAB>pos_id<TAB>neg_id``
* teacher scores: ``pos_score<TAB>neg_score<TAB>query_id<TAB>pos_id<TAB>neg_id``,
  scores with 6 decimals, line k aligned with triple k
* qrels: ``qid 0 pid grade``
* run: ``qid Q0 pid rank score tag``
* candidates: ``qid<TAB>pid``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

Run = dict[str, list[tuple[str, float]]]
Qrels = dict[str, dict[str, int]]


class FormatError(ValueError):
    """A malformed input line; carries the path and 1-based line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class TrainingTriple(NamedTuple):
    query_id: str
    pos_id: str
    neg_id: str


@dataclass(frozen=True)
class TeacherScoreRecord:
    pos_score: float
    neg_score: float
    query_id: Optional[str] = None
    pos_id: Optional[str] = None
    neg_id: Optional[str] = None

    @property
    def margin(self) -> float:
        return self.pos_score - self.neg_score


def pid_sort_key(pid: str):
    """Numeric ids order numerically, other ids lexically after them."""
    return (0, int(pid), "") if pid.isdigit() else (1, 0, pid)


def _lines(path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line:
                yield lineno, line


def _write_lines(path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


# -- collection & triples ---------------------------------------------------


def read_collection(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in _lines(path):
        parts = line.split("\t", 1)
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected 2 tab-separated columns")
        pid, text = parts
        if pid in out:
            raise FormatError(path, lineno, f"duplicate id {pid!r}")
        out[pid] = text
    return out


read_queries = read_collection


def write_collection(path, texts: Mapping[str, str]) -> None:
    _write_lines(path, (f"{k}\t{v}" for k, v in texts.items()))


write_queries = write_collection


def read_triples(path) -> list[TrainingTriple]:
    out = []
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(path, lineno, f"expected 3 columns, got {len(parts)}")
        if parts[1] == parts[2]:
            raise FormatError(path, lineno, "positive and negative passage ids are equal")
        out.append(TrainingTriple(*parts))
    return out


def write_triples(path, triples: Iterable[TrainingTriple]) -> None:
    _write_lines(path, ("\t".join(t) for t in triples))


# -- teacher scores ---------------------------------------------------------


def format_score(x: float) -> str:
    return f"{x:.6f}"


def write_teacher_scores(path, records: Sequence[TeacherScoreRecord],
                         triples: Optional[Sequence[TrainingTriple]] = None) -> None:
    if triples is not None and len(triples) != len(records):
        raise ValueError(f"{len(records)} records for {len(triples)} triples")
    lines = []
    for i, r in enumerate(records):
        if not (np.isfinite(r.pos_score) and np.isfinite(r.neg_score)):
            raise ValueError(f"record {i}: non-finite score")
        ids = (r.query_id, r.pos_id, r.neg_id)
        if triples is not None:
            ids = tuple(triples[i])
        cols = [format_score(r.pos_score), format_score(r.neg_score)]
        if all(x is not None for x in ids):
            cols.extend(ids)
        lines.append("\t".join(cols))
    _write_lines(path, lines)


def read_teacher_scores(path, triples: Optional[Sequence[TrainingTriple]] = None
                        ) -> list[TeacherScoreRecord]:
    """Read a score file; with ``triples`` given, check count and id alignment."""
    out = []
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) < 2:
            raise FormatError(path, lineno, "expected at least 2 columns")
        try:
            pos, neg = float(parts[0]), float(parts[1])
        except ValueError:
            raise FormatError(path, lineno, "non-numeric score") from None
        if not (np.isfinite(pos) and np.isfinite(neg)):
            raise FormatError(path, lineno, "non-finite score")
        ids = tuple(parts[2:5]) if len(parts) >= 5 else (None, None, None)
        out.append(TeacherScoreRecord(pos, neg, *ids))
    if triples is not None:
        check_alignment(out, triples, path)
    return out


def check_alignment(records: Sequence[TeacherScoreRecord], triples: Sequence[TrainingTriple],
                    source="records") -> None:
    if len(records) != len(triples):
        raise ValueError(f"{source}: {len(records)} score records but {len(triples)} triples")
    for i, (r, t) in enumerate(zip(records, triples)):
        if r.query_id is not None and (r.query_id, r.pos_id, r.neg_id) != tuple(t):
            raise ValueError(f"{source}: record {i + 1} ids {(r.query_id, r.pos_id, r.neg_id)} "
                             f"do not match triple {tuple(t)}")


# -- qrels & runs -------------------------------------------------------------


def read_qrels(path) -> Qrels:
    out: Qrels = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(path, lineno, f"expected 'qid 0 pid grade', got {len(parts)} fields")
        qid, _, pid, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise FormatError(path, lineno, f"grade {grade!r} is not an integer") from None
        if g < 0:
            raise FormatError(path, lineno, "grade must be >= 0")
        out.setdefault(qid, {})[pid] = g
    return out


def write_qrels(path, qrels: Qrels) -> None:
    _write_lines(path, (f"{q} 0 {p} {g}" for q, docs in qrels.items() for p, g in docs.items()))


def sort_ranking(scored: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending score, ties by passage id ascending."""
    ranked = sorted(scored, key=lambda ps: pid_sort_key(ps[0]))
    ranked.sort(key=lambda ps: -ps[1])
    pids = [p for p, _ in ranked]
    if len(set(pids)) != len(pids):
        raise ValueError("duplicate passage in ranking")
    return ranked


def write_run(path, run: Mapping[str, Iterable[tuple[str, float]]], tag: str = "marginkd") -> None:
    lines = []
    for qid, scored in run.items():
        for rank, (pid, score) in enumerate(sort_ranking(scored), start=1):
            lines.append(f"{qid} Q0 {pid} {rank} {float(score)!r} {tag}")
    _write_lines(path, lines)


def read_run(path) -> Run:
    out: Run = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(path, lineno, f"expected 6 fields, got {len(parts)}")
        qid, _, pid, _rank, score, _tag = parts
        try:
            s = float(score)
        except ValueError:
            raise FormatError(path, lineno, f"score {score!r} is not a number") from None
        out.setdefault(qid, []).append((pid, s))
    return {q: sort_ranking(v) for q, v in out.items()}


def read_candidates(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(path, lineno, "expected 'qid<TAB>pid'")
        out.setdefault(parts[0], []).append(parts[1])
    return out


def write_candidates(path, candidates: Mapping[str, Sequence[str]]) -> None:
    _write_lines(path, (f"{q}\t{p}" for q, pids in candidates.items() for p in pids))


# -- synthetic corpus -------------------------------------------------------


# fraction of topic words per passage, indexed by grade
_PURITY = {1: 0.25, 2: 0.5, 3: 0.8}


@dataclass
class SyntheticCorpus:
    """A latent-topic stand-in for a passage ranking collection."""

    words: list[str]
    collection: dict[str, str]
    queries: dict[str, dict[str, str]]
    triples: dict[str, list[TrainingTriple]]
    qrels: Qrels
    candidates: dict[str, dict[str, list[str]]]
    passage_topic: dict[str, int] = field(default_factory=dict)
    query_topic: dict[str, int] = field(default_factory=dict)

    def all_queries(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for split in self.queries.values():
            out.update(split)
        return out

    def write(self, directory) -> Path:
        from .encoder import Vocabulary

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        Vocabulary(self.words).save(d / "vocab.txt")
        write_collection(d / "collection.tsv", self.collection)
        for split, qs in self.queries.items():
            write_queries(d / f"queries.{split}.tsv", qs)
        for split, ts in self.triples.items():
            write_triples(d / f"triples.{split}.tsv", ts)
        write_qrels(d / "qrels.tsv", self.qrels)
        for split, cands in self.candidates.items():
            write_candidates(d / f"candidates.{split}.tsv", cands)
        return d


def generate_synthetic_corpus(seed: int, n_queries: int = 500, n_passages: int = 5000,
                              vocab_size: int = 5000, *, n_topics: int = 20,
                              words_per_topic: int = 8, n_val_queries: int = 25,
                              n_eval_queries: int = 50, triples_per_query: int = 20,
                              candidates_per_query: int = 50, relevant_candidates: int = 15,
                              query_len: tuple[int, int] = (3, 6),
                              passage_len: tuple[int, int] = (10, 20)) -> SyntheticCorpus:
    """Sample a corpus where relevance means sharing the query's latent topic.

    Each passage gets a topic and a grade level in {1, 2, 3}; higher levels
    draw a larger, fixed share of their words (at least one) from the topic
    vocabulary. A query is relevant to every passage of its topic at that
    passage's grade and to nothing else. Triples pair a random relevant passage with a random
    non-relevant one.
    """
    if min(n_queries, n_passages, vocab_size, n_topics) < 1:
        raise ValueError("sizes must be >= 1")
    from .encoder import SPECIAL_TOKENS

    n_words = vocab_size - len(SPECIAL_TOKENS)
    n_topic_words = n_topics * words_per_topic
    if n_topic_words + 1 > n_words:
        raise ValueError(f"vocab_size {vocab_size} too small for {n_topics} topics x "
                         f"{words_per_topic} words plus background words")
    rng = np.random.default_rng(seed)
    width = len(str(n_words - 1))
    words = [f"w{i:0{width}d}" for i in range(n_words)]
    topic_words = np.arange(n_topic_words).reshape(n_topics, words_per_topic)
    background = np.arange(n_topic_words, n_words)

    collection: dict[str, str] = {}
    passage_topic: dict[str, int] = {}
    passage_grade: dict[str, int] = {}
    by_topic: list[list[str]] = [[] for _ in range(n_topics)]
    for i in range(n_passages):
        pid = str(i)
        topic = int(rng.integers(n_topics))
        grade = int(rng.integers(1, 4))
        length = int(rng.integers(passage_len[0], passage_len[1] + 1))
        n_on_topic = max(1, int(round(_PURITY[grade] * length)))
        from_topic = np.zeros(length, dtype=bool)
        from_topic[rng.choice(length, size=n_on_topic, replace=False)] = True
        ids = np.where(from_topic, rng.choice(topic_words[topic], size=length),
                       rng.choice(background, size=length))
        collection[pid] = " ".join(words[j] for j in ids)
        passage_topic[pid] = topic
        passage_grade[pid] = grade
        by_topic[topic].append(pid)

    all_pids = list(collection)
    splits = {"train": n_queries, "val": n_val_queries, "eval": n_eval_queries}
    queries: dict[str, dict[str, str]] = {}
    triples: dict[str, list[TrainingTriple]] = {}
    candidates: dict[str, dict[str, list[str]]] = {}
    qrels: Qrels = {}
    query_topic: dict[str, int] = {}
    qnum = 0
    for split, count in splits.items():
        queries[split], triples[split] = {}, []
        if split != "train":
            candidates[split] = {}
        for _ in range(count):
            qid = f"q{qnum}"
            qnum += 1
            topic = int(rng.integers(n_topics))
            length = int(rng.integers(query_len[0], query_len[1] + 1))
            ids = rng.choice(topic_words[topic], size=length, replace=False)
            queries[split][qid] = " ".join(words[j] for j in ids)
            query_topic[qid] = topic
            relevant = by_topic[topic]
            qrels[qid] = {p: passage_grade[p] for p in relevant}
            if not relevant or len(relevant) == n_passages:
                continue
            relevant_set = set(relevant)
            for _ in range(triples_per_query):
                pos = relevant[int(rng.integers(len(relevant)))]
                while True:
                    neg = all_pids[int(rng.integers(len(all_pids)))]
                    if neg not in relevant_set:
                        break
                triples[split].append(TrainingTriple(qid, pos, neg))
            if split != "train":
                k = min(relevant_candidates, len(relevant), candidates_per_query)
                chosen = list(rng.choice(relevant, size=k, replace=False))
                seen = set(chosen)
                while len(chosen) < min(candidates_per_query, n_passages):
                    p = all_pids[int(rng.integers(len(all_pids)))]
                    if p not in seen and p not in relevant_set:
                        chosen.append(p)
                        seen.add(p)
                order = rng.permutation(len(chosen))
                candidates[split][qid] = [chosen[i] for i in order]

    return SyntheticCorpus(words, collection, queries, triples, qrels, candidates,
                           passage_topic, query_topic)


@dataclass
class CorpusFiles:
    """A corpus directory read back from disk."""

    directory: Path
    collection: dict[str, str]
    queries: dict[str, str]
    qrels: Qrels

    def triples(self, split: str) -> list[TrainingTriple]:
        return read_triples(self.directory / f"triples.{split}.tsv")

    def candidates(self, split: str) -> dict[str, list[str]]:
        return read_candidates(self.directory / f"candidates.{split}.tsv")

    @property
    def vocab_path(self) -> Path:
        return self.directory / "vocab.txt"


def load_corpus(directory) -> CorpusFiles:
    d = Path(directory)
    queries: dict[str, str] = {}
    for path in sorted(d.glob("queries.*.tsv")):
        for qid, text in read_queries(path).items():
            if qid in queries:
                raise ValueError(f"{path}: query id {qid!r} appears in more than one split")
            queries[qid] = text
    return CorpusFiles(d, read_collection(d / "collection.tsv"), queries, read_qrels(d / "qrels.tsv"))
