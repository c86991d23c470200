"""Ranking metrics, label binarization, and margin distribution statistics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import Qrels, sort_ranking

DEFAULT_BINARIZATION = 2


def binarize(qrels: Qrels, threshold: int = DEFAULT_BINARIZATION) -> Qrels:
    """Grade >= threshold becomes 1, anything else 0."""
    if threshold < 1:
        raise ValueError("binarization threshold must be >= 1")
    return {q: {p: int(g >= threshold) for p, g in docs.items()} for q, docs in qrels.items()}


# -- per-query metrics --------------------------------------------------------


def dcg(gains: Sequence[float]) -> float:
    total = 0.0
    for rank, g in enumerate(gains, start=1):
        total += (2.0 ** g - 1.0) / math.log2(rank + 1)
    return total


def ndcg_query(ranked: Sequence[str], grades: Mapping[str, int], k: int = 10) -> Optional[float]:
    """nDCG@k with exponential gain; ``None`` when the query has no graded document."""
    ideal = dcg(sorted((g for g in grades.values() if g > 0), reverse=True)[:k])
    if ideal == 0.0:
        return None
    return dcg([grades.get(p, 0) for p in ranked[:k]]) / ideal


def mrr_query(ranked: Sequence[str], relevant: Mapping[str, int], k: int = 10) -> Optional[float]:
    if not any(relevant.values()):
        return None
    for rank, p in enumerate(ranked[:k], start=1):
        if relevant.get(p, 0) > 0:
            return 1.0 / rank
    return 0.0


def ap_query(ranked: Sequence[str], relevant: Mapping[str, int], k: int = 1000) -> Optional[float]:
    """Average precision over the top ``k``, normalized by ``min(#relevant, k)``."""
    n_rel = sum(1 for v in relevant.values() if v > 0)
    if n_rel == 0:
        return None
    hits, total = 0, 0.0
    for rank, p in enumerate(ranked[:k], start=1):
        if relevant.get(p, 0) > 0:
            hits += 1
            total += hits / rank
    return total / min(n_rel, k)


# -- reports --------------------------------------------------------------------


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def query_count(self) -> int:
        return len(self.per_query)

    def __getitem__(self, metric: str) -> float:
        return self.means[metric]

    def to_tsv(self) -> str:
        names = sorted(self.means)
        lines = ["qid\t" + "\t".join(names)]
        for qid in sorted(self.per_query):
            row = self.per_query[qid]
            lines.append(qid + "\t" + "\t".join(
                f"{row[n]:.6f}" if n in row else "" for n in names))
        lines.append("all\t" + "\t".join(f"{self.means[n]:.6f}" for n in names))
        return "\n".join(lines) + "\n"

    def write(self, tsv_path, json_path=None) -> None:
        with open(tsv_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_tsv())
        if json_path is not None:
            with open(json_path, "w", encoding="utf-8") as f:
                json.dump({"means": self.means, "counts": self.counts,
                           "skipped": self.skipped}, f, indent=2, sort_keys=True)

    @classmethod
    def read_json(cls, path) -> "MetricReport":
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        return cls(means=d["means"], counts=d.get("counts", {}), skipped=d.get("skipped", []))


def evaluate(run: Mapping[str, Sequence[tuple[str, float]]], qrels: Qrels, k: int = 10,
             map_k: int = 1000, threshold: int = DEFAULT_BINARIZATION) -> MetricReport:
    """nDCG@k on raw grades; MRR@k and MAP@map_k on binarized grades.

    Queries missing from qrels are skipped; queries without relevant documents
    drop out of the mean of the metric they are undefined for.
    """
    binary = binarize(qrels, threshold)
    names = {"ndcg": f"ndcg@{k}", "mrr": f"mrr@{k}", "map": f"map@{map_k}"}
    report = MetricReport()
    sums = {n: 0.0 for n in names.values()}
    counts = {n: 0 for n in names.values()}
    for qid, scored in run.items():
        if qid not in qrels:
            report.skipped.append(qid)
            continue
        ranked = [p for p, _ in sort_ranking(scored)]
        values = {
            names["ndcg"]: ndcg_query(ranked, qrels[qid], k),
            names["mrr"]: mrr_query(ranked, binary[qid], k),
            names["map"]: ap_query(ranked, binary[qid], map_k),
        }
        row = {}
        for name, v in values.items():
            if v is not None:
                row[name] = v
                sums[name] += v
                counts[name] += 1
        report.per_query[qid] = row
    report.means = {n: (sums[n] / counts[n] if counts[n] else 0.0) for n in names.values()}
    report.counts = counts
    return report


# -- margins ---------------------------------------------------------------------


@dataclass
class MarginHistogram:
    label: str
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float
    fraction_negative: float
    size: int

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])

    def summary(self) -> dict:
        return {"label": self.label, "n": self.size, "mean": self.mean, "std": self.std,
                "fraction_negative": self.fraction_negative}


def bin_edges(values: np.ndarray, bins: int) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def histogram(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Counts with half-open bins ``[lo, hi)``; the last bin also takes ``hi``."""
    idx = np.searchsorted(edges, values, side="right") - 1
    idx[values == edges[-1]] = len(edges) - 2
    inside = (idx >= 0) & (idx < len(edges) - 1)
    return np.bincount(idx[inside], minlength=len(edges) - 1)


def margin_stats(pos: Sequence[float], neg: Sequence[float], label: str = "",
                 bins: int = 30, edges: Optional[np.ndarray] = None) -> MarginHistogram:
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError("pos and neg scores must align")
    if pos.size == 0:
        raise ValueError("no scores")
    margins = pos - neg
    edges = bin_edges(margins, bins) if edges is None else np.asarray(edges, dtype=np.float64)
    return MarginHistogram(label, edges, histogram(margins, edges), float(margins.mean()),
                           float(margins.std()), float((margins < 0).mean()), margins.size)


def pairwise_accuracy(pos: Sequence[float], neg: Sequence[float]) -> float:
    """Share of pairs with pos strictly above neg."""
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError("pos and neg scores must align")
    if pos.size == 0:
        raise ValueError("no scores")
    return float((pos > neg).mean())
