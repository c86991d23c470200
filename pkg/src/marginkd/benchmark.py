"""Query latency at re-ranking time and the latency / effectiveness table.

One trial scores one query against every candidate in a single batch. The
timer starts once token ids are prepared and passage representations are
already in memory, so it covers query encoding plus interaction only (for
CAT, which has no cache, the full joint encoding).
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .evaluation import MetricReport
from .scorers import NotCacheableError, PassageCache, Scorer, ScorerKind, stack_entries

MIN_TRIALS = 30
MIN_WARMUP = 5
TIMER_BOUNDARY = "after tokenization; covers query encoding and interaction"

# glibc mallopt parameters
_M_TRIM_THRESHOLD, _M_TOP_PAD, _M_MMAP_THRESHOLD = -1, -2, -3
_ALLOCATOR_PIN = 1 << 30


def pin_allocator() -> bool:
    """Stop glibc from returning large temporaries to the kernel between trials.

    With default settings every trial re-faults tens of megabytes of fresh
    pages, which shows up as system time that varies from run to run. The
    setting is process-wide and stays in effect. Returns False when the C
    library has no ``mallopt`` (non-glibc platforms), which leaves timing as is.
    """
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        return False
    return all(mallopt(param, _ALLOCATOR_PIN) == 1
               for param in (_M_MMAP_THRESHOLD, _M_TRIM_THRESHOLD, _M_TOP_PAD))


STORAGE_CLASS = {
    ScorerKind.DOT: "|P|",
    ScorerKind.COLBERT: "|T|",
    ScorerKind.PRETT: "|T|",
    ScorerKind.TK: "|T|",
}


@dataclass
class CacheStats:
    kind: str
    entries: int
    rows: int
    vector_size: int
    storage_class: str

    @property
    def storage_vectors(self) -> int:
        """Storage in units of one vector, i.e. rows."""
        return self.rows


def build_cache(scorer: Scorer, passages: Mapping) -> tuple[PassageCache, CacheStats]:
    """Encode every passage once; ``passages`` maps integer-like ids to token ids."""
    kind = scorer.kind
    if not kind.cacheable:
        raise NotCacheableError(f"{kind.value} scoring is not cacheable")
    cache: Optional[PassageCache] = None
    for pid, ids in passages.items():
        entry = scorer.passage_entry(np.asarray(ids))
        if cache is None:
            cache = PassageCache(kind, entry.shape[1])
        cache.add(pid, entry)
    if cache is None:
        cache = PassageCache(kind, 0)
    stats = CacheStats(kind.value, len(cache), cache.total_rows, cache.dim, STORAGE_CLASS[kind])
    return cache, stats


@dataclass
class LatencyReport:
    kind: str
    median_ms: float
    p95_ms: float
    mean_ms: float
    trials: int
    warmup: int
    candidates: int
    threads: str
    cache_entries: int = 0
    cache_rows: int = 0
    vector_size: int = 0
    storage_class: str = "none"
    metrics: dict = field(default_factory=dict)
    timings_ms: list = field(default_factory=list, repr=False)


def measure_latency(scorer: Scorer, query: np.ndarray, candidates: Sequence,
                    trials: int = MIN_TRIALS, warmup: int = MIN_WARMUP,
                    threads: Optional[int] = 1) -> LatencyReport:
    """Median and p95 wall-clock latency of scoring ``query`` against ``candidates``.

    ``candidates`` are cache entries for cacheable scorers and passage token
    ids for CAT. ``threads=None`` leaves the BLAS thread pool alone; that
    mode is labelled in the report so it is never mixed with 1-thread runs.
    """
    if trials < MIN_TRIALS:
        raise ValueError(f"need at least {MIN_TRIALS} trials, got {trials}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"need at least {MIN_WARMUP} warm-up trials, got {warmup}")
    if len(candidates) == 0:
        raise ValueError("no candidates")
    query = np.asarray(query)
    if scorer.kind.cacheable:
        block = stack_entries(list(candidates))

        def run():
            return scorer.score_block(query, block)
    else:
        passages = [np.asarray(p) for p in candidates]

        def run():
            return scorer.score_passages(query, passages)

    pin_allocator()
    limit = threadpool_limits(limits=threads) if threads is not None else nullcontext()
    with limit:
        for _ in range(warmup):
            run()
        timings = np.empty(trials)
        for i in range(trials):
            t0 = time.perf_counter_ns()
            run()
            timings[i] = (time.perf_counter_ns() - t0) / 1e6
    return LatencyReport(scorer.kind.value, float(np.median(timings)),
                         float(np.percentile(timings, 95)), float(timings.mean()), trials, warmup,
                         len(candidates), "1" if threads == 1 else str(threads or "default"),
                         timings_ms=timings.tolist())


def attach_cache_stats(report: LatencyReport, stats: CacheStats) -> LatencyReport:
    report.cache_entries = stats.entries
    report.cache_rows = stats.rows
    report.vector_size = stats.vector_size
    report.storage_class = stats.storage_class
    return report


_LATENCY_FIELDS = ["kind", "median_ms", "p95_ms", "mean_ms", "trials", "warmup", "candidates",
                   "threads", "cache_entries", "cache_rows", "vector_size", "storage_class"]


def write_latency_csv(path, reports: Iterable[LatencyReport]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# timer: {TIMER_BOUNDARY}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_LATENCY_FIELDS)
        for r in reports:
            w.writerow([_cell(getattr(r, name)) for name in _LATENCY_FIELDS])


def read_latency_csv(path) -> list[LatencyReport]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(line for line in f if not line.startswith("#")))
    types = {f.name: f.type for f in fields(LatencyReport)}
    out = []
    for row in rows:
        kwargs = {}
        for name in _LATENCY_FIELDS:
            t = types[name]
            kwargs[name] = float(row[name]) if t == "float" else int(row[name]) if t == "int" \
                else row[name]
        out.append(LatencyReport(**kwargs))
    return out


# -- trade-off table ----------------------------------------------------------------


@dataclass
class TradeoffRow:
    kind: str
    variant: str
    median_ms: float
    p95_ms: float
    storage_class: str
    ndcg10: float
    mrr10: float
    map1000: float


_METRIC_COLUMNS = {"ndcg10": "ndcg@10", "mrr10": "mrr@10", "map1000": "map@1000"}


def tradeoff_table(latency: Sequence[LatencyReport],
                   metrics: Mapping[tuple[str, str], MetricReport | Mapping[str, float]]
                   ) -> list[TradeoffRow]:
    """Join latency (per scorer kind) with effectiveness (per kind and teacher variant)."""
    by_kind = {}
    for r in latency:
        if r.kind in by_kind:
            raise ValueError(f"two latency reports for {r.kind}")
        by_kind[r.kind] = r
    rows = []
    seen = set()
    for (kind, variant), report in sorted(metrics.items()):
        if kind not in by_kind:
            raise KeyError(f"no latency report for scorer {kind!r}")
        means = report.means if isinstance(report, MetricReport) else report
        missing = [m for m in _METRIC_COLUMNS.values() if m not in means]
        if missing:
            raise KeyError(f"metrics for ({kind}, {variant}) lack {missing}")
        lat = by_kind[kind]
        rows.append(TradeoffRow(kind, variant, lat.median_ms, lat.p95_ms, lat.storage_class,
                                *(float(means[m]) for m in _METRIC_COLUMNS.values())))
        seen.add(kind)
    unmatched = sorted(set(by_kind) - seen)
    if unmatched:
        raise KeyError(f"no effectiveness metrics for {unmatched}")
    return rows


def write_tradeoff_csv(path, rows: Iterable[TradeoffRow]) -> None:
    names = [f.name for f in fields(TradeoffRow)]
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_cell(v) for v in asdict(r).values()])


def read_tradeoff_csv(path) -> list[TradeoffRow]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    out = []
    for row in rows:
        out.append(TradeoffRow(row["kind"], row["variant"], float(row["median_ms"]),
                               float(row["p95_ms"]), row["storage_class"],
                               *(float(row[c]) for c in _METRIC_COLUMNS)))
    return out


def _cell(v):
    return repr(float(v)) if isinstance(v, float) else v
