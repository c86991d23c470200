"""Command-line entry point: ``marginkd <subcommand> ...``.

Experiment definitions live in a JSON config file; flags carry paths and
seeds. Subcommands communicate only through files.

Exit codes: 0 success, 2 usage or config error, 3 bad or missing input,
4 training diverged, 1 anything else. Errors are printed to stderr as one
JSON object.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .benchmark import (attach_cache_stats, build_cache, measure_latency, read_latency_csv,
                        tradeoff_table, write_latency_csv, write_tradeoff_csv)
from .config import ConfigError, ExperimentConfig
from .data import (FormatError, generate_synthetic_corpus, load_corpus, read_qrels, read_run,
                   read_teacher_scores, write_run, write_teacher_scores)
from .encoder import Vocabulary
from .evaluation import MetricReport, bin_edges, evaluate, margin_stats
from .losses import MissingTeacherScores
from .pipeline import (Checkpoint, TextIndex, TrainingDiverged, UnknownIdError, Validation,
                       ensemble_scores, generate_teacher_scores, rerank, train_student,
                       train_teacher)
from .scorers import NotCacheableError, ScorerKind, make_scorer

logger = logging.getLogger("marginkd")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig() if args.config is None else ExperimentConfig.load(
        _require(args.config, "config file"))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "corpus", None) is not None:
        cfg.corpus_dir = args.corpus
    if getattr(args, "out", None) is not None:
        cfg.output_dir = args.out
    return cfg


def _corpus(directory):
    d = _require(directory, "corpus directory")
    for name in ("collection.tsv", "qrels.tsv", "vocab.txt"):
        _require(d / name, "corpus file")
    corpus = load_corpus(d)
    texts = TextIndex(Vocabulary.load(corpus.vocab_path), corpus.queries, corpus.collection)
    return corpus, texts


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(_require(path, "checkpoint"))


# -- subcommands ------------------------------------------------------------------


def cmd_gen_corpus(args) -> dict:
    cfg = _config(args)
    c = cfg.corpus
    corpus = generate_synthetic_corpus(
        cfg.seed, c.n_queries, c.n_passages, c.vocab_size, n_topics=c.n_topics,
        words_per_topic=c.words_per_topic, n_val_queries=c.n_val_queries,
        n_eval_queries=c.n_eval_queries, triples_per_query=c.triples_per_query,
        candidates_per_query=c.candidates_per_query, relevant_candidates=c.relevant_candidates)
    out = corpus.write(cfg.corpus_dir if args.out is None else args.out)
    with open(out / "corpus.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump({"seed": cfg.seed, "corpus": cfg.to_dict()["corpus"]}, f, indent=2,
                  sort_keys=True)
        f.write("\n")
    return {"corpus_dir": str(out), "passages": len(corpus.collection),
            "train_triples": len(corpus.triples["train"])}


def cmd_train_teacher(args) -> dict:
    cfg = _config(args)
    corpus, texts = _corpus(cfg.corpus_dir)
    out = _out_dir(cfg.output_dir)
    cfg.write(out / "train-teacher.config.json")
    scorer = make_scorer(cfg.teacher.model.scorer_config(len(texts.vocab), cfg.seed))
    validation = Validation(corpus.candidates("val"), corpus.qrels, texts)
    log_path = out / "teacher.log.tsv"
    log_path.unlink(missing_ok=True)
    ckpt = train_teacher(scorer, corpus.triples("train"), texts,
                         cfg.teacher.train.train_config(cfg.seed), validation, log_path)
    ckpt.save(out / "teacher.npz")
    return {"checkpoint": str(out / "teacher.npz"), "step": ckpt.step,
            "val_ndcg10": ckpt.val_ndcg10}


def cmd_score_triples(args) -> dict:
    ckpt = _load_checkpoint(args.checkpoint)
    corpus, texts = _corpus(args.corpus)
    triples = corpus.triples(args.split)
    records = generate_teacher_scores(ckpt, triples, texts, batch_size=args.batch_size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_teacher_scores(args.out, records, triples)
    return {"scores": args.out, "records": len(records)}


def cmd_ensemble(args) -> dict:
    sets = [read_teacher_scores(_require(p, "score file")) for p in args.inputs]
    triples = None
    if args.corpus is not None:
        triples = load_corpus(_require(args.corpus, "corpus directory")).triples(args.split)
    merged = ensemble_scores(sets)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_teacher_scores(args.out, merged, triples)
    return {"scores": args.out, "records": len(merged), "teachers": len(sets)}


def cmd_train_student(args) -> dict:
    cfg = _config(args)
    if args.teacher_scores is not None:
        cfg.student.teacher_scores = args.teacher_scores
    corpus, texts = _corpus(cfg.corpus_dir)
    triples = corpus.triples("train")
    train_cfg = cfg.student.train.train_config(cfg.seed)
    teacher = None
    if train_cfg.loss_kind.needs_teacher:
        if cfg.student.teacher_scores is None:
            raise MissingTeacherScores(
                f"loss {train_cfg.loss_kind.value} needs --teacher-scores or student.teacher_scores")
        teacher = read_teacher_scores(_require(cfg.student.teacher_scores, "teacher scores"),
                                      triples)
    out = _out_dir(cfg.output_dir)
    cfg.write(out / "train-student.config.json")
    scorer = make_scorer(cfg.student.model.scorer_config(len(texts.vocab), cfg.seed))
    validation = Validation(corpus.candidates("val"), corpus.qrels, texts)
    log_path = out / "student.log.tsv"
    log_path.unlink(missing_ok=True)
    ckpt = train_student(scorer, triples, texts, train_cfg, teacher, validation, log_path)
    ckpt.save(out / "student.npz")
    return {"checkpoint": str(out / "student.npz"), "step": ckpt.step,
            "val_ndcg10": ckpt.val_ndcg10}


def cmd_rerank(args) -> dict:
    ckpt = _load_checkpoint(args.checkpoint)
    corpus, texts = _corpus(args.corpus)
    run = rerank(ckpt, corpus.candidates(args.split), texts)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_run(args.out, run, tag=args.tag)
    return {"run": args.out, "queries": len(run)}


def cmd_evaluate(args) -> dict:
    run = read_run(_require(args.run, "run file"))
    qrels = read_qrels(_require(args.qrels, "qrels file"))
    report = evaluate(run, qrels, k=args.k, map_k=args.map_k, threshold=args.threshold)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    report.write(prefix.with_suffix(".tsv"), prefix.with_suffix(".json"))
    return {"metrics": report.means, "queries": report.query_count}


def cmd_margin_stats(args) -> dict:
    corpus, texts = _corpus(args.corpus)
    triples = corpus.triples(args.split)
    out = _out_dir(args.out)
    margins, scores = {}, {}
    for path in args.checkpoints:
        recs = generate_teacher_scores(_load_checkpoint(path), triples, texts)
        label = Path(path).stem if len(set(Path(p).stem for p in args.checkpoints)) == len(
            args.checkpoints) else str(Path(path).with_suffix("")).replace("/", "_")
        scores[label] = (np.array([r.pos_score for r in recs]),
                         np.array([r.neg_score for r in recs]))
        margins[label] = scores[label][0] - scores[label][1]
    # shared bins so histograms of different models line up
    edges = bin_edges(np.concatenate(list(margins.values())), args.bins)
    summary = []
    for label, (pos, neg) in scores.items():
        hist = margin_stats(pos, neg, label=label, edges=edges)
        hist.write_csv(out / f"{label}.margins.csv")
        summary.append(hist.summary())
    with open(out / "margins.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"histograms": [s["label"] for s in summary], "out": str(out)}


def cmd_bench(args) -> dict:
    cfg = _config(args)
    corpus, texts = _corpus(cfg.corpus_dir)
    out = _out_dir(cfg.output_dir)
    cfg.write(out / "bench.config.json")
    b = cfg.bench
    pids = sorted(corpus.collection, key=lambda p: (len(p), p))[: b.candidates]
    passages = {int(p) if p.isdigit() else i: texts.passage(p) for i, p in enumerate(pids)}
    query = texts.query(sorted(corpus.queries)[0])
    reports = []
    for kind in b.kinds:
        scorer = make_scorer(cfg.student.model.scorer_config(len(texts.vocab), cfg.seed, kind))
        if ScorerKind(kind).cacheable:
            cache, stats = build_cache(scorer, passages)
            candidates = [cache[p] for p in passages]
        else:
            stats, candidates = None, list(passages.values())
        report = measure_latency(scorer, query, candidates, trials=b.trials, warmup=b.warmup,
                                 threads=b.threads)
        if stats is not None:
            attach_cache_stats(report, stats)
        logger.info("%s median %.3f ms", kind, report.median_ms)
        reports.append(report)
    write_latency_csv(out / "latency.csv", reports)
    return {r.kind: r.median_ms for r in reports}


def cmd_tradeoff(args) -> dict:
    latency = read_latency_csv(_require(args.latency, "latency file"))
    metrics = {}
    for spec in args.metrics:
        try:
            kind, variant, path = spec.split(":", 2)
        except ValueError:
            raise CliError(f"--metrics entries look like kind:variant:path, got {spec!r}",
                           EXIT_CONFIG) from None
        metrics[(kind, variant)] = MetricReport.read_json(_require(path, "metrics file"))
    try:
        rows = tradeoff_table(latency, metrics)
    except KeyError as exc:
        raise CliError(f"cannot join reports: {exc.args[0]}") from None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_tradeoff_csv(args.out, rows)
    return {"table": args.out, "rows": len(rows)}


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marginkd", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", help="experiment config (JSON)")
            p.add_argument("--seed", type=int)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "write a seeded synthetic corpus", config=True)
    p.add_argument("--out", help="corpus directory")

    for name, func, what in (("train-teacher", cmd_train_teacher, "train the CAT teacher"),
                             ("train-student", cmd_train_student, "train a student scorer"),
                             ("bench", cmd_bench, "measure re-ranking latency")):
        p = add(name, func, what, config=True)
        p.add_argument("--corpus", help="corpus directory")
        p.add_argument("--out", help="output directory")
        if name == "train-student":
            p.add_argument("--teacher-scores", help="teacher-score file")

    p = add("score-triples", cmd_score_triples, "score training triples with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out", required=True)

    p = add("ensemble", cmd_ensemble, "average several teacher-score files")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--corpus", help="check alignment against this corpus' triples")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)

    p = add("rerank", cmd_rerank, "re-rank candidate lists into a run file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--tag", default="marginkd")
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "nDCG@k, MRR@k and MAP of a run")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--map-k", type=int, default=1000)
    p.add_argument("--threshold", type=int, default=2)
    p.add_argument("--out", required=True, help="output prefix for .tsv and .json")

    p = add("margin-stats", cmd_margin_stats, "margin histograms of checkpoints on triples")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--bins", type=int, default=30)
    p.add_argument("--out", required=True)

    p = add("tradeoff", cmd_tradeoff, "join latency with effectiveness")
    p.add_argument("--latency", required=True)
    p.add_argument("--metrics", nargs="+", required=True, metavar="KIND:VARIANT:PATH")
    p.add_argument("--out", required=True)
    return parser


def _fail(command, exc: BaseException, code: int) -> int:
    msg = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
    print(json.dumps(msg), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except CliError as exc:
        return _fail(args.command, exc, exc.code)
    except ConfigError as exc:
        return _fail(args.command, exc, EXIT_CONFIG)
    except TrainingDiverged as exc:
        return _fail(args.command, exc, EXIT_DIVERGED)
    except (FileNotFoundError, FormatError, UnknownIdError, MissingTeacherScores,
            NotCacheableError, ValueError, KeyError) as exc:
        return _fail(args.command, exc, EXIT_INPUT)
    except Exception as exc:  # noqa: BLE001 - report anything unexpected in the same shape
        logger.debug("unexpected failure", exc_info=True)
        return _fail(args.command, exc, EXIT_ERROR)
    print(json.dumps(result, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
