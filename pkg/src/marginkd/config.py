"""JSON experiment configuration with strict key checking.

Defaults describe the toy-scale setup the test-suite and CLI run end to end
(small encoders, learning rates suited to training from scratch). The
library-level :class:`~marginkd.pipeline.TrainConfig` keeps its own defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .losses import LossKind
from .pipeline import TrainConfig
from .scorers import ScorerConfig, ScorerKind


class ConfigError(ValueError):
    pass


def _from_dict(cls, data, where: str, nested: Optional[dict] = None):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = dict(data)
    if nested:
        base = cls()
        for key, sub in nested.items():
            if key in kwargs:
                # partial sections fill in from this parent's defaults
                given = kwargs[key]
                merged = asdict(getattr(base, key))
                if isinstance(given, dict):
                    merged.update(given)
                else:
                    merged = given
                kwargs[key] = sub.from_dict(merged, f"{where}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class CorpusSection:
    n_queries: int = 500
    n_passages: int = 5000
    vocab_size: int = 5000
    n_topics: int = 20
    words_per_topic: int = 8
    n_val_queries: int = 25
    n_eval_queries: int = 50
    triples_per_query: int = 20
    candidates_per_query: int = 50
    relevant_candidates: int = 15

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")

    @classmethod
    def from_dict(cls, d, where="corpus"):
        return _from_dict(cls, d, where)


@dataclass
class ModelSection:
    kind: str = "cat"
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 64
    max_positions: int = 256
    output_dim: Optional[int] = None
    mask_repeat: int = 8
    split_layer: Optional[int] = None
    gate_alpha: float = 0.5

    def __post_init__(self):
        self.kind = ScorerKind(self.kind).value

    def scorer_config(self, vocab_size: int, seed: int, kind: Optional[str] = None) -> ScorerConfig:
        cfg = ScorerConfig.default(
            kind or self.kind, seed=seed, split_layer=self.split_layer,
            output_dim=self.output_dim, vocab_size=vocab_size, embed_dim=self.embed_dim,
            num_layers=self.num_layers, num_heads=self.num_heads, ffn_dim=self.ffn_dim,
            max_positions=self.max_positions, gate_alpha=self.gate_alpha)
        cfg.mask_repeat = self.mask_repeat
        return cfg

    @classmethod
    def from_dict(cls, d, where="model"):
        return _from_dict(cls, d, where)


@dataclass
class TrainSection:
    learning_rate: float = 3e-3
    batch_size: int = 32
    max_steps: int = 600
    validation_interval: int = 150
    early_stop_patience: int = 10
    log_interval: int = 50
    loss_kind: str = "ranknet"

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind).value
        self.train_config(0)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_steps=self.max_steps, validation_interval=self.validation_interval,
                           early_stop_patience=self.early_stop_patience,
                           log_interval=self.log_interval, seed=seed, loss_kind=self.loss_kind)

    @classmethod
    def from_dict(cls, d, where="train"):
        return _from_dict(cls, d, where)


@dataclass
class TeacherSection:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=lambda: TrainSection(max_steps=1200,
                                                                      validation_interval=300))

    def __post_init__(self):
        if self.model.kind != ScorerKind.CAT.value:
            raise ValueError("the teacher model must be of kind 'cat'")
        if self.train.loss_kind != LossKind.RANKNET.value:
            raise ValueError("the teacher trains with the 'ranknet' loss")

    @classmethod
    def from_dict(cls, d, where="teacher"):
        return _from_dict(cls, d, where, {"model": ModelSection, "train": TrainSection})


@dataclass
class StudentSection:
    model: ModelSection = field(default_factory=lambda: ModelSection(kind="dot"))
    train: TrainSection = field(default_factory=lambda: TrainSection(
        loss_kind="margin_mse", max_steps=400, validation_interval=100))
    teacher_scores: Optional[str] = None

    @classmethod
    def from_dict(cls, d, where="student"):
        return _from_dict(cls, d, where, {"model": ModelSection, "train": TrainSection})


@dataclass
class BenchSection:
    kinds: list = field(default_factory=lambda: [k.value for k in ScorerKind])
    candidates: int = 1000
    trials: int = 30
    warmup: int = 5
    threads: Optional[int] = 1

    def __post_init__(self):
        self.kinds = [ScorerKind(k).value for k in self.kinds]
        if self.candidates < 1:
            raise ValueError("candidates must be >= 1")

    @classmethod
    def from_dict(cls, d, where="bench"):
        return _from_dict(cls, d, where)


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus_dir: str = "corpus"
    output_dir: str = "out"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    student: StudentSection = field(default_factory=StudentSection)
    bench: BenchSection = field(default_factory=BenchSection)

    @classmethod
    def from_dict(cls, d, where="config") -> "ExperimentConfig":
        return _from_dict(cls, d, where, {"corpus": CorpusSection, "teacher": TeacherSection,
                                          "student": StudentSection, "bench": BenchSection})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(data, str(path))

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
