"""Pipeline configuration: JSON file with one object per section.

Unknown keys are rejected.  Defaults follow the published hyperparameters
(300-wide embeddings, LMs, conversation and task layers; attention 500;
dropouts 0.2/0.1/0.05/0.05; Adam defaults; unfreezing every 2 epochs).
``benchmark_config()`` is the reduced-width preset used for the synthetic
benchmark runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .classifier.model import ABLATION_ROWS
from .classifier.baselines import VARIANTS
from .corpus import DEFAULT_LABEL_MIX, LABELS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSection:
    n_dialogues: int = 1200
    vocab_size: int = 1000
    label_mix: tuple[float, ...] = DEFAULT_LABEL_MIX
    multi_label_rate: float = 0.10
    labeled_fraction: float = 0.3  # enough labeled utterances for the n_triples cap
    n_triples: int | None = 2000  # cap on labeled triples, in dialogue order
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    topic_coherence: float = 0.6
    noise_tokens: tuple[int, int] = (2, 5)
    indicative_tokens: tuple[int, int] = (1, 2)
    zipf_exponent: float = 1.0
    planted_bigrams: bool = False
    planted_rate: float = 0.3
    min_count: int = 1
    max_len: int = 64


@dataclass(frozen=True)
class EmbeddingsSection:
    dim: int = 300  # width of embeddings, LM layers, conversation and task layers
    window: int = 4
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    batch_size: int = 256


@dataclass(frozen=True)
class LMSection:
    n_layers: int = 3
    batch_size: int = 32
    seq_len: int = 32
    epochs: int = 10
    lr: float = 1e-3
    emb_dropout: float = 0.2
    out_dropout: float = 0.1
    patience: int | None = 3
    finetune_lr_scale: float = 0.1
    finetune_epochs: int = 5
    finetune_stop_ratio: float = 1.05


@dataclass(frozen=True)
class ConvSection:
    n_layers: int = 2
    dropout: float = 0.05
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    patience: int | None = 3


@dataclass(frozen=True)
class ClassifierSection:
    att_dim: int = 500
    task_layers: int = 2
    task_dropout: float = 0.05
    epochs: int = 30
    patience: int | None = 3
    lr: float = 1e-3
    batch_size: int = 32
    unfreeze_period: int = 2
    ablation: str = "4"
    cnn_widths: tuple[int, ...] = tuple(range(1, 11))
    cnn_filters: int = 30


@dataclass(frozen=True)
class EvalSection:
    threshold: float = 0.5
    split: str = "test"
    top_k: int = 100
    max_n: int = 5
    use_gold: bool = True
    seeds: tuple[int, ...] = (1, 2, 3)
    rows: tuple[str, ...] = tuple(ABLATION_ROWS)
    baselines: tuple[str, ...] = VARIANTS


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    precision: str = "f64"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    embeddings: EmbeddingsSection = field(default_factory=EmbeddingsSection)
    lm: LMSection = field(default_factory=LMSection)
    conv: ConvSection = field(default_factory=ConvSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        validate(self)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def replace(self, **overrides) -> "PipelineConfig":
        """Copy with top-level fields or ``section__key`` entries replaced."""
        data = self.to_dict()
        for key, value in overrides.items():
            if "__" in key:
                sec, sub = key.split("__", 1)
                if sec not in data or not isinstance(data[sec], dict):
                    raise ConfigError(f"unknown config section {sec!r}")
                data[sec][sub] = value
            else:
                data[key] = value
        return from_dict(data)


def _to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    # dataclass fields hold str annotations under postponed evaluation
    if isinstance(tp, str) and tp.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(value)
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = SECTIONS.get(name) if cls is PipelineConfig else None
        kwargs[name] = _build(sub, value, name) if sub else _coerce(f.type, value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


SECTIONS = {"corpus": CorpusSection, "embeddings": EmbeddingsSection, "lm": LMSection,
            "conv": ConvSection, "classifier": ClassifierSection, "eval": EvalSection}


def from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json(), encoding="utf-8")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def validate(cfg: PipelineConfig) -> None:
    _require(cfg.precision in ("f32", "f64"), f"precision must be f32 or f64, got {cfg.precision!r}")
    c = cfg.corpus
    _require(len(c.split) == 3 and all(r >= 0 for r in c.split) and abs(sum(c.split) - 1.0) < 1e-9,
             f"corpus.split must be 3 non-negative ratios summing to 1, got {c.split}")
    _require(len(c.label_mix) == len(LABELS), "corpus.label_mix needs 5 values")
    _require(0.0 < c.labeled_fraction <= 1.0, "corpus.labeled_fraction must lie in (0, 1]")
    _require(c.n_dialogues > 0, "corpus.n_dialogues must be positive")
    _require(c.max_len >= 3, "corpus.max_len must be >= 3")
    _require(cfg.embeddings.dim > 0, "embeddings.dim must be positive")
    for name, rate in (("lm.emb_dropout", cfg.lm.emb_dropout), ("lm.out_dropout", cfg.lm.out_dropout),
                       ("conv.dropout", cfg.conv.dropout), ("classifier.task_dropout", cfg.classifier.task_dropout)):
        _require(0.0 <= rate < 1.0, f"{name} must lie in [0, 1)")
    cl = cfg.classifier
    _require(cl.ablation in ABLATION_ROWS, f"classifier.ablation must be one of {list(ABLATION_ROWS)}")
    _require(cl.unfreeze_period >= 1, "classifier.unfreeze_period must be >= 1")
    e = cfg.eval
    _require(0.0 < e.threshold < 1.0, "eval.threshold must lie in (0, 1)")
    _require(e.split in ("train", "valid", "test"), "eval.split must be train, valid or test")
    _require(all(r in ABLATION_ROWS for r in e.rows), f"eval.rows must be drawn from {list(ABLATION_ROWS)}")
    _require(all(b in VARIANTS for b in e.baselines), f"eval.baselines must be drawn from {list(VARIANTS)}")
    _require(1 <= e.max_n, "eval.max_n must be >= 1")


def benchmark_config(**overrides) -> PipelineConfig:
    """Reduced-width preset that runs the synthetic benchmark on one CPU core."""
    base = PipelineConfig(
        embeddings=EmbeddingsSection(dim=32, epochs=5),
        lm=LMSection(epochs=8, finetune_epochs=3),
        conv=ConvSection(epochs=6),
        classifier=ClassifierSection(att_dim=32, epochs=25, patience=5, cnn_filters=8),
    )
    return base.replace(**overrides) if overrides else base
