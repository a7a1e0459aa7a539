"""Ablation rows and baselines trained over several seeds, with the ordering checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .classifier import ABLATION_ROWS, evaluate
from .config import PipelineConfig
from .evaluation import MetricsReport, format_metrics_table
from .pipeline import Dataset, Pretrained, train_classifier_stage


@dataclass
class AblationResult:
    reports: dict[tuple[str, int], MetricsReport] = field(default_factory=dict)
    logs: dict[tuple[str, int], list[dict]] = field(default_factory=dict)

    def macro_f1(self, name: str, seed: int) -> float:
        return self.reports[(name, seed)].macro_f1

    @property
    def seeds(self) -> list[int]:
        return sorted({s for _, s in self.reports})

    @property
    def names(self) -> list[str]:
        return list(dict.fromkeys(n for n, _ in self.reports))


def model_name(row: str | None = None, baseline: str | None = None) -> str:
    return f"row {row}" if baseline is None else baseline


def run_ablation_suite(cfg: PipelineConfig, ds: Dataset, pre: Pretrained, seeds: Sequence[int],
                       rows: Sequence[str] = tuple(ABLATION_ROWS), baselines: Sequence[str] = (),
                       split: str = "test", progress: Callable[[str], None] | None = None) -> AblationResult:
    """Train and evaluate every row and baseline once per seed.

    The dataset and the pre-trained artifacts are shared by all runs; a
    seed fixes the classifier initialization, dropout and the batch order,
    so all models see the same data order for a given seed.
    """
    out = AblationResult()
    for seed in seeds:
        jobs = [(r, None) for r in rows] + [(None, b) for b in baselines]
        for row, base in jobs:
            name = model_name(row, base)
            model, state = train_classifier_stage(cfg, ds, pre, seed, row=row, baseline=base)
            report, _ = evaluate(model, ds.triples(split), ds.vocab, cfg.eval.threshold, cfg.corpus.max_len)
            out.reports[(name, seed)] = report
            out.logs[(name, seed)] = state.log
            if progress is not None:
                progress(f"{name}\tseed {seed}\tmacro-F1 {report.macro_f1:.4f}\tepochs {state.epoch}")
    return out


@dataclass(frozen=True)
class OrderingCheck:
    description: str
    holds: tuple[bool, ...]  # per seed
    required: int

    @property
    def passed(self) -> bool:
        return sum(self.holds) >= self.required

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.description}\t{sum(self.holds)}/{len(self.holds)} seeds (need {self.required})"


def ordering_checks(result: AblationResult, required: int | None = None) -> list[OrderingCheck]:
    """row1 < row2 < row3, and row 4 >= the Seq2Seq baseline, counted over seeds."""
    seeds = result.seeds
    need = required if required is not None else (2 * len(seeds) + 2) // 3
    checks = []
    names = set(result.names)
    if {"row 1", "row 2", "row 3"} <= names:
        holds = tuple(result.macro_f1("row 1", s) < result.macro_f1("row 2", s) < result.macro_f1("row 3", s)
                      for s in seeds)
        checks.append(OrderingCheck("macro-F1 row 1 < row 2 < row 3", holds, need))
    if {"row 4", "Seq2Seq"} <= names:
        holds = tuple(result.macro_f1("row 4", s) >= result.macro_f1("Seq2Seq", s) for s in seeds)
        checks.append(OrderingCheck("macro-F1 row 4 >= Seq2Seq baseline", holds, need))
    return checks


def format_ablation_table(result: AblationResult) -> str:
    """Per-seed rows followed by seed means, in the metrics-table layout."""
    rows = []
    for name in result.names:
        for s in result.seeds:
            if (name, s) in result.reports:
                rows.append((f"{name} (seed {s})", result.reports[(name, s)]))
    for name in result.names:
        reps = [result.reports[(name, s)] for s in result.seeds if (name, s) in result.reports]
        rows.append((f"{name} (mean)", _mean_report(reps)))
    return format_metrics_table(rows)


def _mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    def avg(attr):
        return tuple(np.mean([getattr(r, attr) for r in reports], axis=0).tolist())

    return MetricsReport(avg("precision"), avg("recall"), avg("f1"),
                         float(np.mean([r.macro_precision for r in reports])),
                         float(np.mean([r.macro_recall for r in reports])),
                         float(np.mean([r.macro_f1 for r in reports])))
