"""Multi-label metrics and attention-based key-phrase ranking."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import LABELS

SPECIAL_ROLE = "special"
# key-phrase role -> attention-record role of the positions it reads
ROLE_POSITIONS = {"counselor": "counselor", "client": "target"}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def per_class_prf(pred, gold) -> tuple[ConfusionCounts, np.ndarray, np.ndarray, np.ndarray]:
    """Confusion counts and per-class precision/recall/F1; 0/0 is taken as 0."""
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    if pred.shape != gold.shape:
        raise ValueError(f"prediction/gold shape mismatch: {pred.shape} vs {gold.shape}")
    if pred.ndim != 2 or pred.shape[1] != len(LABELS):
        raise ValueError(f"expected [N, {len(LABELS)}] multi-hot arrays, got {pred.shape}")
    counts = ConfusionCounts(
        tp=(pred & gold).sum(axis=0), fp=(pred & ~gold).sum(axis=0),
        fn=(~pred & gold).sum(axis=0), tn=(~pred & ~gold).sum(axis=0),
    )
    p = _safe_div(counts.tp, counts.tp + counts.fp)
    r = _safe_div(counts.tp, counts.tp + counts.fn)
    f1 = _safe_div(2 * p * r, p + r)
    return counts, p, r, f1


def macro_metrics(precision, recall, f1) -> tuple[float, float, float]:
    """Unweighted means; macro-F1 is the mean of per-class F1, not F1 of the means."""
    return float(np.mean(precision)), float(np.mean(recall)), float(np.mean(f1))


@dataclass(frozen=True)
class MetricsReport:
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    counts: ConfusionCounts | None = None

    @classmethod
    def from_predictions(cls, pred, gold) -> "MetricsReport":
        counts, p, r, f1 = per_class_prf(pred, gold)
        mp, mr, mf = macro_metrics(p, r, f1)
        return cls(tuple(p.tolist()), tuple(r.tolist()), tuple(f1.tolist()), mp, mr, mf, counts)

    COLUMNS = tuple(f"{lab} F1" for lab in LABELS) + ("Macro Prec", "Macro Rec", "Macro F1")

    def row(self) -> list[float]:
        return list(self.f1) + [self.macro_precision, self.macro_recall, self.macro_f1]

    def to_record(self) -> dict:
        rec = {
            "per_class": {lab: {"precision": self.precision[i], "recall": self.recall[i], "f1": self.f1[i]}
                          for i, lab in enumerate(LABELS)},
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }
        if self.counts is not None:
            rec["counts"] = {k: getattr(self.counts, k).tolist() for k in ("tp", "fp", "fn", "tn")}
        return rec


def format_metrics_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Tab-separated table in the per-class F1 + macro P/R/F1 layout."""
    lines = ["\t".join(("Model",) + MetricsReport.COLUMNS)]
    for name, rep in rows:
        lines.append("\t".join([name] + [f"{v:.3f}" for v in rep.row()]))
    return "\n".join(lines) + "\n"


# -- relative importance -------------------------------------------------------------------

def relative_importance(attention, n: int) -> np.ndarray:
    """Importance of every contiguous n-gram relative to uniform attention.

    ``r = (prod(a[i:i+n]) - (1/N)**n) / (1/N)**n``; uniform attention gives
    exactly 0 and the minimum possible value is -1.
    """
    a = np.asarray(attention, dtype=np.float64)
    big_n = a.shape[0]
    if a.ndim != 1 or big_n < 2:
        raise ValueError("attention must be a vector with N >= 2 entries")
    if not 1 <= n < big_n:
        raise ValueError(f"n-gram length must satisfy 1 <= n < N (n={n}, N={big_n})")
    if (a < 0).any() or abs(a.sum() - 1.0) > 1e-9:
        raise ValueError("attention must be non-negative and sum to 1")
    windows = np.lib.stride_tricks.sliding_window_view(a, n)
    prods = np.prod(windows, axis=-1)
    # same reduction as the window products, so uniform input cancels exactly
    expected = np.prod(np.full(n, 1.0 / big_n))
    return (prods - expected) / expected


@dataclass(frozen=True)
class KeyPhrase:
    tokens: tuple[str, ...]
    r: float
    role: str
    category: str
    count: int = 1

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def extract_key_phrases(records: Iterable[dict], category: str, role: str, n_range=range(1, 6),
                        top_k: int = 100, use_gold: bool = True) -> list[KeyPhrase]:
    """Rank n-grams of ``role`` utterances by relative importance for ``category``.

    ``records`` are prediction records (see ``classifier.predict``) with
    ``gold`` / ``labels`` name lists and an ``attention`` list of
    ``{token, weight, role}`` entries.  Attention is restricted to the
    role's content positions and renormalized before scoring; phrases are
    pooled over all qualifying utterances keeping each phrase's max r.
    """
    if category not in LABELS:
        raise ValueError(f"unknown category {category!r}")
    if role not in ROLE_POSITIONS:
        raise ValueError(f"unknown role {role!r}")
    want = ROLE_POSITIONS[role]
    best: dict[tuple[str, ...], float] = {}
    seen: dict[tuple[str, ...], int] = {}
    for rec in records:
        labels = rec["gold"] if use_gold else rec["labels"]
        if category not in labels:
            continue
        pos = [e for e in rec["attention"] if e["role"] == want]
        big_n = len(pos)
        if big_n < 2:
            continue
        w = np.array([e["weight"] for e in pos], dtype=np.float64)
        total = w.sum()
        if total <= 0:
            continue
        w = w / total
        toks = [e["token"] for e in pos]
        for n in n_range:
            if n >= big_n:
                break
            rs = relative_importance(w, n)
            for i, r in enumerate(rs):
                key = tuple(toks[i:i + n])
                seen[key] = seen.get(key, 0) + 1
                if key not in best or r > best[key]:
                    best[key] = float(r)
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], -len(kv[0]), kv[0]))
    return [KeyPhrase(k, r, role, category, seen[k]) for k, r in ranked[:top_k]]


def key_phrase_report(records: Sequence[dict], top_k: int = 100, n_range=range(1, 6),
                      use_gold: bool = True) -> dict:
    """All categories x both roles, each a ranked list of {phrase, r, count}."""
    out = {}
    for cat in LABELS:
        out[cat] = {}
        for role in ("counselor", "client"):
            phrases = extract_key_phrases(records, cat, role, n_range, top_k, use_gold)
            out[cat][role] = [{"phrase": p.text, "r": p.r, "count": p.count} for p in phrases]
    return out


def format_key_phrase_report(report: dict) -> str:
    lines = []
    for cat in LABELS:
        for role in ("counselor", "client"):
            lines.append(f"## {cat} / {role}")
            for rank, item in enumerate(report[cat][role], 1):
                lines.append(f"{rank}\t{item['phrase']}\t{item['r']:.4f}\t{item['count']}")
            lines.append("")
    return "\n".join(lines)


def dump_records(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
