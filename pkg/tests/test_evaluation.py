import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from convmfit.corpus import LABELS
from convmfit.evaluation import (
    MetricsReport,
    extract_key_phrases,
    format_key_phrase_report,
    format_metrics_table,
    key_phrase_report,
    macro_metrics,
    per_class_prf,
    relative_importance,
)


def _brute_counts(pred, gold):
    tp = np.zeros(5, int)
    fp = np.zeros(5, int)
    fn = np.zeros(5, int)
    tn = np.zeros(5, int)
    for p_row, g_row in zip(pred.tolist(), gold.tolist()):
        for k in range(5):
            if p_row[k] and g_row[k]:
                tp[k] += 1
            elif p_row[k]:
                fp[k] += 1
            elif g_row[k]:
                fn[k] += 1
            else:
                tn[k] += 1
    return tp, fp, fn, tn


def test_prf_closed_form():
    pred = np.zeros((2, 5), int)
    gold = np.zeros((2, 5), int)
    pred[:, 0] = 1
    gold[0, 0] = 1
    _, p, r, f1 = per_class_prf(pred, gold)
    assert p[0] == 0.5 and r[0] == 1.0 and abs(f1[0] - 2 / 3) < 1e-15


def test_prf_zero_convention():
    gold = np.ones((3, 5), int)
    _, p, r, f1 = per_class_prf(np.zeros((3, 5), int), gold)
    assert not p.any() and not r.any() and not f1.any()


def test_prf_shape_errors():
    with pytest.raises(ValueError):
        per_class_prf(np.zeros((2, 5)), np.zeros((3, 5)))
    with pytest.raises(ValueError):
        per_class_prf(np.zeros((2, 4)), np.zeros((2, 4)))


def test_counts_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n = int(rng.integers(1, 30))
        pred = rng.random((n, 5)) < 0.4
        gold = rng.random((n, 5)) < 0.4
        counts, *_ = per_class_prf(pred, gold)
        for got, want in zip((counts.tp, counts.fp, counts.fn, counts.tn), _brute_counts(pred, gold)):
            assert np.array_equal(got, want)
        assert np.all(counts.total == n)


def test_macro_examples():
    f1 = (0.441, 0.761, 0.726, 0.447, 0.835)
    assert round(macro_metrics(f1, f1, f1)[2], 3) == 0.642
    assert macro_metrics([0.3] * 5, [0.3] * 5, [0.3] * 5) == pytest.approx((0.3, 0.3, 0.3), abs=1e-15)
    assert macro_metrics([0] * 5, [0] * 5, [0, 0, 0, 0, 1])[2] == 0.2


def test_macro_f1_is_not_f1_of_means():
    pred = np.array([[1, 0, 0, 0, 0], [1, 0, 0, 0, 0], [0, 1, 0, 0, 0]])
    gold = np.array([[1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 1, 0, 0, 0]])
    rep = MetricsReport.from_predictions(pred, gold)
    assert rep.macro_f1 == pytest.approx(np.mean(rep.f1), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.bool_, st.tuples(st.integers(1, 12), st.just(5))))
def test_perfect_predictions_score_one(gold):
    gold = gold.copy()
    gold[0] = True  # every class has a positive
    rep = MetricsReport.from_predictions(gold, gold)
    assert rep.macro_f1 == rep.macro_precision == rep.macro_recall == 1.0


def test_correcting_a_prediction_never_lowers_macro_f1():
    rng = np.random.default_rng(1)
    for _ in range(300):
        n = int(rng.integers(1, 5))
        gold = rng.random((n, 5)) < 0.5
        pred = rng.random((n, 5)) < 0.5
        base = MetricsReport.from_predictions(pred, gold).macro_f1
        for i, k in itertools.product(range(n), range(5)):
            if pred[i, k] != gold[i, k]:
                fixed = pred.copy()
                fixed[i, k] = gold[i, k]
                assert MetricsReport.from_predictions(fixed, gold).macro_f1 >= base - 1e-15


def test_report_record_and_table():
    rep = MetricsReport.from_predictions(np.eye(5, dtype=int), np.eye(5, dtype=int))
    rec = rep.to_record()
    assert rec["per_class"]["Fact"]["f1"] == 1.0 and rec["counts"]["tp"] == [1] * 5
    table = format_metrics_table([("m", rep)])
    header, row = table.strip().split("\n")
    assert header.split("\t")[-1] == "Macro F1"
    assert row.split("\t") == ["m"] + ["1.000"] * 8


# -- relative importance ------------------------------------------------------------------

def test_relative_importance_examples():
    assert np.allclose(relative_importance([0.75, 0.25], 1), [0.5, -0.5], atol=1e-15)
    assert relative_importance([0.4, 0.3, 0.2, 0.1], 2)[0] == pytest.approx(0.92, abs=1e-12)
    for big_n in (2, 3, 7, 10):
        for n in range(1, big_n):
            assert np.all(relative_importance(np.full(big_n, 1.0 / big_n), n) == 0.0)


def test_relative_importance_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        big_n = int(rng.integers(2, 15))
        n = int(rng.integers(1, big_n))
        a = rng.dirichlet(np.ones(big_n))
        want = [(np.prod(a[i:i + n]) - (1 / big_n) ** n) / (1 / big_n) ** n for i in range(big_n - n + 1)]
        assert np.allclose(relative_importance(a, n), want, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.data())
def test_relative_importance_lower_bound(big_n, data):
    w = data.draw(hnp.arrays(np.float64, big_n, elements=st.floats(0, 1)))
    if w.sum() == 0:
        w[0] = 1.0
    n = data.draw(st.integers(1, big_n - 1))
    assert relative_importance(w / w.sum(), n).min() >= -1.0


def test_relative_importance_errors():
    with pytest.raises(ValueError):
        relative_importance([0.5, 0.5], 2)
    with pytest.raises(ValueError):
        relative_importance([0.5, 0.6], 1)
    with pytest.raises(ValueError):
        relative_importance([1.0], 1)


# -- key phrases ---------------------------------------------------------------------------

def _record(tokens, weights, roles, gold, labels=None):
    return {"gold": gold, "labels": labels if labels is not None else gold,
            "attention": [{"token": t, "weight": w, "role": r} for t, w, r in zip(tokens, weights, roles)]}


def test_uniform_attention_ties_broken_by_length_then_text():
    rec = _record(["<bos>", "b", "a", "c", "<eos>"], [0.1, 0.2, 0.2, 0.2, 0.3],
                  ["special", "target", "target", "target", "special"], ["Fact"])
    out = extract_key_phrases([rec], "Fact", "client")
    assert all(p.r == pytest.approx(0.0, abs=1e-12) for p in out)
    assert [p.text for p in out] == ["a c", "b a", "a", "b", "c"]
    assert all("<" not in p.text for p in out)


def test_role_restriction_and_renormalization():
    rec = _record(["q", "w", "x", "y"], [0.3, 0.1, 0.45, 0.15],
                  ["counselor", "counselor", "target", "target"], ["Anec"])
    out = {p.text: p.r for p in extract_key_phrases([rec], "Anec", "client")}
    # renormalized target attention (0.75, 0.25) over N=2
    assert out == pytest.approx({"x": 0.5, "y": -0.5})
    out = {p.text: p.r for p in extract_key_phrases([rec], "Anec", "counselor")}
    assert out == pytest.approx({"q": 0.5, "w": -0.5})


def test_empty_counselor_contributes_nothing():
    rec = _record(["<bos>", "<eos>", "x", "y"], [0.1, 0.1, 0.4, 0.4],
                  ["special", "special", "target", "target"], ["Prob"])
    assert extract_key_phrases([rec], "Prob", "counselor") == []


def test_gold_selects_records():
    rec = _record(["x", "y"], [0.9, 0.1], ["target", "target"], ["Fact"], labels=["Chan"])
    assert extract_key_phrases([rec], "Chan", "client") == []
    assert extract_key_phrases([rec], "Chan", "client", use_gold=False)[0].text == "x"


def test_pooling_keeps_max_and_counts():
    recs = [_record(["x", "y"], [0.9, 0.1], ["target"] * 2, ["Fact"]),
            _record(["x", "z"], [0.6, 0.4], ["target"] * 2, ["Fact"])]
    out = {p.text: p for p in extract_key_phrases(recs, "Fact", "client")}
    assert out["x"].r == pytest.approx(0.8) and out["x"].count == 2


def test_top_k_and_errors():
    rec = _record(list("abcdef"), [1 / 6] * 6, ["target"] * 6, ["Fact"])
    assert len(extract_key_phrases([rec], "Fact", "client", top_k=3)) == 3
    with pytest.raises(ValueError):
        extract_key_phrases([rec], "Nope", "client")
    with pytest.raises(ValueError):
        extract_key_phrases([rec], "Fact", "context")


def test_report_layout():
    rec = _record(["x", "y"], [0.9, 0.1], ["target"] * 2, ["Fact"])
    report = key_phrase_report([rec], top_k=5)
    assert set(report) == set(LABELS)
    assert report["Fact"]["client"][0] == {"phrase": "x", "r": pytest.approx(0.8), "count": 1}
    text = format_key_phrase_report(report)
    assert "## Fact / client" in text and "1\tx\t0.8000\t1" in text
