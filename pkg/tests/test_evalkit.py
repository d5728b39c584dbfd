"""Metrics, aggregation and formatting, table rendering, variant runners."""

import numpy as np
import pytest

from crisismatch.dataio import DataError, Example
from crisismatch.evalkit import (
    AggregateStats,
    MetricsReport,
    aggregate_reports,
    confusion_matrix,
    evaluate_model,
    render_table,
    report_from_confusion,
)
from crisismatch.model import build_model
from crisismatch.textprep import Vocab


def test_confusion_matrix_layout():
    gold = np.array([0, 0, 1, 2, 2, 2])
    pred = np.array([0, 1, 1, 2, 2, 0])
    cm = confusion_matrix(gold, pred, 3)
    assert cm[0, 0] == 1 and cm[0, 1] == 1  # rows are gold classes
    assert cm[2, 2] == 2 and cm[2, 0] == 1
    assert cm.sum() == 6


def test_confusion_matrix_rejects_out_of_range():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([3]), np.array([0]), 3)


def test_report_known_values():
    # one class never predicted: its precision and f1 fall to 0 by rule
    cm = np.array([[2, 0], [1, 0]])
    report = report_from_confusion(cm, ["a", "b"])
    assert report.accuracy == pytest.approx(100 * 2 / 3)
    a, b = report.per_class["a"], report.per_class["b"]
    assert a["precision"] == pytest.approx(2 / 3)
    assert a["recall"] == 1.0
    assert b["precision"] == 0.0 and b["recall"] == 0.0 and b["f1"] == 0.0
    assert report.macro_f1 == pytest.approx(100 * (0.8 + 0.0) / 2)


def test_report_matches_brute_force_loops():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c = int(rng.integers(2, 6))
        cm = rng.integers(0, 9, size=(c, c))
        if cm.sum() == 0:
            continue
        report = report_from_confusion(cm, [f"k{i}" for i in range(c)])
        f1s = []
        for k in range(c):
            tp = cm[k, k]
            prec = tp / cm[:, k].sum() if cm[:, k].sum() else 0.0
            rec = tp / cm[k].sum() if cm[k].sum() else 0.0
            f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
            f1s.append(f1)
            got = report.per_class[f"k{k}"]
            assert got["precision"] == pytest.approx(prec, abs=1e-12)
            assert got["recall"] == pytest.approx(rec, abs=1e-12)
            assert got["f1"] == pytest.approx(f1, abs=1e-12)
        assert report.macro_f1 == pytest.approx(100 * np.mean(f1s), abs=1e-9)
        assert report.accuracy == pytest.approx(100 * np.trace(cm) / cm.sum(), abs=1e-9)


def test_metrics_report_dict_shape():
    cm = np.array([[1, 0], [0, 1]])
    d = report_from_confusion(cm, ["a", "b"]).to_dict()
    assert d["format"] == 1
    assert d["accuracy"] == 100.0
    assert set(d["per_class"]) == {"a", "b"}


def test_evaluate_model_scores_synthetic_text():
    vocab = Vocab.build([["x", "y"]])
    model = build_model(vocab, 2, 4, 1, seed=0)
    examples = [Example(f"e{i}", "x y", "a" if i % 2 else "b") for i in range(10)]
    report = evaluate_model(model, vocab, ["a", "b"], examples, max_seq_len=8)
    assert report.n_eval == 10
    assert 0.0 <= report.accuracy <= 100.0


def test_evaluate_model_rejects_empty_and_unknown():
    vocab = Vocab.build([["x"]])
    model = build_model(vocab, 2, 4, 1, seed=0)
    with pytest.raises(DataError):
        evaluate_model(model, vocab, ["a", "b"], [], max_seq_len=8)
    with pytest.raises(DataError):
        evaluate_model(model, vocab, ["a", "b"], [Example("e", "x", "zzz")], max_seq_len=8)


def test_evaluate_model_chunking_invariant():
    rng = np.random.default_rng(1)
    vocab = Vocab.build([[f"w{i}" for i in range(20)]])
    model = build_model(vocab, 2, 4, 1, seed=0)
    examples = [
        Example(f"e{i}", " ".join(f"w{j}" for j in rng.integers(0, 20, size=rng.integers(1, 9))), "a")
        for i in range(7)
    ]
    full = evaluate_model(model, vocab, ["a", "b"], examples, max_seq_len=8, chunk=256)
    small = evaluate_model(model, vocab, ["a", "b"], examples, max_seq_len=8, chunk=2)
    assert full.accuracy == small.accuracy
    assert full.per_class == small.per_class


def _fake_report(acc):
    return MetricsReport(accuracy=acc, macro_f1=acc, per_class={}, n_eval=1)


def test_aggregate_population_std_and_formatting():
    agg = aggregate_reports([0, 1, 2], [_fake_report(a) for a in (60.0, 62.0, 64.0)])
    assert agg.accuracy.mean == pytest.approx(62.0)
    assert agg.accuracy.std == pytest.approx(np.sqrt(8 / 3))
    assert agg.accuracy.formatted() == "62.0 ± 1.6"


def test_aggregate_single_seed_has_zero_std():
    agg = aggregate_reports([5], [_fake_report(77.7)])
    assert agg.accuracy.formatted() == "77.7 ± 0.0"


def test_aggregate_to_dict_round_trip_fields():
    agg = aggregate_reports([0, 1], [_fake_report(50.0), _fake_report(70.0)])
    d = agg.to_dict()
    assert d["seeds"] == [0, 1]
    assert d["accuracy"]["mean"] == 60.0
    assert d["accuracy"]["per_seed"] == [50.0, 70.0]


def test_aggregate_requires_matching_lengths():
    with pytest.raises(ValueError):
        aggregate_reports([0, 1], [_fake_report(1.0)])


def test_render_table_alignment():
    text = render_table(("name", "value"), [("a", "1.0"), ("longer", "2.5")])
    lines = text.splitlines()
    assert lines[0].startswith("name")
    assert set(lines[1]) <= {"-", " "}
    assert all(len(line) <= len(lines[1]) for line in lines)
    assert lines[3].startswith("longer")


def test_render_table_rejects_ragged_rows():
    with pytest.raises(ValueError):
        render_table(("a", "b"), [("only",)])


def test_macro_f1_invariant_under_relabeling():
    rng = np.random.default_rng(7)
    labels = ["a", "b", "c", "d"]
    for _ in range(25):
        cm = rng.integers(0, 30, size=(4, 4))
        base = report_from_confusion(cm, labels)
        perm = rng.permutation(4)
        permuted = report_from_confusion(cm[np.ix_(perm, perm)], [labels[i] for i in perm])
        assert permuted.macro_f1 == pytest.approx(base.macro_f1, abs=1e-12)
        assert permuted.accuracy == pytest.approx(base.accuracy, abs=1e-12)


def test_diagonal_confusion_scores_perfect():
    cm = np.diag([3, 17, 1])
    report = report_from_confusion(cm, ["a", "b", "c"])
    assert report.accuracy == 100.0
    assert report.macro_f1 == 100.0


class _FakeAgg:
    def __init__(self, mean):
        self.accuracy = AggregateStats((mean,), mean, 0.0)


def _sweep_cells(variant, pairs):
    return [{"variant": variant, "count": c, "aggregate": _FakeAgg(a)} for c, a in pairs]


def test_sweep_drop_warning_fires_past_tolerance():
    from crisismatch.evalkit import sweep_drop_warnings

    cells = _sweep_cells("supervised", [(5, 80.0), (20, 77.9), (50, 90.0)])
    warnings = sweep_drop_warnings(cells)
    assert len(warnings) == 1
    assert "80.0 -> 77.9" in warnings[0]
    assert "5 to 20" in warnings[0]


def test_sweep_drop_within_tolerance_is_silent():
    from crisismatch.evalkit import sweep_drop_warnings

    cells = _sweep_cells("supervised", [(5, 80.0), (20, 78.1), (50, 90.0)])
    assert sweep_drop_warnings(cells) == []
