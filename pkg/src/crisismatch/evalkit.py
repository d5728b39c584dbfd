"""Metrics, multi-seed aggregation, labeled-count sweeps, and OOD transfer.

Accuracy and macro-F1 are reported as percentages; per-class precision,
recall, and F1 stay as fractions. Macro-F1 averages per-class F1 with the
zero-division convention F1 = 0 for classes never predicted and absent,
which is what drags macro-F1 under accuracy in few-shot runs. Aggregation
uses the population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import DataError, few_shot_sample
from .textprep import encode_dynamic, tokenize


def confusion_matrix(gold, pred, num_classes: int) -> np.ndarray:
    """Counts with rows = gold class, columns = predicted class."""
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape or gold.ndim != 1:
        raise ValueError("gold/pred must be 1-d arrays of equal length")
    if gold.size == 0:
        raise ValueError("cannot score an empty evaluation set")
    for name, arr in (("gold", gold), ("pred", pred)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gold, pred), 1)
    return cm


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float  # percent
    macro_f1: float  # percent
    per_class: dict  # label -> {precision, recall, f1} as fractions
    n_eval: int

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": self.per_class,
            "n_eval": self.n_eval,
        }


def report_from_confusion(cm: np.ndarray, labels: list[str]) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (len(labels), len(labels)):
        raise ValueError("confusion matrix shape does not match the label list")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("cannot score an empty evaluation set")
    per_class = {}
    f1s = []
    for k, name in enumerate(labels):
        tp = float(cm[k, k])
        gold_k = float(cm[k, :].sum())
        pred_k = float(cm[:, k].sum())
        precision = tp / pred_k if pred_k > 0 else 0.0
        recall = tp / gold_k if gold_k > 0 else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class[name] = {"precision": precision, "recall": recall, "f1": f1}
        f1s.append(f1)
    accuracy = 100.0 * float(np.trace(cm)) / total
    macro_f1 = 100.0 * float(np.mean(f1s))
    return MetricsReport(accuracy, macro_f1, per_class, total)


def evaluate_model(model, vocab, labels: list[str], examples, max_seq_len: int, chunk: int = 256) -> MetricsReport:
    """Score a model on a labeled split."""
    if not examples:
        raise DataError("evaluation split is empty")
    label_to_idx = {name: i for i, name in enumerate(labels)}
    gold = []
    for ex in examples:
        if ex.label not in label_to_idx:
            raise DataError(f"example '{ex.id}' has label outside the schema")
        gold.append(label_to_idx[ex.label])
    token_lists = [tokenize(ex.text) for ex in examples]
    preds = []
    for start in range(0, len(token_lists), chunk):
        ids, lengths = encode_dynamic(vocab, token_lists[start : start + chunk], max_seq_len)
        preds.extend(model.predict(ids, lengths).tolist())
    cm = confusion_matrix(np.array(gold), np.array(preds), len(labels))
    return report_from_confusion(cm, labels)


# ---------------------------------------------------------------------------
# Aggregation across seeds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregateStats:
    per_seed: tuple
    mean: float
    std: float  # population

    def formatted(self) -> str:
        return f"{self.mean:.1f} ± {self.std:.1f}"


@dataclass(frozen=True)
class AggregateReport:
    seeds: tuple
    accuracy: AggregateStats
    macro_f1: AggregateStats
    reports: tuple

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "seeds": list(self.seeds),
            "accuracy": {
                "per_seed": list(self.accuracy.per_seed),
                "mean": self.accuracy.mean,
                "std": self.accuracy.std,
                "formatted": self.accuracy.formatted(),
            },
            "macro_f1": {
                "per_seed": list(self.macro_f1.per_seed),
                "mean": self.macro_f1.mean,
                "std": self.macro_f1.std,
                "formatted": self.macro_f1.formatted(),
            },
            "per_seed_reports": [r.to_dict() for r in self.reports],
        }


def _stats(values) -> AggregateStats:
    arr = np.asarray(values, dtype=np.float64)
    return AggregateStats(tuple(float(v) for v in arr), float(arr.mean()), float(arr.std()))


def aggregate_reports(seeds, reports) -> AggregateReport:
    if not reports:
        raise ValueError("need at least one report to aggregate")
    if len(tuple(seeds)) != len(tuple(reports)):
        raise ValueError("one report per seed required")
    return AggregateReport(
        tuple(seeds),
        _stats([r.accuracy for r in reports]),
        _stats([r.macro_f1 for r in reports]),
        tuple(reports),
    )


def render_table(headers, rows) -> str:
    """Plain aligned text table."""
    cells = [list(map(str, headers))] + [list(map(str, r)) for r in rows]
    if any(len(row) != len(cells[0]) for row in cells):
        raise ValueError("all rows must match the header width")
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Experiment orchestration
# ---------------------------------------------------------------------------

SWEEP_DROP_TOLERANCE = 2.0  # points of mean accuracy


def run_variant(train_pool, dev, test, schema, lexicon, config, seeds, shots: int):
    """Train one variant across seeds, resampling the few-shot view per seed,
    and aggregate the test reports."""
    from .trainer import train

    reports = []
    for seed in seeds:
        view = few_shot_sample(train_pool, schema, shots, seed)
        result = train(view, dev, test, schema, lexicon, config, seed)
        reports.append(result.test_report)
    return aggregate_reports(seeds, reports)


def sweep_labeled_counts(train_pool, dev, test, schema, lexicon, base_config, variants, counts, seeds):
    """Grid over (variant, labeled count): fresh few-shot view per cell/seed.

    Returns (cells, warnings); a warning flags any variant whose mean
    accuracy drops by more than 2 points between consecutive counts.
    """
    from dataclasses import replace

    cells = []
    for variant in variants:
        config = replace(base_config, variant=variant)
        for count in counts:
            agg = run_variant(train_pool, dev, test, schema, lexicon, config, seeds, count)
            cells.append({"variant": variant, "count": count, "aggregate": agg})
    return cells, sweep_drop_warnings(cells)


def sweep_drop_warnings(cells) -> list:
    """Flag variants whose mean accuracy falls with more labeled data."""
    warnings = []
    for variant in dict.fromkeys(c["variant"] for c in cells):
        series = [(c["count"], c["aggregate"].accuracy.mean) for c in cells if c["variant"] == variant]
        series.sort()
        for (c1, a1), (c2, a2) in zip(series, series[1:]):
            if a2 < a1 - SWEEP_DROP_TOLERANCE:
                warnings.append(
                    f"{variant}: mean accuracy drops {a1:.1f} -> {a2:.1f} from {c1} to {c2} labeled per class"
                )
    return warnings


def evaluate_out_of_domain(source_train, source_dev, target_test, schema, lexicon, config, seeds, shots: int):
    """Train on the source domain, score the selected checkpoint on the
    target domain's test split. Source and target must share the schema."""
    for ex in target_test:
        if ex.label not in schema:
            raise DataError(f"target example '{ex.id}' has label '{ex.label}' outside the shared schema")
    return run_variant(source_train, source_dev, target_test, schema, lexicon, config, seeds, shots)
