"""Training configs, the per-variant steps, and the full loop."""

import math
from dataclasses import replace

import numpy as np
import pytest

from crisismatch.dataio import few_shot_sample
from crisismatch.trainer import (
    TRACE_COLUMNS,
    VARIANTS,
    ConfigError,
    TrainConfig,
    train,
    write_trace_csv,
)


def test_variant_registry():
    assert "crisismatch" in VARIANTS
    assert "supervised" in VARIANTS
    assert len(VARIANTS) == 6


def test_validate_rejects_unknown_variant():
    with pytest.raises(ConfigError, match="variant"):
        TrainConfig(variant="mystery").validate(4)


def test_validate_threshold_floor_depends_on_classes():
    TrainConfig(tau=0.4).validate(4)  # 0.3 > 1/4
    with pytest.raises(ConfigError, match="tau"):
        TrainConfig(tau=0.4).validate(2)


def test_validate_allows_saturating_threshold():
    # a threshold above 1 turns selection off; used by degeneracy checks
    TrainConfig(tau=1.01).validate(4)


def test_validate_rejects_bad_ranges():
    for bad in (
        {"batch_size": 0},
        {"unlabeled_ratio": 0},
        {"num_aug": 0},
        {"temperature": 0.0},
        {"alpha": 0.0},
        {"lr": 0.0},
        {"max_iters": -1},
        {"eval_every": 0},
        {"rampup_iters": 0},
        {"fixed_lambda": 1.4},
    ):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate(4)


def test_validate_needs_mix_sites_for_mixing_variants():
    with pytest.raises(ConfigError, match="mix"):
        TrainConfig(variant="textmixup", num_blocks=1).validate(4)
    TrainConfig(variant="psl", num_blocks=1).validate(4)  # psl never mixes


def test_resolved_ties_flags_to_variants():
    assert TrainConfig(variant="supervised").resolved().use_unlabeled is False
    assert TrainConfig(variant="textmixup").resolved().use_unlabeled is False
    assert TrainConfig(variant="crisismatch", use_consistency=False).resolved().num_aug == 1
    assert TrainConfig(variant="crisismatch", use_textmixup=False).resolved().fixed_lambda == 1.0


def test_default_mix_sites_are_deep_interior():
    assert TrainConfig(num_blocks=4).resolve_mix_layers() == (2, 3)
    assert TrainConfig(num_blocks=2).resolve_mix_layers() == (1,)
    assert TrainConfig(num_blocks=4, mix_layers=(1,)).resolve_mix_layers() == (1,)


def _quick(variant, tiny_task, tiny_view, seed=0, **kw):
    schema, _, dev, test, lexicon = tiny_task
    kw.setdefault("batch_size", 8)
    kw.setdefault("unlabeled_ratio", 2)
    kw.setdefault("embed_dim", 8)
    kw.setdefault("num_blocks", 2)
    kw.setdefault("max_iters", 30)
    kw.setdefault("eval_every", 10)
    kw.setdefault("rampup_iters", 10)
    cfg = TrainConfig(variant=variant, **kw)
    return train(tiny_view, dev, test, schema, lexicon, cfg, seed)


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_trains_and_reports(variant, tiny_task, tiny_view):
    result = _quick(variant, tiny_task, tiny_view)
    assert len(result.trace) == 30
    assert all(math.isfinite(t.labeled_loss) for t in result.trace)
    assert 0.0 <= result.test_report.accuracy <= 100.0
    assert result.best_iter % 10 == 0


def test_train_is_deterministic(tiny_task, tiny_view):
    a = _quick("crisismatch", tiny_task, tiny_view)
    b = _quick("crisismatch", tiny_task, tiny_view)
    assert [t.labeled_loss for t in a.trace] == [t.labeled_loss for t in b.trace]
    assert [t.unlabeled_loss for t in a.trace] == [t.unlabeled_loss for t in b.trace]
    assert a.test_report.accuracy == b.test_report.accuracy
    for pa, pb in zip(a.model.params, b.model.params):
        assert np.array_equal(pa.value, pb.value)


def test_train_seed_changes_the_run(tiny_task, tiny_view):
    a = _quick("crisismatch", tiny_task, tiny_view, seed=0)
    b = _quick("crisismatch", tiny_task, tiny_view, seed=1)
    assert [t.labeled_loss for t in a.trace] != [t.labeled_loss for t in b.trace]


def test_supervised_never_touches_unlabeled_stats(tiny_task, tiny_view):
    result = _quick("supervised", tiny_task, tiny_view)
    assert all(t.unlabeled_loss == 0.0 for t in result.trace)
    assert all(t.acceptance_rate == 0.0 for t in result.trace)


def test_ramp_weight_recorded_in_trace(tiny_task, tiny_view):
    result = _quick("psl", tiny_task, tiny_view)
    assert result.trace[0].weight == 0.0
    assert result.trace[10].weight == pytest.approx(10.0)


def test_acceptance_rate_bounds(tiny_task, tiny_view):
    result = _quick("crisismatch", tiny_task, tiny_view, tau=0.34, max_iters=80)
    rates = [t.acceptance_rate for t in result.trace]
    assert all(0.0 <= r <= 1.0 for r in rates)
    assert any(r > 0.0 for r in rates)  # a near-floor threshold must admit something


def test_pseudo_precision_is_fraction_or_nan(tiny_task, tiny_view):
    result = _quick("crisismatch", tiny_task, tiny_view, tau=0.34, max_iters=80)
    for t in result.trace:
        assert math.isnan(t.pseudo_precision) or 0.0 <= t.pseudo_precision <= 1.0


def test_zero_iterations_reports_initial_model(tiny_task, tiny_view):
    result = _quick("crisismatch", tiny_task, tiny_view, max_iters=0)
    assert result.trace == []
    assert result.best_iter == 0
    assert result.test_report.n_eval > 0


def test_best_model_restored_for_test_report(tiny_task, tiny_view):
    """The returned params must be the best-dev snapshot, not the last step."""
    schema, _, dev, test, lexicon = tiny_task
    result = _quick("supervised", tiny_task, tiny_view, max_iters=40, eval_every=5)
    from crisismatch.evalkit import evaluate_model

    rescored = evaluate_model(result.model, result.vocab, schema, dev, 64)
    assert rescored.macro_f1 == pytest.approx(result.best_dev.macro_f1)


def test_saturated_threshold_collapses_psl_to_supervised(tiny_task, tiny_view):
    """tau > 1 admits nothing, so the psl run must equal supervised exactly."""
    sup = _quick("supervised", tiny_task, tiny_view)
    psl = _quick("psl", tiny_task, tiny_view, tau=1.01)
    assert [t.labeled_loss for t in sup.trace] == [t.labeled_loss for t in psl.trace]
    assert all(t.unlabeled_loss == 0.0 for t in psl.trace)
    for pa, pb in zip(sup.model.params, psl.model.params):
        assert np.array_equal(pa.value, pb.value)


def test_trace_csv_round_trip(tmp_path, tiny_task, tiny_view):
    result = _quick("crisismatch", tiny_task, tiny_view, max_iters=5, eval_every=5)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, result.trace)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 6
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[1]) == result.trace[0].labeled_loss


def test_empty_labeled_pool_rejected(tiny_task, tiny_view):
    schema, _, dev, test, lexicon = tiny_task
    view = replace(tiny_view, labeled=())
    with pytest.raises(ConfigError, match="labeled"):
        train(view, dev, test, schema, lexicon, TrainConfig(max_iters=1), 0)


def test_step_accounting_all_copies_of_selected_examples(tiny_task, tiny_view, monkeypatch):
    """With B=4, ratio 3, K=2 and everything selected, the mixing pool must
    hold 4 labeled + 12*2 pseudo-labeled rows, targets shared across copies."""
    import crisismatch.trainer as trainer_mod
    from crisismatch.sslcore import one_hot

    schema, _, dev, test, lexicon = tiny_task

    def select_all(q, tau, mode="hard", temperature=0.5, strict=False):
        return np.ones(len(q), dtype=bool), one_hot(np.argmax(q, axis=1), q.shape[1])

    seen = {}
    real_pass = trainer_mod._mixed_pass

    def recording_pass(model, vocab, cfg, tokens, targets, num_labeled, weight, mix_rng):
        seen["pool"] = len(tokens)
        seen["num_labeled"] = num_labeled
        seen["targets"] = np.array(targets)
        return real_pass(model, vocab, cfg, tokens, targets, num_labeled, weight, mix_rng)

    monkeypatch.setattr(trainer_mod, "select_pseudo_labels", select_all)
    monkeypatch.setattr(trainer_mod, "_mixed_pass", recording_pass)

    cfg = TrainConfig(
        variant="crisismatch", batch_size=4, unlabeled_ratio=3, num_aug=2,
        embed_dim=8, num_blocks=2, max_iters=1, eval_every=1,
    )
    result = train(tiny_view, dev, test, schema, lexicon, cfg, 0)

    assert seen["pool"] == 4 + 12 * 2
    assert seen["num_labeled"] == 4
    assert seen["targets"].shape == (28, 3)
    pseudo = seen["targets"][4:]
    for row in range(0, 24, 2):  # copies of one example sit side by side
        assert np.array_equal(pseudo[row], pseudo[row + 1])
        assert pseudo[row].sum() == 1.0 and pseudo[row].max() == 1.0
    assert result.trace[0].acceptance_rate == 1.0


def test_psl_near_uniform_model_accepts_nothing():
    """An untrained 7-class model tops out far below the 0.75 threshold."""
    from crisismatch.dataio import synthetic_dataset, synthetic_lexicon_entries, synthetic_schema
    from crisismatch.textprep import SynonymLexicon

    schema = synthetic_schema(7)
    pool, dev, test = synthetic_dataset(7, 280, 35, 35, seed=0)
    view = few_shot_sample(pool, schema, 3, seed=0)
    lexicon = SynonymLexicon(synthetic_lexicon_entries(7, 50))
    cfg = TrainConfig(variant="psl", batch_size=8, unlabeled_ratio=2,
                      embed_dim=8, num_blocks=2, max_iters=1, eval_every=1)
    result = train(view, dev, test, schema, lexicon, cfg, 0)
    assert result.trace[0].acceptance_rate == 0.0
    assert result.trace[0].unlabeled_loss == 0.0
