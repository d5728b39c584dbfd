"""Label guessing, sharpening, mixing coefficients, and the unlabeled losses."""

import numpy as np
import pytest

from crisismatch.sslcore import (
    average_predictions,
    consistency_loss,
    draw_mix_coefficients,
    make_pairing,
    mix_hidden,
    mix_targets,
    one_hot,
    pairwise_consistency,
    pseudo_label_loss,
    rampup_weight,
    select_pseudo_labels,
    sharpen,
)


def _rows(rng, n=8, c=4):
    return rng.dirichlet(np.ones(c), size=n)


def test_sharpen_matches_power_formula():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = _rows(rng)
        t = rng.uniform(0.2, 1.0)
        powered = p ** (1.0 / t)
        expected = powered / powered.sum(axis=1, keepdims=True)
        assert np.allclose(sharpen(p, t), expected, atol=1e-12)


def test_sharpen_t1_is_identity():
    rng = np.random.default_rng(1)
    p = _rows(rng)
    assert np.allclose(sharpen(p, 1.0), p, atol=1e-12)


def test_sharpen_accepts_single_row():
    out = sharpen(np.array([0.8, 0.2]), 0.5)
    assert out.shape == (2,)
    assert out[0] == pytest.approx(0.64 / 0.68)


def test_sharpen_rejects_bad_temperature():
    with pytest.raises(ValueError):
        sharpen(np.array([0.5, 0.5]), 0.0)


def test_sharpen_rejects_non_distribution():
    with pytest.raises(ValueError):
        sharpen(np.array([0.9, 0.9]), 0.5)


def test_average_predictions_is_mean_over_copies():
    rng = np.random.default_rng(2)
    stack = np.stack([_rows(rng) for _ in range(3)])
    assert np.allclose(average_predictions(stack), stack.mean(axis=0), atol=1e-12)


def test_select_hard_labels_are_one_hot_argmax():
    rng = np.random.default_rng(3)
    q = _rows(rng, n=50)
    mask, targets = select_pseudo_labels(q, tau=0.5)
    for i in range(len(q)):
        assert targets[i].sum() == 1.0
        assert targets[i, q[i].argmax()] == 1.0
        assert mask[i] == (q[i].max() >= 0.5)


def test_select_tie_breaks_to_lowest_index():
    q = np.array([[0.4, 0.4, 0.2]])
    _, targets = select_pseudo_labels(q, tau=0.3)
    assert list(targets[0]) == [1.0, 0.0, 0.0]


def test_select_strict_vs_inclusive_boundary():
    q = np.array([[0.75, 0.25]])
    inclusive, _ = select_pseudo_labels(q, tau=0.75)
    strict, _ = select_pseudo_labels(q, tau=0.75, strict=True)
    assert inclusive[0] and not strict[0]


def test_select_sharpen_mode_returns_soft_targets():
    q = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    mask, targets = select_pseudo_labels(q, tau=0.55, mode="sharpen", temperature=0.5)
    assert list(mask) == [True, False]
    assert np.allclose(targets, sharpen(q, 0.5))


def test_select_monotone_in_threshold():
    rng = np.random.default_rng(4)
    q = _rows(rng, n=200)
    previous = None
    for tau in (0.3, 0.5, 0.7, 0.9):
        mask, _ = select_pseudo_labels(q, tau)
        if previous is not None:
            assert not (mask & ~previous).any()  # raising tau never adds rows
        previous = mask


def test_one_hot():
    out = one_hot(np.array([2, 0]), 3)
    assert np.array_equal(out, [[0, 0, 1], [1, 0, 0]])


def test_mix_coefficients_favor_first_argument():
    rng = np.random.default_rng(5)
    lam = draw_mix_coefficients(0.75, 1000, rng)
    assert lam.shape == (1000,)
    assert (lam >= 0.5).all() and (lam <= 1.0).all()
    assert len(np.unique(lam)) > 900  # fresh draw per pair


def test_mix_targets_interpolates():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    out = mix_targets(a, b, np.array([0.7]))
    assert np.allclose(out, [[0.7, 0.3]])


def test_mix_hidden_matches_mix_targets_formula():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 5, 3))
    lam = rng.uniform(0.5, 1.0, size=5)
    assert np.allclose(mix_hidden(a, b, lam), lam[:, None] * a + (1 - lam[:, None]) * b)


def test_consistency_loss_zero_on_identical():
    rng = np.random.default_rng(7)
    p = _rows(rng)
    assert consistency_loss(p, p) == 0.0


def test_consistency_loss_known_value():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    assert consistency_loss(a, b) == pytest.approx(2.0)


def test_pairwise_consistency_single_copy_is_zero():
    rng = np.random.default_rng(8)
    stack = _rows(rng)[None]
    loss, grad = pairwise_consistency(stack)
    assert loss == 0.0
    assert (grad == 0).all()


def test_pairwise_consistency_matches_finite_difference():
    rng = np.random.default_rng(9)
    stack = np.stack([_rows(rng, n=3) for _ in range(3)])
    loss, grad = pairwise_consistency(stack)
    eps = 1e-6
    for idx in ((0, 1, 2), (2, 0, 3), (1, 2, 0)):
        bumped = stack.copy()
        bumped[idx] += eps
        numeric = (pairwise_consistency(bumped)[0] - loss) / eps
        assert numeric == pytest.approx(grad[idx], abs=1e-4)


def test_pseudo_label_loss_uses_fixed_denominator():
    """Rows under the threshold contribute zero but still count in the mean."""
    q = np.array([[0.9, 0.1], [0.55, 0.45]])
    preds = np.array([[0.8, 0.2], [0.6, 0.4]])
    loss, grad = pseudo_label_loss(q, preds, tau=0.7)
    assert loss == pytest.approx(-np.log(0.8) / 2)
    assert grad[1, 0] == 0.0 and grad[1, 1] == 0.0
    assert grad[0, 0] == pytest.approx(-1 / 0.8 / 2)


def test_pseudo_label_loss_gate_is_strict():
    q = np.array([[0.7, 0.3]])
    loss, _ = pseudo_label_loss(q, q.copy(), tau=0.7)
    assert loss == 0.0


def test_rampup_weight_schedule():
    assert rampup_weight(0, 1000, 10.0) == 0.0
    assert rampup_weight(500, 1000, 10.0) == pytest.approx(5.0)
    assert rampup_weight(1000, 1000, 10.0) == 10.0
    assert rampup_weight(5000, 1000, 10.0) == 10.0


def test_rampup_weight_validates_inputs():
    with pytest.raises(ValueError):
        rampup_weight(-1, 1000, 10.0)
    with pytest.raises(ValueError):
        rampup_weight(0, 0, 10.0)


def test_make_pairing_is_permutation():
    rng = np.random.default_rng(10)
    for n in (1, 2, 17):
        perm = make_pairing(n, rng)
        assert sorted(perm) == list(range(n))
