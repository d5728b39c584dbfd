"""Classifier assembly, split forward passes, and checkpoint round-trips."""

import numpy as np
import pytest

from crisismatch.model import TextClassifier, build_model, load_checkpoint, save_checkpoint
from crisismatch.textprep import Vocab


def _toy():
    vocab = Vocab.build([[f"w{i}" for i in range(10)]])
    model = build_model(vocab, num_classes=3, embed_dim=6, num_blocks=3, seed=0)
    rng = np.random.default_rng(0)
    ids = rng.integers(0, len(vocab), size=(4, 5))
    lengths = np.array([5, 3, 1, 4])
    return vocab, model, ids, lengths


def test_build_model_is_seed_deterministic():
    vocab = Vocab.build([["a", "b", "c"]])
    m1 = build_model(vocab, 3, 8, 2, seed=5)
    m2 = build_model(vocab, 3, 8, 2, seed=5)
    m3 = build_model(vocab, 3, 8, 2, seed=6)
    for a, b in zip(m1.params, m2.params):
        assert np.array_equal(a.value, b.value)
    assert any(not np.array_equal(a.value, c.value) for a, c in zip(m1.params, m3.params))


def test_param_names_are_unique():
    _, model, _, _ = _toy()
    names = [p.name for p in model.params]
    assert len(names) == len(set(names))


def test_forward_outputs_probabilities():
    _, model, ids, lengths = _toy()
    probs, _ = model.forward(ids, lengths)
    assert probs.shape == (4, 3)
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_split_forward_matches_full_at_every_layer():
    """Cutting the network at any block boundary must not change the output."""
    _, model, ids, lengths = _toy()
    full, _ = model.forward(ids, lengths)
    for layer in range(model.num_blocks + 1):
        hidden, _ = model.forward_hidden(ids, lengths, layer)
        probs, _ = model.forward_output(hidden, layer)
        assert np.array_equal(probs, full), f"cut at {layer} diverged"


def test_split_backward_matches_full_gradients():
    _, model, ids, lengths = _toy()
    dprobs = np.random.default_rng(1).normal(size=(4, 3))

    probs, cache = model.forward(ids, lengths)
    model.backward(cache, dprobs)
    reference = [p.grad.copy() for p in model.params]

    for layer in (0, 1, 3):
        for p in model.params:
            p.zero_grad()
        hidden, front = model.forward_hidden(ids, lengths, layer)
        _, rear = model.forward_output(hidden, layer)
        dhidden = model.backward_output(rear, dprobs)
        model.backward_hidden(front, dhidden)
        for p, ref in zip(model.params, reference):
            assert np.allclose(p.grad, ref, atol=1e-12), f"cut at {layer}: {p.name}"


def test_predict_matches_argmax_of_proba():
    _, model, ids, lengths = _toy()
    proba = model.predict_proba(ids, lengths)
    assert np.array_equal(model.predict(ids, lengths), proba.argmax(axis=1))


def test_predict_proba_leaves_grads_untouched():
    _, model, ids, lengths = _toy()
    model.predict_proba(ids, lengths)
    assert all((p.grad == 0).all() for p in model.params)


def test_checkpoint_round_trip(tmp_path):
    vocab, model, ids, lengths = _toy()
    before = model.predict_proba(ids, lengths)
    path = tmp_path / "ckpt"
    save_checkpoint(path, model, vocab, ["x", "y", "z"], meta={"note": 1})
    bundle = load_checkpoint(path)
    assert bundle.labels == ["x", "y", "z"]
    assert bundle.meta == {"note": 1}
    assert bundle.vocab.id_to_token == vocab.id_to_token
    after = bundle.model.predict_proba(ids, lengths)
    assert np.array_equal(before, after)


def test_checkpoint_bytes_are_deterministic(tmp_path):
    vocab, model, _, _ = _toy()
    save_checkpoint(tmp_path / "a", model, vocab, ["x", "y", "z"])
    save_checkpoint(tmp_path / "b", model, vocab, ["x", "y", "z"])
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_rejects_wrong_format(tmp_path):
    path = tmp_path / "ckpt"
    path.write_bytes(b'{"format": 999}\n')
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(path)


def test_checkpoint_rejects_truncated_blob(tmp_path):
    vocab, model, _, _ = _toy()
    path = tmp_path / "ckpt"
    save_checkpoint(path, model, vocab, ["x", "y", "z"])
    blob = path.read_bytes()
    path.write_bytes(blob[:-16])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_label_count_must_match_head():
    vocab, model, _, _ = _toy()
    with pytest.raises(ValueError):
        save_checkpoint("unused", model, vocab, ["only", "two"])
