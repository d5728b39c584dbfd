"""Semi-supervised building blocks.

Pure functions over probability arrays: temperature sharpening, prediction
averaging across augmentations, confidence-gated pseudo-label selection,
target interpolation, augmentation-consistency penalty, pseudo-label loss
with a fixed-denominator threshold gate, and the linear unlabeled-weight
ramp. Batch variants operate row-wise over (n, C) arrays.
"""

from __future__ import annotations

import numpy as np

from .numkit import mean_cross_entropy

PROB_ATOL = 1e-8


def _check_prob_rows(p: np.ndarray, name: str):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValueError(f"{name} must be (n, C) with C >= 2")
    if (p < -PROB_ATOL).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError(f"{name} rows must be probability distributions")
    return p


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    """Raise probabilities to the power 1/T and renormalize, row-wise.

    T < 1 concentrates mass on the mode; T -> 0 approaches one-hot. Rows are
    divided by their max first so tiny probabilities cannot underflow the
    power before normalization.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = np.asarray(p, dtype=np.float64)
    squeeze = p.ndim == 1
    rows = _check_prob_rows(np.atleast_2d(p), "p")
    scaled = (rows / rows.max(axis=1, keepdims=True)) ** (1.0 / temperature)
    out = scaled / scaled.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


def average_predictions(preds: np.ndarray) -> np.ndarray:
    """Element-wise mean over the leading axis of a (K, n, C) stack."""
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim < 2 or preds.shape[0] < 1:
        raise ValueError("need at least one prediction to average")
    return preds.mean(axis=0)


def select_pseudo_labels(
    q: np.ndarray,
    tau: float,
    mode: str = "hard",
    temperature: float = 0.5,
    strict: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Confidence-gate averaged predictions into training targets.

    Returns (selected mask, targets). Hard mode emits one-hot rows at the
    argmax (ties break to the lowest class index); sharpen mode emits the
    sharpened distribution. The gate is max(q) >= tau, or > tau when
    ``strict`` (the plain pseudo-labeling loss uses the strict form).
    Target rows are computed for every input; the mask says which count.
    """
    q = _check_prob_rows(q, "q")
    if mode not in ("hard", "sharpen"):
        raise ValueError(f"unknown selection mode: {mode!r}")
    conf = q.max(axis=1)
    mask = conf > tau if strict else conf >= tau
    if mode == "hard":
        targets = one_hot(np.argmax(q, axis=1), q.shape[1])
    else:
        targets = sharpen(q, temperature)
    return mask, targets


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label index out of range")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def draw_mix_coefficients(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Beta(alpha, alpha) draws folded onto [0.5, 1] so the left operand of
    every mix dominates."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    raw = rng.beta(alpha, alpha, size=size)
    return np.maximum(raw, 1.0 - raw)


def mix_targets(y_a: np.ndarray, y_b: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Row-wise convex combination lam*y_a + (1-lam)*y_b."""
    y_a = np.asarray(y_a, dtype=np.float64)
    y_b = np.asarray(y_b, dtype=np.float64)
    if y_a.shape != y_b.shape:
        raise ValueError("target shape mismatch")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    return lam * y_a + (1.0 - lam) * y_b


def mix_hidden(h_a: np.ndarray, h_b: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Same convex combination, applied to hidden-state rows."""
    if h_a.shape != h_b.shape:
        raise ValueError("hidden shape mismatch")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    return lam * h_a + (1.0 - lam) * h_b


def consistency_loss(p_a: np.ndarray, p_b: np.ndarray) -> float:
    """Squared L2 distance between two predictions of the same example."""
    p_a = np.asarray(p_a, dtype=np.float64)
    p_b = np.asarray(p_b, dtype=np.float64)
    if p_a.shape != p_b.shape:
        raise ValueError("prediction shape mismatch")
    d = p_a - p_b
    return float((d * d).sum())


def pairwise_consistency(preds: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared-L2 disagreement over all unordered copy pairs.

    ``preds`` is (K, n, C): K augmented predictions for each of n examples.
    Returns the scalar mean (over pairs and examples) and its gradient wrt
    ``preds``. K=1 yields 0 with zero gradient.
    """
    preds = np.asarray(preds, dtype=np.float64)
    k, n, _ = preds.shape
    if k < 2:
        return 0.0, np.zeros_like(preds)
    npairs = k * (k - 1) // 2
    total = 0.0
    grad = np.zeros_like(preds)
    scale = 1.0 / (npairs * n)
    for a in range(k):
        for b in range(a + 1, k):
            d = preds[a] - preds[b]
            total += float((d * d).sum())
            grad[a] += 2.0 * d * scale
            grad[b] -= 2.0 * d * scale
    return total * scale, grad


def pseudo_label_loss(q: np.ndarray, preds: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Thresholded hard-label cross-entropy with a fixed 1/n denominator.

    ``q`` are the (detached) label-guess distributions, ``preds`` the live
    predictions being trained. Rows with max(q) <= tau contribute zero but
    still count in the denominator, so the loss shrinks when little is
    selected instead of renormalizing over the survivors. Returns the loss
    and its gradient wrt ``preds``.
    """
    q = _check_prob_rows(q, "q")
    preds = np.asarray(preds, dtype=np.float64)
    if q.shape != preds.shape:
        raise ValueError("q/preds shape mismatch")
    mask, targets = select_pseudo_labels(q, tau, mode="hard", strict=True)
    return mean_cross_entropy(targets * mask[:, None], preds)


def rampup_weight(iteration: int, ramp_len: int, w_max: float) -> float:
    """Linear schedule from 0 at iteration 0 to w_max at ramp_len, flat after."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    if ramp_len < 1:
        raise ValueError("ramp_len must be at least 1")
    return w_max * min(1.0, iteration / ramp_len)


def make_pairing(n_total: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffle order for the mix partner pool: row i pairs with perm[i]."""
    return rng.permutation(n_total)
