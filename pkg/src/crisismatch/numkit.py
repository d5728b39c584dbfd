"""Differentiable numerical primitives.

Minimal forward/backward layer ops on float64 numpy arrays, soft-target losses
with analytic gradients, a decoupled-weight-decay adaptive optimizer, and a
finite-difference gradient checker. Everything downstream builds on these.

Layer primitives are functional: ``forward`` returns ``(output, cache)`` and
``backward(cache, upstream_grad)`` returns the input gradient while
accumulating parameter gradients into the owned slots. Keeping the cache
explicit lets several forward passes through the same parameters coexist
(needed when two operands of a mixed pair share the encoder).
"""

from __future__ import annotations

import numpy as np

LOG_CLAMP = 1e-12
INIT_RANGE = 0.08

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalError(RuntimeError):
    """Non-finite values showed up where finite ones are required."""


class ParamSlot:
    """A trainable tensor bundled with its gradient and optimizer moments."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.moment1 = np.zeros_like(self.value)
        self.moment2 = np.zeros_like(self.value)
        self.step = 0

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"ParamSlot({self.name!r}, shape={self.value.shape})"


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis.

    Raises NumericalError naming the offending index if any logit is NaN/Inf.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise ValueError("softmax needs at least 2 classes")
    bad = ~np.isfinite(z)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericalError(f"non-finite logit at index {idx}")
    shifted = z - z.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def cross_entropy_soft(target: np.ndarray, pred: np.ndarray) -> float:
    """-sum(target * ln pred) for two probability vectors.

    Predictions are clamped at LOG_CLAMP before the log so confident mixed
    targets cannot produce -inf.
    """
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: target {t.shape} vs pred {p.shape}")
    return float(-(t * np.log(np.maximum(p, LOG_CLAMP))).sum())


def l2_prob_loss(target: np.ndarray, pred: np.ndarray) -> float:
    """Squared L2 distance between probability vectors; bounded by 2."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: target {t.shape} vs pred {p.shape}")
    d = t - p
    return float((d * d).sum())


def mean_cross_entropy(targets: np.ndarray, preds: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean soft cross-entropy and its gradient wrt preds.

    The 1/n batch average lives here, not in the optimizer.
    """
    if targets.shape != preds.shape:
        raise ValueError("targets/preds shape mismatch")
    n = preds.shape[0]
    clamped = np.maximum(preds, LOG_CLAMP)
    loss = float(-(targets * np.log(clamped)).sum() / n)
    grad = np.where(preds > LOG_CLAMP, -targets / clamped, 0.0) / n
    return loss, grad


def mean_l2_prob(targets: np.ndarray, preds: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean squared-L2 loss on probabilities and its gradient wrt preds."""
    if targets.shape != preds.shape:
        raise ValueError("targets/preds shape mismatch")
    n = preds.shape[0]
    diff = preds - targets
    return float((diff * diff).sum() / n), (2.0 / n) * diff


def optimizer_step(
    slots,
    lr: float,
    weight_decay: float = 0.01,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
):
    """Bias-corrected adaptive update with decoupled weight decay.

    Weight decay is applied directly to the values, outside the gradient
    path. Gradients are zeroed after the update.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for slot in slots:
        if not np.isfinite(slot.grad).all():
            raise NumericalError(f"non-finite gradient in parameter '{slot.name}'")
        slot.step += 1
        t = slot.step
        slot.moment1 = beta1 * slot.moment1 + (1.0 - beta1) * slot.grad
        slot.moment2 = beta2 * slot.moment2 + (1.0 - beta2) * slot.grad * slot.grad
        m_hat = slot.moment1 / (1.0 - beta1**t)
        v_hat = slot.moment2 / (1.0 - beta2**t)
        slot.value -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * slot.value)
        slot.zero_grad()


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


class Affine:
    """y = x @ W + b with W (d_in, d_out) and b (1, d_out)."""

    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = ParamSlot(f"{name}.weight", rng.uniform(-INIT_RANGE, INIT_RANGE, size=(d_in, d_out)))
        self.bias = ParamSlot(f"{name}.bias", np.zeros((1, d_out)))

    @property
    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray):
        return x @ self.weight.value + self.bias.value, x

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        x = cache
        self.weight.grad += x.T @ grad_out
        self.bias.grad += grad_out.sum(axis=0, keepdims=True)
        return grad_out @ self.weight.value.T


class Tanh:
    """Elementwise tanh."""

    params = ()

    def forward(self, x: np.ndarray):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        y = cache
        return grad_out * (1.0 - y * y)


class ResidualAdd:
    """y = x + branch; gradient passes through unchanged to both inputs."""

    params = ()

    def forward(self, x: np.ndarray, branch: np.ndarray):
        return x + branch, None

    def backward(self, cache, grad_out: np.ndarray):
        return grad_out, grad_out


class EmbeddingLookup:
    """ids (n, s) -> vectors (n, s, d); backward scatter-adds into the table."""

    def __init__(self, name: str, vocab_size: int, dim: int, rng: np.random.Generator):
        self.table = ParamSlot(name, rng.uniform(-INIT_RANGE, INIT_RANGE, size=(vocab_size, dim)))

    @property
    def params(self):
        return [self.table]

    def forward(self, ids: np.ndarray):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.value.shape[0]):
            raise ValueError("token id out of vocabulary range")
        return self.table.value[ids], ids

    def backward(self, cache, grad_out: np.ndarray):
        ids = cache
        np.add.at(self.table.grad, ids.ravel(), grad_out.reshape(-1, grad_out.shape[-1]))
        return None  # ids are not differentiable


class MaskedMeanPool:
    """(n, s, d) -> (n, d), averaging only the first ``length`` positions per row."""

    params = ()

    def forward(self, x: np.ndarray, lengths: np.ndarray):
        n, s, _ = x.shape
        mask = np.arange(s)[None, :] < np.asarray(lengths).reshape(n, 1)
        denom = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(np.float64)
        pooled = (x * mask[:, :, None]).sum(axis=1) / denom
        return pooled, (mask, denom)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        mask, denom = cache
        return (grad_out / denom)[:, None, :] * mask[:, :, None]


class SoftmaxHead:
    """Row-wise softmax; backward maps probability-space grads to logit space."""

    params = ()

    def forward(self, logits: np.ndarray):
        p = softmax(logits)
        return p, p

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        p = cache
        inner = (grad_out * p).sum(axis=-1, keepdims=True)
        return p * (grad_out - inner)


class ResidualTanhBlock:
    """One encoder block: x + tanh(x @ W + b)."""

    def __init__(self, name: str, dim: int, rng: np.random.Generator):
        self.affine = Affine(name, dim, dim, rng)
        self.act = Tanh()
        self.residual = ResidualAdd()

    @property
    def params(self):
        return self.affine.params

    def forward(self, x: np.ndarray):
        z, aff_cache = self.affine.forward(x)
        t, act_cache = self.act.forward(z)
        y, _ = self.residual.forward(x, t)
        return y, (aff_cache, act_cache)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        aff_cache, act_cache = cache
        dx_skip, d_branch = self.residual.backward(None, grad_out)
        dz = self.act.backward(act_cache, d_branch)
        dx_main = self.affine.backward(aff_cache, dz)
        return dx_skip + dx_main


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def max_relative_grad_error(slots, loss_fn, grad_fn, epsilon: float = 1e-5) -> float:
    """Central finite differences over every coordinate of ``slots``.

    ``grad_fn()`` must populate ``slot.grad`` for all slots (it is run once,
    on zeroed grads); ``loss_fn()`` must recompute the scalar loss from the
    current slot values. Returns the max relative error; never raises on a
    mismatch.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-6, 1e-3]")
    slots = list(slots)
    for s in slots:
        s.zero_grad()
    grad_fn()
    analytic = (
        np.concatenate([s.grad.ravel().copy() for s in slots]) if slots else np.zeros(0)
    )
    numeric = np.zeros_like(analytic)
    pos = 0
    for s in slots:
        flat = s.value.ravel()  # view; perturbations hit the live parameter
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            loss_plus = loss_fn()
            flat[i] = orig - epsilon
            loss_minus = loss_fn()
            flat[i] = orig
            numeric[pos] = (loss_plus - loss_minus) / (2.0 * epsilon)
            pos += 1
    for s in slots:
        s.zero_grad()
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())


def grad_check(fragment, x, loss_fn, epsilon: float = 1e-5) -> float:
    """Gradient-check a single-input fragment against a loss.

    ``fragment`` follows the primitive protocol (``params``, ``forward``,
    ``backward``); ``loss_fn(y)`` returns ``(loss, dloss_dy)``.
    """

    def loss_value():
        y, _ = fragment.forward(x)
        return loss_fn(y)[0]

    def run_backward():
        y, cache = fragment.forward(x)
        _, dy = loss_fn(y)
        fragment.backward(cache, dy)

    return max_relative_grad_error(list(fragment.params), loss_value, run_backward, epsilon)
