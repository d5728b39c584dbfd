"""Training loop with variant dispatch and dev-set checkpoint selection.

One step of the full method: augment the labeled batch once and the
unlabeled batch K times, average the model's predictions over the K copies
of each unlabeled example (no gradients), keep examples whose averaged
confidence clears the threshold, give all K copies the guessed target,
shuffle labeled and pseudo-labeled rows together into a partner pool, and
interpolate hidden states and targets pairwise at a randomly chosen interior
layer. Labeled rows take cross-entropy, pseudo-labeled rows squared-L2, and
the unlabeled term is scaled by a linear ramp.

Simpler variants reuse the same pieces: plain pseudo-labeling trains raw
unlabeled examples against their own thresholded hard predictions;
the augmented variant adds K-copy averaging; the mixing-only variant
interpolates labeled examples with shuffled labeled partners; the
supervised baseline is cross-entropy on the raw labeled batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import FewShotView, plan_batches
from .evalkit import MetricsReport, evaluate_model
from .model import TextClassifier, build_model
from .numkit import NumericalError, mean_cross_entropy, mean_l2_prob, optimizer_step
from .sslcore import (
    average_predictions,
    draw_mix_coefficients,
    mix_targets,
    one_hot,
    pairwise_consistency,
    pseudo_label_loss,
    rampup_weight,
    select_pseudo_labels,
)
from .textprep import SynonymLexicon, Vocab, augment, augmentation_rng, encode_dynamic, tokenize

RNG_TAG_MIX = 104

VARIANTS = (
    "supervised",
    "psl",
    "psl_plus",
    "textmixup",
    "crisismatch",
    "crisismatch_sharpen",
)

# variants whose step touches the unlabeled pool at all
UNLABELED_VARIANTS = ("psl", "psl_plus", "crisismatch", "crisismatch_sharpen")


class ConfigError(Exception):
    """Invalid configuration or usage."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "crisismatch"
    batch_size: int = 32  # labeled examples per step
    unlabeled_ratio: int = 7  # unlabeled batch = ratio * batch_size
    num_aug: int = 2  # augmented copies per unlabeled example
    tau: float = 0.75  # confidence threshold
    temperature: float = 0.5  # sharpening temperature
    alpha: float = 0.75  # Beta parameter for mix coefficients
    unlabeled_weight: float = 10.0  # unlabeled loss weight at full ramp
    rampup_iters: int = 1000
    lr: float = 2e-3
    weight_decay: float = 0.01
    max_seq_len: int = 64
    embed_dim: int = 64
    num_blocks: int = 4
    mix_layers: tuple | None = None  # None -> deeper interior layers, see resolve_mix_layers
    min_count: int = 1
    max_iters: int = 2000
    eval_every: int = 50
    # ablation toggles (meaningful for the full method)
    use_unlabeled: bool = True
    use_consistency: bool = True
    use_textmixup: bool = True
    fixed_lambda: float | None = None
    consistency_weight: float = 0.0  # optional explicit disagreement penalty

    def resolved(self) -> "TrainConfig":
        """Apply variant implications and ablation toggles."""
        cfg = self
        if cfg.variant in ("supervised", "textmixup"):
            cfg = replace(cfg, use_unlabeled=False)
        if not cfg.use_consistency:
            cfg = replace(cfg, num_aug=1)
        if not cfg.use_textmixup:
            cfg = replace(cfg, fixed_lambda=1.0)
        return cfg

    def validate(self, num_classes: int):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'; valid: {', '.join(VARIANTS)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.unlabeled_ratio < 1:
            raise ConfigError("unlabeled_ratio must be at least 1")
        if self.num_aug < 1:
            raise ConfigError("num_aug must be at least 1")
        if num_classes >= 2 and self.tau <= 1.0 / num_classes:
            raise ConfigError(f"tau must exceed 1/{num_classes} or every guess would pass the gate")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.unlabeled_weight < 0:
            raise ConfigError("unlabeled_weight must be nonnegative")
        if self.rampup_iters < 1:
            raise ConfigError("rampup_iters must be at least 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be at least 1")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be at least 1")
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be nonnegative")
        if self.min_count < 1:
            raise ConfigError("min_count must be at least 1")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be nonnegative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")
        if self.fixed_lambda is not None and not 0.0 <= self.fixed_lambda <= 1.0:
            raise ConfigError("fixed_lambda must lie in [0, 1]")
        if self.consistency_weight < 0:
            raise ConfigError("consistency_weight must be nonnegative")
        sites = self.resolve_mix_layers()
        for m in sites:
            if not 0 <= m <= self.num_blocks:
                raise ConfigError(f"mix layer {m} outside [0, {self.num_blocks}]")
        if self.needs_mixing() and not sites:
            raise ConfigError("no mix layers available; set mix_layers or use num_blocks >= 2")

    def resolve_mix_layers(self) -> tuple:
        """Default mixing sites: the deeper interior block boundaries.

        Site m means "after block m"; 0 is the pooled embedding and
        num_blocks sits right before the classifier head. Interpolating
        deep representations perturbs training far less than mixing raw
        pools, so the default takes the upper half and leaves out both
        ends.
        """
        if self.mix_layers is not None:
            return tuple(self.mix_layers)
        return tuple(range(max(1, self.num_blocks // 2), self.num_blocks))

    def needs_mixing(self) -> bool:
        return self.variant in ("textmixup", "crisismatch", "crisismatch_sharpen")


@dataclass(frozen=True)
class StepTrace:
    iteration: int
    labeled_loss: float
    unlabeled_loss: float
    weight: float
    acceptance_rate: float
    pseudo_precision: float  # nan when nothing was selected or labels unknown


TRACE_COLUMNS = ("iter", "labeled_loss", "unlabeled_loss", "weight", "acceptance_rate", "pseudo_precision")


def write_trace_csv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for r in rows:
            fh.write(
                f"{r.iteration},{r.labeled_loss!r},{r.unlabeled_loss!r},"
                f"{r.weight!r},{r.acceptance_rate!r},{r.pseudo_precision!r}\n"
            )


@dataclass
class TrainResult:
    model: TextClassifier
    vocab: Vocab
    labels: list
    config: TrainConfig
    best_iter: int
    best_dev: MetricsReport
    test_report: MetricsReport
    trace: list = field(default_factory=list)


class _Corpus:
    """Pre-tokenized view of the few-shot pools plus diagnostics labels."""

    def __init__(self, view: FewShotView, schema):
        label_to_idx = {name: i for i, name in enumerate(schema)}
        self.lab_tokens = [tokenize(ex.text) for ex in view.labeled]
        self.lab_ids = [ex.id for ex in view.labeled]
        self.lab_targets = np.array([label_to_idx[ex.label] for ex in view.labeled], dtype=np.int64)
        self.unl_tokens = [tokenize(ex.text) for ex in view.unlabeled]
        self.unl_ids = [ex.id for ex in view.unlabeled]
        # true classes of unlabeled examples, -1 when unknown; read only
        # after a step to report pseudo-label precision
        self.unl_hidden = np.array(
            [label_to_idx.get(view.hidden_labels.get(ex.id), -1) for ex in view.unlabeled],
            dtype=np.int64,
        )

    def all_tokens(self):
        return self.lab_tokens + self.unl_tokens


@dataclass
class _StepStats:
    labeled_loss: float
    unlabeled_loss: float = 0.0
    acceptance: float = 0.0
    precision: float = float("nan")


def _augmented(corpus_tokens, example_ids, indices, lexicon, seed, iteration, copy_index):
    """Augmented copies for a batch; each copy is a pure function of
    (seed, example id, iteration, copy index)."""
    out = []
    for i in indices:
        rng = augmentation_rng(seed, example_ids[i], (iteration, copy_index))
        out.append(augment(corpus_tokens[i], lexicon, rng))
    return out


def _pseudo_precision(guess, hidden, selected) -> float:
    known = selected & (hidden >= 0)
    if not known.any():
        return float("nan")
    return float((guess[known] == hidden[known]).mean())


def _supervised_step(model, vocab, corpus, lab_idx, cfg) -> _StepStats:
    ids, lengths = encode_dynamic(vocab, [corpus.lab_tokens[i] for i in lab_idx], cfg.max_seq_len)
    targets = one_hot(corpus.lab_targets[lab_idx], model.num_classes)
    probs, cache = model.forward(ids, lengths)
    loss, dprobs = mean_cross_entropy(targets, probs)
    model.backward(cache, dprobs)
    return _StepStats(labeled_loss=loss)


def _psl_step(model, vocab, corpus, lab_idx, unl_idx, cfg, weight) -> _StepStats:
    stats = _supervised_step(model, vocab, corpus, lab_idx, cfg)
    if len(unl_idx) == 0:
        return stats
    ids, lengths = encode_dynamic(vocab, [corpus.unl_tokens[i] for i in unl_idx], cfg.max_seq_len)
    probs, cache = model.forward(ids, lengths)
    guesses = probs.copy()  # the model's own predictions, held constant
    loss_u, dprobs = pseudo_label_loss(guesses, probs, cfg.tau)
    model.backward(cache, weight * dprobs)
    selected = guesses.max(axis=1) > cfg.tau
    stats.unlabeled_loss = loss_u
    stats.acceptance = float(selected.mean())
    stats.precision = _pseudo_precision(np.argmax(guesses, axis=1), corpus.unl_hidden[unl_idx], selected)
    return stats


def _psl_plus_step(model, vocab, corpus, lab_idx, unl_idx, cfg, lexicon, weight, seed, iteration) -> _StepStats:
    stats = _supervised_step(model, vocab, corpus, lab_idx, cfg)
    if len(unl_idx) == 0:
        return stats
    k, n = cfg.num_aug, len(unl_idx)
    copies = []
    for copy in range(1, k + 1):
        copies.extend(_augmented(corpus.unl_tokens, corpus.unl_ids, unl_idx, lexicon, seed, iteration, copy))
    ids, lengths = encode_dynamic(vocab, copies, cfg.max_seq_len)
    probs, cache = model.forward(ids, lengths)  # copy-major: (k*n, C)
    guesses = average_predictions(probs.reshape(k, n, -1).copy())
    selected, targets = select_pseudo_labels(guesses, cfg.tau, mode="hard", strict=True)
    gated = targets * selected[:, None]
    loss_u, dprobs = mean_cross_entropy(np.tile(gated, (k, 1)), probs)
    if cfg.consistency_weight > 0.0:
        loss_c, dstack = pairwise_consistency(probs.reshape(k, n, -1))
        loss_u += cfg.consistency_weight * loss_c
        dprobs = dprobs + cfg.consistency_weight * dstack.reshape(k * n, -1)
    model.backward(cache, weight * dprobs)
    stats.unlabeled_loss = loss_u
    stats.acceptance = float(selected.mean())
    stats.precision = _pseudo_precision(np.argmax(guesses, axis=1), corpus.unl_hidden[unl_idx], selected)
    return stats


def _mixed_pass(model, vocab, cfg, tokens, targets, num_labeled, weight, mix_rng):
    """Shared mixing machinery: pair every row with a shuffled partner, mix
    hidden states and targets, split the loss by row origin.

    Rows [0, num_labeled) score cross-entropy against mixed targets; the
    rest score squared-L2 scaled by ``weight``. Returns (L_x, L_u).
    """
    n_total = len(tokens)
    perm = mix_rng.permutation(n_total)
    if cfg.fixed_lambda is not None:
        lam = np.full(n_total, float(cfg.fixed_lambda))
    else:
        lam = draw_mix_coefficients(cfg.alpha, n_total, mix_rng)
    sites = cfg.resolve_mix_layers()
    if not sites:
        raise ConfigError("no mix layers available; set mix_layers or use num_blocks >= 2")
    layer = sites[int(mix_rng.integers(0, len(sites)))]

    ids, lengths = encode_dynamic(vocab, tokens, cfg.max_seq_len)
    hidden, front = model.forward_hidden(ids, lengths, layer)
    mixed = lam[:, None] * hidden + (1.0 - lam[:, None]) * hidden[perm]
    probs, rear = model.forward_output(mixed, layer)
    tmix = mix_targets(targets, targets[perm], lam)

    loss_x, dpx = mean_cross_entropy(tmix[:num_labeled], probs[:num_labeled])
    dprobs = np.zeros_like(probs)
    dprobs[:num_labeled] = dpx
    if n_total > num_labeled:
        loss_u, dpu = mean_l2_prob(tmix[num_labeled:], probs[num_labeled:])
        dprobs[num_labeled:] = weight * dpu
    else:
        loss_u = 0.0
    dmixed = model.backward_output(rear, dprobs)
    dhidden = lam[:, None] * dmixed
    np.add.at(dhidden, perm, (1.0 - lam[:, None]) * dmixed)
    model.backward_hidden(front, dhidden)
    return loss_x, loss_u


def _textmixup_step(model, vocab, corpus, lab_idx, cfg, mix_rng) -> _StepStats:
    tokens = [corpus.lab_tokens[i] for i in lab_idx]
    targets = one_hot(corpus.lab_targets[lab_idx], model.num_classes)
    loss_x, _ = _mixed_pass(model, vocab, cfg, tokens, targets, len(tokens), 0.0, mix_rng)
    return _StepStats(labeled_loss=loss_x)


def _crisismatch_step(model, vocab, corpus, lab_idx, unl_idx, cfg, lexicon, weight, seed, iteration, mix_rng) -> _StepStats:
    sharpen_mode = cfg.variant == "crisismatch_sharpen"
    tokens = _augmented(corpus.lab_tokens, corpus.lab_ids, lab_idx, lexicon, seed, iteration, 0)
    targets = one_hot(corpus.lab_targets[lab_idx], model.num_classes)
    num_labeled = len(tokens)

    acceptance = 0.0
    precision = float("nan")
    if len(unl_idx) > 0:
        k, n = cfg.num_aug, len(unl_idx)
        copies = []
        for copy in range(1, k + 1):
            copies.append(_augmented(corpus.unl_tokens, corpus.unl_ids, unl_idx, lexicon, seed, iteration, copy))
        flat = [t for group in copies for t in group]
        ids, lengths = encode_dynamic(vocab, flat, cfg.max_seq_len)
        # label guessing runs the current model in inference mode; the
        # guessed targets are constants for the update below
        preds = model.predict_proba(ids, lengths).reshape(k, n, -1)
        guesses = average_predictions(preds)
        selected, guess_targets = select_pseudo_labels(
            guesses,
            cfg.tau,
            mode="sharpen" if sharpen_mode else "hard",
            temperature=cfg.temperature,
        )
        picked = np.flatnonzero(selected)
        if len(picked) > 0:
            # every copy of a selected example joins the pseudo-labeled pool,
            # example-major, all sharing that example's guessed target
            for b in picked:
                for copy in range(k):
                    tokens.append(copies[copy][b])
            targets = np.vstack([targets, np.repeat(guess_targets[picked], k, axis=0)])
        acceptance = float(selected.mean())
        precision = _pseudo_precision(np.argmax(guesses, axis=1), corpus.unl_hidden[unl_idx], selected)

    loss_x, loss_u = _mixed_pass(model, vocab, cfg, tokens, targets, num_labeled, weight, mix_rng)
    return _StepStats(loss_x, loss_u, acceptance, precision)


def train(view: FewShotView, dev, test, schema, lexicon: SynonymLexicon, config: TrainConfig, seed: int) -> TrainResult:
    """Run one seed end to end; returns the best-dev checkpointed model,
    its test report, and the per-step trace."""
    cfg = config.resolved()
    cfg.validate(len(schema))
    if not view.labeled:
        raise ConfigError("labeled pool is empty")
    corpus = _Corpus(view, schema)
    # the vocabulary covers all training-split text no matter the variant,
    # so cross-variant comparisons differ only in the algorithm
    vocab = Vocab.build(corpus.all_tokens(), min_count=cfg.min_count)
    model = build_model(vocab, len(schema), cfg.embed_dim, cfg.num_blocks, seed)
    uses_unlabeled = cfg.use_unlabeled and cfg.variant in UNLABELED_VARIANTS
    plan = plan_batches(
        len(corpus.lab_tokens),
        len(corpus.unl_tokens) if uses_unlabeled else 0,
        cfg.batch_size,
        cfg.unlabeled_ratio,
        seed,
    )
    mix_rng = np.random.default_rng(np.random.SeedSequence([seed, RNG_TAG_MIX]))

    best_dev = evaluate_model(model, vocab, schema, dev, cfg.max_seq_len)
    best_iter = 0
    best_params = [p.value.copy() for p in model.params]
    trace = []

    for iteration in range(cfg.max_iters):
        lab_idx, unl_idx = next(plan)
        weight = rampup_weight(iteration, cfg.rampup_iters, cfg.unlabeled_weight)
        if cfg.variant == "supervised":
            stats = _supervised_step(model, vocab, corpus, lab_idx, cfg)
        elif cfg.variant == "psl":
            stats = _psl_step(model, vocab, corpus, lab_idx, unl_idx, cfg, weight)
        elif cfg.variant == "psl_plus":
            stats = _psl_plus_step(model, vocab, corpus, lab_idx, unl_idx, cfg, lexicon, weight, seed, iteration)
        elif cfg.variant == "textmixup":
            stats = _textmixup_step(model, vocab, corpus, lab_idx, cfg, mix_rng)
        else:
            stats = _crisismatch_step(
                model, vocab, corpus, lab_idx, unl_idx, cfg, lexicon, weight, seed, iteration, mix_rng
            )
        row = StepTrace(iteration, stats.labeled_loss, stats.unlabeled_loss, weight, stats.acceptance, stats.precision)
        if not (math.isfinite(stats.labeled_loss) and math.isfinite(stats.unlabeled_loss)):
            raise NumericalError(f"non-finite loss at iteration {iteration}: {row}")
        optimizer_step(model.params, cfg.lr, cfg.weight_decay)
        trace.append(row)
        if (iteration + 1) % cfg.eval_every == 0:
            report = evaluate_model(model, vocab, schema, dev, cfg.max_seq_len)
            if report.macro_f1 > best_dev.macro_f1:
                best_dev = report
                best_iter = iteration + 1
                best_params = [p.value.copy() for p in model.params]

    for p, value in zip(model.params, best_params):
        p.value[...] = value
    test_report = evaluate_model(model, vocab, schema, test, cfg.max_seq_len)
    return TrainResult(model, vocab, list(schema), cfg, best_iter, best_dev, test_report, trace)
