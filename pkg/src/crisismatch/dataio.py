"""Dataset ingestion, splits, few-shot views, batch planning, synthetic data.

File format is headered TSV (``id<TAB>text<TAB>label``). Splits are
stratified 80/10/10 with largest-remainder rounding arranged so the global
split sizes are exact and every class lands within one example of its
proportional share. Few-shot views expose n labeled examples per class and
hide the remaining labels behind a diagnostics-only mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Disaster tweet classes, in canonical order.
DEFAULT_SCHEMA = [
    "caution_and_advice",
    "infrastructure_and_utility_damage",
    "injured_or_dead_people",
    "not_humanitarian",
    "other_relevant_information",
    "rescue_volunteering_or_donation_effort",
    "sympathy_and_support",
]

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)

# rng stream tags local to this module (model owns 101, trainer 104)
RNG_TAG_LABELED_PLAN = 102
RNG_TAG_UNLABELED_PLAN = 103
RNG_TAG_SPLIT = 105
RNG_TAG_FEWSHOT = 106
RNG_TAG_SYNTH = 107


class DataError(Exception):
    """Unusable input data: missing files, malformed rows, schema violations."""


@dataclass(frozen=True)
class Example:
    id: str
    text: str
    label: str | None = None


@dataclass(frozen=True)
class FewShotView:
    """n labeled examples per class plus the rest of train, labels hidden.

    ``hidden_labels`` maps unlabeled example ids to their true class for
    after-the-fact diagnostics (pseudo-label precision). Training code only
    ever reads ``labeled`` and ``unlabeled``; unlabeled entries carry no
    label field.
    """

    labeled: tuple
    unlabeled: tuple
    hidden_labels: dict


def load_dataset(path, schema: list[str]) -> list[Example]:
    """Read a headered TSV, rejecting malformed rows with their location."""
    label_set = set(schema)
    out = []
    seen_ids = set()
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from exc
    with fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t") != ["id", "text", "label"]:
            raise DataError(f"{path}:1: expected header 'id<TAB>text<TAB>label'")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            ex_id, text, label = parts
            if not ex_id or not text.strip():
                raise DataError(f"{path}:{lineno}: empty id or text")
            if label not in label_set:
                raise DataError(f"{path}:{lineno}: unknown label '{label}'")
            if ex_id in seen_ids:
                raise DataError(f"{path}:{lineno}: duplicate id '{ex_id}'")
            seen_ids.add(ex_id)
            out.append(Example(ex_id, text, label))
    return out


def write_dataset(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\ttext\tlabel\n")
        for ex in examples:
            if ex.label is None:
                raise DataError(f"example '{ex.id}' has no label; cannot serialize")
            if "\t" in ex.text or "\n" in ex.text:
                raise DataError(f"example '{ex.id}' text contains a tab or newline")
            fh.write(f"{ex.id}\t{ex.text}\t{ex.label}\n")


def read_schema(path) -> list[str]:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            name = line.strip()
            if name and not name.startswith("#"):
                labels.append(name)
    if len(labels) < 2 or len(set(labels)) != len(labels):
        raise DataError(f"{path}: schema needs at least 2 unique labels")
    return labels


def write_schema(labels, path):
    with open(path, "w", encoding="utf-8") as fh:
        for name in labels:
            fh.write(name + "\n")


def largest_remainder(total: int, fractions) -> list[int]:
    """Integer apportionment: floors plus extras to the largest remainders."""
    if total < 0:
        raise ValueError("total must be nonnegative")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must sum to 1")
    raw = [total * f for f in fractions]
    floors = [math.floor(x) for x in raw]
    order = sorted(range(len(fractions)), key=lambda i: (floors[i] - raw[i], i))
    for i in order[: total - sum(floors)]:
        floors[i] += 1
    return floors


def split_dataset(examples, schema, seed: int, fractions=SPLIT_FRACTIONS):
    """Stratified train/dev/test partition.

    Global split sizes follow largest-remainder rounding of the fractions
    (so they are exact). Within each class, every split receives the floor
    of its proportional share; the leftover examples go to the splits each
    class's remainders favor most, capped by the global sizes. The result is
    a partition with exact global sizes and per-class counts within one of
    proportional.
    """
    n = len(examples)
    if n < 2 * len(schema):
        raise DataError(f"dataset too small to split: {n} examples, {len(schema)} classes")
    targets = largest_remainder(n, fractions)
    by_class = {name: [] for name in schema}
    for i, ex in enumerate(examples):
        if ex.label not in by_class:
            raise DataError(f"example '{ex.id}' has label outside the schema")
        by_class[ex.label].append(i)

    num_splits = len(fractions)
    floors = {}
    extras = []  # (negative remainder, class order, split) for greedy assignment
    deficit = list(targets)
    for ci, name in enumerate(schema):
        m = len(by_class[name])
        raw = [m * f for f in fractions]
        fl = [math.floor(x) for x in raw]
        floors[name] = fl
        for s in range(num_splits):
            deficit[s] -= fl[s]
            extras.append((fl[s] - raw[s], ci, s))
    need = {name: len(by_class[name]) - sum(floors[name]) for name in schema}
    # largest remainders first; a split only accepts extras while its global
    # target still has room, which keeps the totals exact
    for _, ci, s in sorted(extras):
        name = schema[ci]
        if need[name] > 0 and deficit[s] > 0:
            floors[name][s] += 1
            need[name] -= 1
            deficit[s] -= 1

    rng = np.random.default_rng(np.random.SeedSequence([seed, RNG_TAG_SPLIT]))
    assigned = [[] for _ in range(num_splits)]
    for name in schema:
        idx = np.array(by_class[name], dtype=np.int64)
        rng.shuffle(idx)
        start = 0
        for s in range(num_splits):
            assigned[s].extend(idx[start : start + floors[name][s]].tolist())
            start += floors[name][s]
    return tuple([examples[i] for i in sorted(part)] for part in assigned)


def few_shot_sample(train, schema, shots: int, seed: int) -> FewShotView:
    """Sample exactly ``shots`` labeled examples per class; the rest become
    the unlabeled pool with labels hidden."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    by_class = {name: [] for name in schema}
    for i, ex in enumerate(train):
        if ex.label not in by_class:
            raise DataError(f"example '{ex.id}' has label outside the schema")
        by_class[ex.label].append(i)
    rng = np.random.default_rng(np.random.SeedSequence([seed, RNG_TAG_FEWSHOT]))
    chosen = set()
    labeled = []
    for name in schema:
        pool = by_class[name]
        if len(pool) < shots:
            raise DataError(f"class '{name}' has only {len(pool)} train examples, need {shots}")
        pick = rng.choice(len(pool), size=shots, replace=False)
        for j in sorted(int(p) for p in pick):
            labeled.append(train[pool[j]])
            chosen.add(pool[j])
    unlabeled = []
    hidden = {}
    for i, ex in enumerate(train):
        if i not in chosen:
            unlabeled.append(Example(ex.id, ex.text, None))
            hidden[ex.id] = ex.label
    return FewShotView(tuple(labeled), tuple(unlabeled), hidden)


def plan_batches(num_labeled: int, num_unlabeled: int, batch_size: int, ratio: int, seed: int):
    """Endless per-step index batches.

    Labeled indices are drawn with replacement (the labeled pool is tiny).
    Unlabeled indices cycle through a per-epoch shuffle so each example is
    visited once per epoch. Fully determined by the seed.
    """
    if num_labeled < 1:
        raise ValueError("labeled pool is empty")
    if batch_size < 1 or ratio < 1:
        raise ValueError("batch_size and ratio must be positive")
    rng_lab = np.random.default_rng(np.random.SeedSequence([seed, RNG_TAG_LABELED_PLAN]))
    rng_unl = np.random.default_rng(np.random.SeedSequence([seed, RNG_TAG_UNLABELED_PLAN]))
    need = batch_size * ratio
    order = np.zeros(0, dtype=np.int64)
    cursor = 0
    while True:
        lab = rng_lab.integers(0, num_labeled, size=batch_size)
        if num_unlabeled > 0:
            pieces = []
            remaining = need
            while remaining > 0:
                if cursor >= len(order):
                    order = rng_unl.permutation(num_unlabeled)
                    cursor = 0
                grab = min(remaining, len(order) - cursor)
                pieces.append(order[cursor : cursor + grab])
                cursor += grab
                remaining -= grab
            unl = np.concatenate(pieces)
        else:
            unl = np.zeros(0, dtype=np.int64)
        yield lab, unl


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

SYNTH_CLASS_VOCAB = 20
SYNTH_CLASS_TOKENS = 9
SYNTH_NOISE_TOKENS = 6


def synthetic_schema(num_classes: int) -> list[str]:
    return [f"c{k}" for k in range(num_classes)]


def synthetic_lexicon_entries(num_classes: int, noise_vocab: int) -> dict[str, list[str]]:
    """Pair each generated token with its neighbor (0<->1, 2<->3, ...) so
    synonym replacement swaps within the same class vocabulary."""
    entries = {}
    for c in range(num_classes):
        for i in range(SYNTH_CLASS_VOCAB):
            j = i ^ 1
            if j < SYNTH_CLASS_VOCAB:
                entries[f"t{c}_{i}"] = [f"t{c}_{j}"]
    for i in range(noise_vocab):
        j = i ^ 1
        if j < noise_vocab:
            entries[f"n{i}"] = [f"n{j}"]
    return entries


def synthetic_split(
    num_classes: int,
    size: int,
    seed: int,
    split_tag: str,
    split_index: int,
    label_noise: float = 0.0,
    skew: float = 1.0,
    noise_vocab: int = 50,
    token_shift: int = 0,
) -> list[Example]:
    """Generate one split of token-pattern classification data.

    Each example is 15 tokens: 9 drawn from its class's 20-token vocabulary
    with a rank-skewed distribution, 6 from a shared noise vocabulary.
    ``label_noise`` flips that fraction of labels to a random other class
    (the tokens keep reflecting the original class). ``token_shift`` rotates
    which class tokens are frequent, for distribution-shift experiments.

    Label flips come from a separate stream, so the same seed produces the
    same texts at every noise rate; only the labels change.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must be in [0, 1)")
    if noise_vocab < 1 or size < 0:
        raise ValueError("bad synthetic sizes")
    text_seq, flip_seq = np.random.SeedSequence([seed, RNG_TAG_SYNTH, split_index]).spawn(2)
    rng = np.random.default_rng(text_seq)
    flip_rng = np.random.default_rng(flip_seq)
    counts = largest_remainder(size, [1.0 / num_classes] * num_classes)
    labels = np.repeat(np.arange(num_classes), counts)
    rng.shuffle(labels)
    ranks = np.arange(SYNTH_CLASS_VOCAB, dtype=np.float64)
    weights = (ranks + 1.0) ** (-skew)
    weights /= weights.sum()
    out = []
    for i, true_class in enumerate(labels):
        picks = rng.choice(SYNTH_CLASS_VOCAB, size=SYNTH_CLASS_TOKENS, p=weights)
        tokens = [f"t{true_class}_{(r + token_shift) % SYNTH_CLASS_VOCAB}" for r in picks]
        tokens += [f"n{j}" for j in rng.integers(0, noise_vocab, size=SYNTH_NOISE_TOKENS)]
        order = rng.permutation(len(tokens))
        text = " ".join(tokens[k] for k in order)
        label = int(true_class)
        if label_noise > 0.0 and flip_rng.random() < label_noise:
            label = int((label + 1 + flip_rng.integers(0, num_classes - 1)) % num_classes)
        out.append(Example(f"{split_tag}-{i:05d}", text, f"c{label}"))
    return out


def synthetic_dataset(
    num_classes: int,
    train_size: int,
    dev_size: int,
    test_size: int,
    seed: int,
    label_noise: float = 0.0,
    skew: float = 1.0,
    noise_vocab: int = 50,
    token_shift: int = 0,
):
    """Three clean-labeled splits except for train, which carries the noise."""
    common = dict(skew=skew, noise_vocab=noise_vocab, token_shift=token_shift)
    train = synthetic_split(num_classes, train_size, seed, "train", 0, label_noise=label_noise, **common)
    dev = synthetic_split(num_classes, dev_size, seed, "dev", 1, **common)
    test = synthetic_split(num_classes, test_size, seed, "test", 2, **common)
    return train, dev, test
