"""Tokenization, vocabulary, synonym lexicon, and text augmentation.

The tokenizer is a small social-media normalizer: lowercasing, URL and
mention placeholders, hashtag unwrapping, edge punctuation stripping. The
augmenter implements two easy-data-augmentation ops (synonym replacement and
random swap) driven by an injected rng so every augmented copy is a pure
function of (seed, example id, copy index).
"""

from __future__ import annotations

import hashlib
import math
import random
import string

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
URL_TOKEN = "<url>"
USER_TOKEN = "<user>"
EMPTY_TOKEN = "<empty>"

PAD_ID = 0
UNK_ID = 1

EDIT_FRACTION = 0.1

_EDGE_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Normalize raw text to a list of tokens.

    Lowercase, split on whitespace, map URLs to <url> and mentions to
    <user>, unwrap hashtags, strip punctuation from token edges. Never
    returns an empty list; text with no surviving tokens yields [<empty>].
    """
    out = []
    for raw in text.lower().split():
        if raw.startswith(("http://", "https://", "www.")):
            out.append(URL_TOKEN)
            continue
        if raw.startswith("@") and len(raw) > 1:
            out.append(USER_TOKEN)
            continue
        tok = raw.lstrip("#").strip(_EDGE_PUNCT)
        if tok:
            out.append(tok)
    return out or [EMPTY_TOKEN]


class Vocab:
    """Token table with reserved padding (0) and unknown (1) ids."""

    def __init__(self, id_to_token: list[str]):
        if id_to_token[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must start with the pad and unk tokens")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocab")

    def __len__(self):
        return len(self.id_to_token)

    @classmethod
    def build(cls, token_lists, min_count: int = 1, max_size: int | None = None) -> "Vocab":
        """Build from tokenized texts: count, filter, sort by (-count, token)."""
        counts: dict[str, int] = {}
        for tokens in token_lists:
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
        kept = sorted(
            (t for t, c in counts.items() if c >= min_count and t not in (PAD_TOKEN, UNK_TOKEN)),
            key=lambda t: (-counts[t], t),
        )
        table = [PAD_TOKEN, UNK_TOKEN] + kept
        if max_size is not None:
            if max_size < 2:
                raise ValueError("max_size must leave room for the special tokens")
            table = table[:max_size]
        return cls(table)

    def encode(self, tokens: list[str], max_len: int) -> tuple[np.ndarray, int]:
        """Map tokens to a fixed-length id row plus its unpadded length."""
        if max_len < 1:
            raise ValueError("max_len must be at least 1")
        clipped = tokens[:max_len]
        ids = np.full(max_len, PAD_ID, dtype=np.int64)
        for i, t in enumerate(clipped):
            ids[i] = self.token_to_id.get(t, UNK_ID)
        return ids, len(clipped)

    def encode_batch(self, token_lists, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        rows = []
        lengths = []
        for tokens in token_lists:
            ids, n = self.encode(tokens, max_len)
            rows.append(ids)
            lengths.append(n)
        return np.stack(rows), np.array(lengths, dtype=np.int64)


def encode_dynamic(vocab: "Vocab", token_lists, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode a batch padded to its own longest sentence, capped at ``cap``.

    Padding width changes nothing downstream (pooling is masked); keeping it
    tight keeps the embedding pass proportional to real content.
    """
    if not token_lists:
        raise ValueError("empty batch")
    width = max(1, min(cap, max(len(t) for t in token_lists)))
    return vocab.encode_batch(token_lists, width)


class SynonymLexicon:
    """word -> candidate replacements, loaded from a tab-separated file.

    Format: one headword per line, ``word<TAB>syn1,syn2,...``. Lines that
    are blank or start with '#' are skipped. A repeated headword overrides
    the earlier entry.
    """

    def __init__(self, entries: dict[str, list[str]]):
        self.entries = {w: list(syns) for w, syns in entries.items() if syns}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def synonyms(self, word: str) -> list[str]:
        return self.entries.get(word, [])

    @classmethod
    def from_lines(cls, lines, origin: str = "<lexicon>") -> "SynonymLexicon":
        entries: dict[str, list[str]] = {}
        for lineno, line in enumerate(lines, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{origin}:{lineno}: expected 'word<TAB>synonyms'")
            word = parts[0].strip()
            syns = [s.strip() for s in parts[1].split(",") if s.strip()]
            if not word or not syns:
                raise ValueError(f"{origin}:{lineno}: empty word or synonym list")
            entries[word] = syns
        return cls(entries)

    @classmethod
    def load(cls, path) -> "SynonymLexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh, str(path))


def edit_count(num_tokens: int) -> int:
    """Number of edit operations for a sentence: 10% of length, rounded
    half-up, never below 1."""
    return max(1, math.floor(EDIT_FRACTION * num_tokens + 0.5))


def synonym_replace(tokens: list[str], n: int, lexicon: SynonymLexicon, rng: random.Random) -> list[str]:
    """Replace up to n tokens that have lexicon entries with a random synonym.

    Positions are sampled without replacement from the lexicon-covered ones;
    tokens with no entry are never touched. Pure function of the rng state.
    """
    out = list(tokens)
    candidates = [i for i, t in enumerate(out) if t in lexicon]
    if not candidates:
        return out
    for i in sorted(rng.sample(candidates, min(n, len(candidates)))):
        out[i] = rng.choice(lexicon.synonyms(out[i]))
    return out


def random_swap(tokens: list[str], n: int, rng: random.Random) -> list[str]:
    """Swap two distinct positions, n times. Identity for length < 2."""
    out = list(tokens)
    if len(out) < 2:
        return out
    for _ in range(n):
        i, j = rng.sample(range(len(out)), 2)
        out[i], out[j] = out[j], out[i]
    return out


def augment(tokens: list[str], lexicon: SynonymLexicon, rng: random.Random) -> list[str]:
    """One augmented copy: a fair coin picks synonym replacement or random
    swap, with the edit budget tied to sentence length."""
    n = edit_count(len(tokens))
    if rng.random() < 0.5:
        return synonym_replace(tokens, n, lexicon, rng)
    return random_swap(tokens, n, rng)


def augmentation_rng(seed: int, example_id: str, copy_index) -> random.Random:
    """Deterministic per-copy rng: independent streams keyed on the run seed,
    the example identity, and the copy index (any hashable repr-stable tag)."""
    material = repr((seed, example_id, copy_index)).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))
