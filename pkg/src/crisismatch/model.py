"""The classifier: embedding, masked mean pooling, residual tanh blocks,
affine head, softmax. Plus a deterministic checkpoint format.

The forward pass can be cut at any block boundary: ``forward_hidden`` runs
the front of the network up to a layer index and ``forward_output`` resumes
from there. Layer index 0 is the pooled embedding; index ``num_blocks`` is
the final hidden state. Running the two halves back to back performs exactly
the same operations as a full forward, so the decomposition is bit-identical
for any cut point. Hidden-state interpolation plugs in between the halves.
"""

from __future__ import annotations

import json

import numpy as np

from .numkit import (
    Affine,
    EmbeddingLookup,
    MaskedMeanPool,
    ResidualTanhBlock,
    SoftmaxHead,
)
from .textprep import Vocab

CHECKPOINT_FORMAT = 1

# rng stream tag for parameter init; other modules use 102-107 for their
# streams so adding draws to one never shifts another
RNG_TAG_INIT = 101


class TextClassifier:
    """Small residual text classifier over pooled token embeddings."""

    def __init__(
        self,
        vocab_size: int,
        num_classes: int,
        embed_dim: int,
        num_blocks: int,
        rng: np.random.Generator,
    ):
        if vocab_size < 2:
            raise ValueError("vocab_size must cover the special tokens")
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        if embed_dim < 1 or num_blocks < 0:
            raise ValueError("bad model dimensions")
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.num_blocks = num_blocks
        # creation order fixes the rng draw order and the checkpoint layout
        self.embedding = EmbeddingLookup("embedding", vocab_size, embed_dim, rng)
        self.pool = MaskedMeanPool()
        self.blocks = [ResidualTanhBlock(f"block{i}", embed_dim, rng) for i in range(num_blocks)]
        self.head = Affine("head", embed_dim, num_classes, rng)
        self.softmax = SoftmaxHead()

    @property
    def params(self):
        out = list(self.embedding.params)
        for b in self.blocks:
            out.extend(b.params)
        out.extend(self.head.params)
        return out

    def _check_layer(self, layer: int):
        if not 0 <= layer <= self.num_blocks:
            raise ValueError(f"layer must be in [0, {self.num_blocks}], got {layer}")

    def forward_hidden(self, ids: np.ndarray, lengths: np.ndarray, layer: int):
        """Embed, pool, and apply the first ``layer`` blocks."""
        self._check_layer(layer)
        vecs, emb_cache = self.embedding.forward(ids)
        h, pool_cache = self.pool.forward(vecs, lengths)
        block_caches = []
        for b in self.blocks[:layer]:
            h, c = b.forward(h)
            block_caches.append(c)
        return h, (emb_cache, pool_cache, block_caches)

    def forward_output(self, h: np.ndarray, layer: int):
        """Apply blocks ``layer``..end, the head, and the softmax."""
        self._check_layer(layer)
        block_caches = []
        for b in self.blocks[layer:]:
            h, c = b.forward(h)
            block_caches.append(c)
        logits, head_cache = self.head.forward(h)
        probs, sm_cache = self.softmax.forward(logits)
        return probs, (block_caches, head_cache, sm_cache)

    def backward_output(self, cache, grad_probs: np.ndarray) -> np.ndarray:
        """Back through softmax, head, and the rear blocks; returns the
        gradient at the cut point."""
        block_caches, head_cache, sm_cache = cache
        d = self.softmax.backward(sm_cache, grad_probs)
        d = self.head.backward(head_cache, d)
        layer = len(self.blocks) - len(block_caches)
        for b, c in zip(reversed(self.blocks[layer:]), reversed(block_caches)):
            d = b.backward(c, d)
        return d

    def backward_hidden(self, cache, grad_hidden: np.ndarray):
        """Back through the front blocks, the pool, and the embedding."""
        emb_cache, pool_cache, block_caches = cache
        d = grad_hidden
        for b, c in zip(reversed(self.blocks[: len(block_caches)]), reversed(block_caches)):
            d = b.backward(c, d)
        d = self.pool.backward(pool_cache, d)
        self.embedding.backward(emb_cache, d)

    def forward(self, ids: np.ndarray, lengths: np.ndarray):
        h, front = self.forward_hidden(ids, lengths, self.num_blocks)
        probs, rear = self.forward_output(h, self.num_blocks)
        return probs, (front, rear)

    def backward(self, cache, grad_probs: np.ndarray):
        front, rear = cache
        dh = self.backward_output(rear, grad_probs)
        self.backward_hidden(front, dh)

    def predict_proba(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return self.forward(ids, lengths)[0]

    def predict(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(ids, lengths), axis=-1)


class CheckpointBundle:
    """Everything needed to run a saved model on new text."""

    def __init__(self, model: TextClassifier, vocab: Vocab, labels: list[str], meta: dict):
        self.model = model
        self.vocab = vocab
        self.labels = labels
        self.meta = meta


def save_checkpoint(path, model: TextClassifier, vocab: Vocab, labels: list[str], meta: dict | None = None):
    """Write one JSON header line plus raw little-endian float64 parameters.

    The format carries no timestamps, so identical state produces identical
    bytes.
    """
    if len(labels) != model.num_classes:
        raise ValueError(f"{len(labels)} labels for a {model.num_classes}-class head")
    header = {
        "format": CHECKPOINT_FORMAT,
        "embed_dim": model.embed_dim,
        "num_blocks": model.num_blocks,
        "num_classes": model.num_classes,
        "labels": list(labels),
        "vocab": list(vocab.id_to_token),
        "meta": dict(meta or {}),
        "params": [{"name": p.name, "shape": list(p.value.shape)} for p in model.params],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for p in model.params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> CheckpointBundle:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {header.get('format')!r}")
    vocab = Vocab(header["vocab"])
    model = TextClassifier(
        vocab_size=len(vocab),
        num_classes=header["num_classes"],
        embed_dim=header["embed_dim"],
        num_blocks=header["num_blocks"],
        rng=np.random.default_rng(0),
    )
    offset = 0
    for p, entry in zip(model.params, header["params"]):
        if p.name != entry["name"] or list(p.value.shape) != entry["shape"]:
            raise ValueError(f"checkpoint layout mismatch at '{entry['name']}'")
        n = int(np.prod(entry["shape"])) * 8
        p.value[...] = np.frombuffer(blob[offset : offset + n], dtype="<f8").reshape(entry["shape"])
        offset += n
    if offset != len(blob):
        raise ValueError("checkpoint payload size mismatch")
    return CheckpointBundle(model, vocab, header["labels"], header["meta"])


def build_model(vocab: Vocab, num_classes: int, embed_dim: int, num_blocks: int, seed: int) -> TextClassifier:
    """Deterministic initialization from a seed, on its own rng stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, RNG_TAG_INIT]))
    return TextClassifier(len(vocab), num_classes, embed_dim, num_blocks, rng)
