"""Globally distant supervision: the relevance target and the training losses.

The relevance target over context utterances is a softmax of dot products
between sentence embeddings of each utterance and the response. Sentence
embeddings come from :class:`SentenceEmbedder`, a deterministic
bag-of-words encoder over seeded random word vectors.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, gather_last, log_softmax, softmax
from .decoder import AttentionTrace, extract_q_distribution
from .errors import ShapeError
from .vocab import BOS, EOS, PAD, Vocabulary

Q_FLOOR = 1e-12
_SKIP_IDS = (PAD, BOS, EOS)


def _token_seed(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


class SentenceEmbedder:
    """L2-normalised (optionally idf-weighted) mean of fixed word vectors.

    Word vectors are drawn per token string from ``(seed, hash(token))``, so a
    token's vector does not depend on which vocabulary it sits in.
    """

    def __init__(self, table: np.ndarray, method: str = "mean", seed: int | None = None, idf: np.ndarray | None = None):
        self.table = np.asarray(table, dtype=np.float64)
        self.method = method
        self.seed = seed
        self.idf = None if idf is None else np.asarray(idf, dtype=np.float64)
        if self.idf is not None and self.idf.shape != (self.table.shape[0],):
            raise ShapeError("idf table must have one weight per vocabulary entry")

    @classmethod
    def from_vocab(cls, vocab: Vocabulary, seed: int = 0, dim: int = 64) -> "SentenceEmbedder":
        rows = [np.random.default_rng([seed, _token_seed(t)]).standard_normal(dim) for t in vocab.tokens]
        table = np.stack(rows) / math.sqrt(dim)
        return cls(table, method="mean", seed=seed)

    def with_idf(self, documents: Iterable[Sequence[int]]) -> "SentenceEmbedder":
        """Copy of this embedder weighting each word by smoothed inverse document frequency."""
        df = Counter()
        n_docs = 0
        for doc in documents:
            n_docs += 1
            df.update(set(int(i) for i in doc))
        v = self.table.shape[0]
        counts = np.array([df.get(i, 0) for i in range(v)], dtype=np.float64)
        idf = np.log((1.0 + n_docs) / (1.0 + counts)) + 1.0
        return SentenceEmbedder(self.table, method="idf-mean", seed=self.seed, idf=idf)

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def metadata(self) -> dict:
        return {"method": self.method, "seed": self.seed, "dim": self.dim}

    def word_vectors(self, tokens: Sequence[int]) -> np.ndarray:
        ids = [int(t) for t in tokens if int(t) not in _SKIP_IDS]
        return self.table[ids] if ids else np.zeros((0, self.dim))


def embed_sentence(tokens: Sequence[int], embedder: SentenceEmbedder) -> np.ndarray:
    """Sentence vector ``[d_s]``; PAD/BOS/EOS ids are ignored."""
    ids = np.asarray([int(t) for t in tokens if int(t) not in _SKIP_IDS], dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot embed a sentence with no content tokens")
    vecs = embedder.table[ids]
    if embedder.idf is None:
        mean = vecs.mean(axis=0)
    else:
        w = embedder.idf[ids]
        mean = (w[:, None] * vecs).sum(axis=0) / w.sum()
    norm = np.linalg.norm(mean)
    return mean / norm if norm > 0 else mean


@dataclass
class GdsTarget:
    p: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if (self.p < 0).any() or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError("distant-supervision target must be a probability vector")

    def __len__(self) -> int:
        return len(self.p)


def selection_probability(dots: np.ndarray) -> np.ndarray:
    z = np.asarray(dots, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def gds_target(context: Sequence[Sequence[int]], response: Sequence[int], embedder: SentenceEmbedder) -> GdsTarget:
    """Softmax over utterance-response embedding dot products."""
    if not context:
        raise ShapeError("relevance target needs at least one context utterance")
    y = embed_sentence(response, embedder)
    dots = np.array([embed_sentence(u, embedder) @ y for u in context])
    return GdsTarget(selection_probability(dots))


# ------------------------------------------------------------------- losses
def _batched(logits: Tensor, targets=None, mask=None):
    single = logits.ndim == 2
    if single:
        logits = logits.reshape(1, *logits.shape)
    if targets is not None:
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim == 1:
            targets = targets[None, :]
        if targets.shape != logits.shape[:2]:
            raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape[:2]}")
    if mask is None:
        mask = targets != PAD if targets is not None else np.ones(logits.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    lengths = mask.sum(axis=1)
    if logits.shape[1] == 0 or (lengths == 0).any():
        raise ShapeError("loss over a response with no target positions")
    weights = mask / lengths[:, None] / mask.shape[0]
    return logits, targets, Tensor(weights, dtype=logits.dtype)


def mle_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Length-normalised negative log-likelihood, averaged over the batch.

    ``logits``: ``[T, V]`` or ``[B, T, V]``. PAD targets are excluded unless an
    explicit ``mask`` is given.
    """
    logits, targets, w = _batched(logits, targets, mask)
    logp = gather_last(log_softmax(logits, axis=-1), targets)
    return -(logp * w).sum()


def mce_loss(logits: Tensor, mask=None) -> Tensor:
    """Time-averaged ``sum_w p log p`` (negative entropy; always <= 0)."""
    logits, _, w = _batched(logits, None, mask)
    neg_ent = (softmax(logits, axis=-1) * log_softmax(logits, axis=-1)).sum(axis=-1)
    return (neg_ent * w).sum()


def kl_loss(p, q) -> Tensor:
    """``KL(p || q)`` with ``0 log 0 = 0`` and ``q`` floored at 1e-12.

    ``p`` is a constant target ``[n]`` or ``[B, n]``; ``q`` may be a Tensor
    (differentiable) or array of the same shape. Batched input is averaged.
    """
    p = np.asarray(p.p if isinstance(p, GdsTarget) else p, dtype=np.float64)
    q = q if isinstance(q, Tensor) else Tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"KL operands differ in shape: {p.shape} vs {q.shape}")
    rows = p.shape[0] if p.ndim == 2 else 1
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    const = float(plogp.sum()) / rows
    cross = (q.clamp_min(Q_FLOOR).log() * Tensor(p / rows, dtype=q.dtype)).sum()
    return Tensor(const, dtype=q.dtype) - cross


@dataclass
class LossBreakdown:
    mle: float
    kl: float
    mce: float
    total: float
    eta1: float
    eta2: float
    tensor: Tensor | None = field(default=None, repr=False)
    q: np.ndarray | None = field(default=None, repr=False)

    def as_record(self) -> dict:
        return {"mle": self.mle, "kl": self.kl, "mce": self.mce, "total": self.total}


def combined_loss(batch, model, eta1: float = 1.0, eta2: float = 1.0) -> LossBreakdown:
    """One teacher-forced forward pass giving every loss term and their sum.

    ``batch`` must carry ``contexts``, ``decoder_input``, ``targets``,
    ``target_mask`` and the right-aligned relevance targets ``gds_p``.
    """
    ctx = model.encode(batch.contexts)
    trace = AttentionTrace(layers="last", target_mask=batch.target_mask)
    logits = model.decode(batch.decoder_input, ctx, trace)
    mle = mle_loss(logits, batch.targets, batch.target_mask)
    mce = mce_loss(logits, batch.target_mask)
    q = extract_q_distribution(trace, batch.target_mask)
    kl = kl_loss(batch.gds_p, q)
    total = mle + kl * eta1 + mce * eta2
    return LossBreakdown(
        mle=mle.item(),
        kl=kl.item(),
        mce=mce.item(),
        total=total.item(),
        eta1=eta1,
        eta2=eta2,
        tensor=total,
        q=q.data,
    )
