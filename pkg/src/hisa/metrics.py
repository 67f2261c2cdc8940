"""Automatic response metrics and the attention/relevance agreement analysis.

Metrics never raise on degenerate generations: empty or all-UNK inputs score 0
and are flagged in the per-example records. Corpus means use ``math.fsum`` so
scores do not depend on example order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .gds import SentenceEmbedder
from .vocab import BOS, EOS, PAD, UNK

_FILTER = (PAD, BOS, EOS, UNK)


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(hyp_len: int, refs: Sequence[Sequence]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def _bleu_stats(hyp: Sequence, refs: Sequence[Sequence]) -> list[int]:
    """``[match1, total1, match2, total2, hyp_len, ref_len]`` with clipped counts."""
    stats = []
    for n in (1, 2):
        counts = _ngrams(hyp, n)
        max_ref = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        stats += [sum(min(c, max_ref[g]) for g, c in counts.items()), max(len(hyp) - n + 1, 0)]
    return stats + [len(hyp), _closest_ref_len(len(hyp), refs)]


def _bleu_from_stats(m1, t1, m2, t2, c, r, smooth: bool) -> float:
    if c == 0:
        return 0.0
    if smooth:
        p1, p2 = (m1 + 1) / (t1 + 1), (m2 + 1) / (t2 + 1)
    else:
        if m1 == 0 or m2 == 0:
            return 0.0
        p1, p2 = m1 / t1, m2 / t2
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(0.5 * math.log(p1) + 0.5 * math.log(p2))


def bleu2(hypothesis: Sequence, references: Sequence[Sequence], smooth: bool = True) -> float:
    """Sentence BLEU-2: geometric mean of 1/2-gram clipped precisions times brevity penalty.

    With ``smooth`` both precisions are add-one smoothed, so a hypothesis sharing
    no word with the references still scores above 0; unsmoothed it scores 0.
    """
    if not hypothesis:
        return 0.0
    return _bleu_from_stats(*_bleu_stats(hypothesis, references), smooth=smooth)


def corpus_bleu2(hypotheses: Sequence[Sequence], references: Sequence[Sequence[Sequence]]) -> float:
    """Standard corpus BLEU-2: clipped counts summed over the corpus, unsmoothed."""
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in length")
    totals = np.zeros(6, dtype=np.int64)
    for h, refs in zip(hypotheses, references):
        totals += _bleu_stats(h, refs)
    return _bleu_from_stats(*totals.tolist(), smooth=False)


def distinct2(hypotheses: Sequence[Sequence]) -> float:
    """Unique bigrams over total bigrams across the corpus (0 when no bigrams)."""
    seen = set()
    total = 0
    for h in hypotheses:
        grams = [tuple(h[i : i + 2]) for i in range(len(h) - 1)]
        seen.update(grams)
        total += len(grams)
    return len(seen) / total if total else 0.0


def _word_vectors(tokens: Sequence[int], embedder: SentenceEmbedder) -> np.ndarray:
    ids = [int(t) for t in tokens if int(t) not in _FILTER]
    return embedder.table[ids] if ids else np.zeros((0, embedder.dim))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _extrema(vecs: np.ndarray) -> np.ndarray:
    idx = np.abs(vecs).argmax(axis=0)
    return vecs[idx, np.arange(vecs.shape[1])]


def _greedy_direction(a: np.ndarray, b: np.ndarray) -> float:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-300)
    return float((an @ bn.T).max(axis=1).mean())


def embedding_metrics(hypothesis: Sequence[int], reference: Sequence[int], embedder: SentenceEmbedder) -> dict:
    """Average, Extrema and Greedy embedding similarities; zeros if either side is empty."""
    h = _word_vectors(hypothesis, embedder)
    r = _word_vectors(reference, embedder)
    if len(h) == 0 or len(r) == 0:
        return {"average": 0.0, "extrema": 0.0, "greedy": 0.0}
    return {
        "average": _cosine(h.mean(axis=0), r.mean(axis=0)),
        "extrema": _cosine(_extrema(h), _extrema(r)),
        "greedy": 0.5 * (_greedy_direction(h, r) + _greedy_direction(r, h)),
    }


def coherence(context: Sequence[Sequence[int]], hypothesis: Sequence[int], embedder: SentenceEmbedder) -> float:
    """Cosine between the pooled bag of all context words and the hypothesis."""
    c = _word_vectors([t for u in context for t in u], embedder)
    h = _word_vectors(hypothesis, embedder)
    if len(c) == 0 or len(h) == 0:
        return 0.0
    return _cosine(_pool(c, [t for u in context for t in u], embedder), _pool(h, hypothesis, embedder))


def _pool(vecs: np.ndarray, tokens: Sequence[int], embedder: SentenceEmbedder) -> np.ndarray:
    if embedder.idf is None:
        return vecs.mean(axis=0)
    ids = [int(t) for t in tokens if int(t) not in _FILTER]
    w = embedder.idf[ids]
    return (w[:, None] * vecs).sum(axis=0) / w.sum()


def attention_relevance_agreement(q_distributions: Sequence[np.ndarray], labels: Sequence[Sequence[bool]]) -> dict:
    """How well utterance-selection distributions agree with relevance labels.

    ``argmax_accuracy``: share of examples whose most-attended utterance is
    labelled relevant. ``mean_mass_on_relevant``: mean probability on labelled
    utterances.
    """
    if len(q_distributions) != len(labels):
        raise ValueError("distributions and labels differ in count")
    if not labels:
        raise ValueError("no examples")
    hits, masses = [], []
    for q, lab in zip(q_distributions, labels):
        q = np.asarray(q, dtype=np.float64)
        lab = np.asarray(lab, dtype=bool)
        if q.shape != lab.shape:
            raise ValueError(f"distribution of length {q.shape} vs {lab.shape} labels")
        hits.append(1.0 if lab[int(np.argmax(q))] else 0.0)
        masses.append(float(q[lab].sum()))
    return {
        "argmax_accuracy": math.fsum(hits) / len(hits),
        "mean_mass_on_relevant": math.fsum(masses) / len(masses),
    }


# ------------------------------------------------------------------- report
METRICS = ("bleu2", "bleu2_smoothed", "distinct2", "average", "extrema", "greedy", "coherence")


@dataclass
class EvalReport:
    scores: dict[str, float]
    count: int
    config: dict
    flagged: int = 0
    per_example: list[dict] | None = field(default=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.per_example is None:
            d.pop("per_example")
        return d


def score_example(hyp, ref, context, embedder: SentenceEmbedder) -> dict:
    flags = []
    if not hyp:
        flags.append("empty_hypothesis")
    elif all(int(t) in _FILTER for t in hyp):
        flags.append("no_content_tokens")
    if len(hyp) < 2:
        flags.append("no_bigrams")
    rec = {
        "bleu2": corpus_bleu2([hyp], [[ref]]),
        "bleu2_smoothed": bleu2(hyp, [ref]),
        "distinct2": distinct2([hyp]),
        **embedding_metrics(hyp, ref, embedder),
        "coherence": coherence(context, hyp, embedder),
        "flags": flags,
    }
    return rec


def evaluate(
    hypotheses: Sequence[Sequence[int]],
    references: Sequence[Sequence[int]],
    contexts: Sequence[Sequence[Sequence[int]]],
    embedder: SentenceEmbedder,
    per_example: bool = False,
) -> EvalReport:
    if not (len(hypotheses) == len(references) == len(contexts)):
        raise ValueError("hypotheses, references and contexts must align")
    if not hypotheses:
        raise ValueError("nothing to evaluate")
    records = [score_example(h, r, c, embedder) for h, r, c in zip(hypotheses, references, contexts)]
    n = len(records)
    scores = {
        "bleu2": corpus_bleu2(hypotheses, [[r] for r in references]),
        "distinct2": distinct2(hypotheses),
    }
    for key in ("bleu2_smoothed", "average", "extrema", "greedy", "coherence"):
        scores[key] = math.fsum(r[key] for r in records) / n
    scores = {k: scores[k] for k in METRICS}
    return EvalReport(
        scores=scores,
        count=n,
        config={"embedder": embedder.metadata(), "bleu_smoothing": "add-one on 1-gram and 2-gram precision (sentence level)"},
        flagged=sum(1 for r in records if r["flags"]),
        per_example=records if per_example else None,
    )
