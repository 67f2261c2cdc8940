"""Synthetic dialogues with one known relevant utterance per example.

Token pools are disjoint: keywords (``k*``) only ever occur in the relevant
utterance and the response, distractor words (``d*``) fill every other
utterance and pad the relevant one. The response echoes the relevant
utterance's keywords, in order, after a fixed template word.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

TEMPLATE = "echo"


@dataclass
class SynthSpec:
    num_examples: int = 50
    n_utterances: int = 4
    vocab_size: int = 60
    distractor_ratio: float = 0.5
    seed: int = 0
    keywords: int = 3
    min_len: int = 4
    max_len: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def noise_tokens(self) -> int:
        """Distractor words mixed into the relevant utterance."""
        r = self.distractor_ratio
        return int(round(self.keywords * r / (1.0 - r)))

    def validate(self, pad_len: int = 30) -> None:
        if self.num_examples < 1:
            raise ValueError("num_examples must be >= 1")
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")
        if self.vocab_size < 20:
            raise ValueError("vocab_size must be >= 20")
        if not 0.0 <= self.distractor_ratio < 1.0:
            raise ValueError("distractor_ratio must lie in [0, 1)")
        if self.keywords < 1 or not 1 <= self.min_len <= self.max_len:
            raise ValueError("need keywords >= 1 and 1 <= min_len <= max_len")
        k_pool, d_pool = pool_sizes(self.vocab_size)
        if self.keywords > k_pool:
            raise ValueError(f"keyword pool of {k_pool} cannot supply {self.keywords} distinct keywords")
        if self.keywords + self.noise_tokens > pad_len or self.max_len > pad_len:
            raise ValueError(f"utterances would exceed the padding length {pad_len}")


def pool_sizes(vocab_size: int) -> tuple[int, int]:
    content = vocab_size - 1  # template word
    k_pool = content // 2
    return k_pool, content - k_pool


def synth_corpus(spec: SynthSpec) -> list[dict]:
    """Generate records with ``context``, ``response`` and ``relevance_labels``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k_pool, d_pool = pool_sizes(spec.vocab_size)
    keywords = [f"k{i}" for i in range(k_pool)]
    distractors = [f"d{i}" for i in range(d_pool)]
    records = []
    for _ in range(spec.num_examples):
        relevant = int(rng.integers(spec.n_utterances))
        context = []
        for slot in range(spec.n_utterances):
            if slot == relevant:
                kws = [keywords[j] for j in rng.choice(k_pool, size=spec.keywords, replace=False)]
                noise = [distractors[j] for j in rng.integers(d_pool, size=spec.noise_tokens)]
                words = kws + noise
                order = rng.permutation(len(words))
                utt = [words[j] for j in order]
                echoed = [w for w in utt if w.startswith("k")]
                response = " ".join([TEMPLATE] + echoed)
            else:
                utt = [distractors[j] for j in rng.integers(d_pool, size=int(rng.integers(spec.min_len, spec.max_len + 1)))]
            context.append(" ".join(utt))
        labels = [slot == relevant for slot in range(spec.n_utterances)]
        records.append({"context": context, "response": response, "relevance_labels": labels})
    return records
