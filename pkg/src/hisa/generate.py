"""Greedy and beam-search response generation (full recomputation per step)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .encoder import EncodedContext
from .model import HisaModel
from .vocab import BOS, EOS

MAX_BEAM = 8


@dataclass
class Generated:
    tokens: list[int]  # without BOS / EOS
    log_prob: float  # total log-probability, EOS included when emitted
    ended: bool  # True if EOS was produced before max_len


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _next_log_probs(model: HisaModel, ctx: EncodedContext, prefixes: np.ndarray) -> np.ndarray:
    logits = model.decode(prefixes, ctx).data[:, -1, :]
    return _log_softmax_rows(logits.astype(np.float64))


def _cap(model: HisaModel, max_len: int) -> int:
    # the last decoding step sees BOS plus max_len - 1 tokens
    if max_len < 1:
        raise ValueError("max_len must be positive")
    return min(max_len, model.config.max_positions)


def greedy(model: HisaModel, context: Sequence[Sequence[int]], max_len: int = 30) -> Generated:
    max_len = _cap(model, max_len)
    with no_grad():
        ctx = model.encode([context])
        prefix = [BOS]
        total = 0.0
        for _ in range(max_len):
            lp = _next_log_probs(model, ctx, np.array([prefix]))[0]
            tok = int(np.argmax(lp))
            total = total + float(lp[tok])
            prefix.append(tok)
            if tok == EOS:
                return Generated(prefix[1:-1], total, True)
    return Generated(prefix[1:], total, False)


def beam_search(model: HisaModel, context: Sequence[Sequence[int]], beam: int = 4, max_len: int = 30) -> Generated:
    """Length-normalised beam search.

    ``max_len`` is capped at the model's word-position capacity, as in :func:`greedy`.

    Each step ranks all extensions of the live hypotheses by cumulative
    log-probability and keeps the best ``beam - finished`` of them; an
    extension ending in EOS (or reaching ``max_len``) leaves the beam. The
    winner maximises cumulative log-probability divided by its token count.
    """
    if not 1 <= beam <= MAX_BEAM:
        raise ValueError(f"beam width must be in [1, {MAX_BEAM}]")
    max_len = _cap(model, max_len)
    with no_grad():
        base = model.encode([context])
        live: list[tuple[float, list[int]]] = [(0.0, [BOS])]
        finished: list[tuple[float, list[int], bool]] = []
        for step in range(max_len):
            ctx = base if len(live) == 1 else base.repeat(len(live))
            lp = _next_log_probs(model, ctx, np.array([p for _, p in live]))
            scores = np.array([s for s, _ in live])[:, None] + lp
            flat_scores = scores.reshape(-1)
            flat_lp = lp.reshape(-1)
            # cumulative score, then step log-prob, then lowest index
            order = np.lexsort((np.arange(flat_scores.size), -flat_lp, -flat_scores))
            budget = beam - len(finished)
            vocab = lp.shape[1]
            new_live = []
            for flat in order[:budget]:
                h, tok = divmod(int(flat), vocab)
                score = live[h][0] + float(lp[h, tok])
                seq = live[h][1] + [tok]
                if tok == EOS:
                    finished.append((score, seq, True))
                elif step == max_len - 1:
                    finished.append((score, seq, False))
                else:
                    new_live.append((score, seq))
            live = new_live
            if not live:
                break
    best = max(finished, key=lambda f: f[0] / (len(f[1]) - 1))
    score, seq, ended = best
    return Generated(seq[1:-1] if ended else seq[1:], score, ended)


def generate(
    context: Sequence[Sequence[int]],
    model: HisaModel,
    mode: str = "greedy",
    beam: int = 1,
    max_len: int = 30,
) -> Generated:
    if mode == "greedy":
        return greedy(model, context, max_len)
    if mode == "beam":
        return beam_search(model, context, beam, max_len)
    raise ValueError(f"unknown generation mode {mode!r}")
