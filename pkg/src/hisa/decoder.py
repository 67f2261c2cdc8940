"""Hierarchical self-attention decoder layer and attention traces.

Each layer runs, for decoder states ``D`` ``[B, T, d]`` against an encoded
context ``E`` ``[B, n, L, d]``:

1. causal self-attention over ``D``                         -> ``M``  [B, T, d]
2. per-utterance word attention, query ``f_w(M)``            -> ``U``  [B, n, T, d]
3. ``U`` + utterance position rows, self-attention across the
   utterance axis independently for every position t        -> ``H``  [B, T, n, d]
4. attention of ``f_u(M)`` over the n slots of ``H``, then ``f_l`` -> ``C`` [B, T, d]
5. position-wise FFN                                         -> ``F``  [B, T, d]

and fuses ``F`` with the query utterance's word summary ``U[:, -1]`` through a
per-dimension sigmoid gate. All five sublayers are post-norm residual blocks;
sublayers 2 and 4 take their residual from the transformed query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    FfnParams,
    LayerNorm,
    Linear,
    MhaParams,
    PositionalEncoding,
    causal_mask,
    ffn,
    mha,
    sublayer_wrap,
)
from .autodiff import Tensor, concat
from .encoder import EncodedContext
from .errors import ShapeError
from .params import Module


class DecoderLayerParams(Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, rng, dtype):
        self.self_attn = MhaParams(d_model, heads, rng, dtype)
        self.norm_self = LayerNorm(d_model, dtype)
        self.f_w = Linear(d_model, d_model, rng, dtype)
        self.word_attn = MhaParams(d_model, heads, rng, dtype)
        self.norm_word = LayerNorm(d_model, dtype)
        self.utt_attn = MhaParams(d_model, heads, rng, dtype)
        self.norm_utt = LayerNorm(d_model, dtype)
        self.f_u = Linear(d_model, d_model, rng, dtype)
        self.wu_attn = MhaParams(d_model, heads, rng, dtype)
        self.f_l = Linear(d_model, d_model, rng, dtype)
        self.norm_wu = LayerNorm(d_model, dtype)
        self.ffn = FfnParams(d_model, d_ff, rng, dtype)
        self.norm_ffn = LayerNorm(d_model, dtype)
        self.gate = Linear(2 * d_model, d_model, rng, dtype)


@dataclass
class LayerTrace:
    """Attention weights of one decoder layer.

    ``word``: ``[B, n, h, T, L]`` per-utterance word attention (sublayer 2).
    ``utterance``: ``[B, T, h, n]`` word-utterance attention (sublayer 4).
    """

    word: Tensor | None = None
    utterance: Tensor | None = None

    def _set_word(self, w: Tensor) -> None:
        self.word = w

    def _set_utterance(self, w: Tensor) -> None:
        b, t, h, _, n = w.shape
        self.utterance = w.reshape(b, t, h, n)


@dataclass
class AttentionTrace:
    """Captured attention for the decoder layers listed in ``layers``.

    ``layers`` is ``"all"``, ``"last"`` or an explicit list of layer indices.
    The masks let per-example views drop padding slots, tokens and positions.
    """

    layers: object = "last"
    records: dict[int, LayerTrace] = field(default_factory=dict)
    utt_mask: np.ndarray | None = None
    token_mask: np.ndarray | None = None
    target_mask: np.ndarray | None = None

    def wants(self, index: int, total: int) -> bool:
        if self.layers == "all":
            return True
        if self.layers == "last":
            return index == total - 1
        return index in self.layers

    def sink(self, index: int) -> LayerTrace:
        rec = self.records[index] = LayerTrace()
        return rec

    def last(self) -> LayerTrace:
        if not self.records:
            raise ValueError("attention trace is empty")
        return self.records[max(self.records)]

    def _slots(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.utt_mask[b])

    def _length(self, b: int) -> int:
        if self.target_mask is None:
            return self.last().utterance.shape[1]
        return int(self.target_mask[b].sum())

    def utterance_weights(self, b: int = 0, layer: int | None = None) -> np.ndarray:
        """Per-head word-utterance weights ``[h, T_b, n_b]`` for example ``b``."""
        rec = self.last() if layer is None else self.records[layer]
        w = rec.utterance.data[b, : self._length(b)]
        return np.ascontiguousarray(w[:, :, self._slots(b)].transpose(1, 0, 2))

    def word_weights(self, b: int = 0, layer: int | None = None) -> list[np.ndarray]:
        """One ``[h, T_b, L_i]`` word-attention array per real utterance."""
        rec = self.last() if layer is None else self.records[layer]
        t = self._length(b)
        out = []
        for slot in self._slots(b):
            length = int(self.token_mask[b, slot].sum())
            out.append(np.ascontiguousarray(rec.word.data[b, slot, :, :t, :length]))
        return out


def decoder_layer(
    d_prev: Tensor,
    ctx: EncodedContext,
    params: DecoderLayerParams,
    upe: PositionalEncoding | None = None,
    trace: LayerTrace | None = None,
    gate_override: float | None = None,
    drop=None,
) -> Tensor:
    """One decoder layer; ``d_prev`` is ``[B, T, d]``. ``upe=None`` disables
    utterance position encoding. ``gate_override`` pins the fusion gate to a
    constant (test hook)."""
    if d_prev.ndim != 3:
        raise ShapeError(f"decoder input must be [B, T, d], got {d_prev.shape}")
    b, t, d = d_prev.shape
    if ctx.batch_size != b:
        raise ShapeError(f"context batch {ctx.batch_size} != decoder batch {b}")
    n = ctx.n_slots
    if n == 0 or not ctx.utt_mask.any(axis=1).all():
        raise ShapeError("decoder needs at least one context utterance per example")

    # 1. masked self-attention
    causal = causal_mask(t)
    m = sublayer_wrap(d_prev, lambda x: mha(x, x, x, params.self_attn, mask=causal), params.norm_self, drop)

    # 2. word-word attention inside every utterance
    qw = params.f_w(m).reshape(b, 1, t, d)
    word = mha(
        qw,
        ctx.states,
        ctx.states,
        params.word_attn,
        mask=ctx.key_mask[:, :, None, :],
        capture=trace._set_word if trace is not None else None,
    )
    if drop is not None:
        word = drop(word)
    u = params.norm_word(qw.expand(b, n, t, d) + word)

    # 3. utterance-level self-attention per decoding position
    u_tilde = u
    if upe is not None:
        u_tilde = u + Tensor(np.broadcast_to(_upe_rows(upe, ctx)[:, :, None, :], (b, n, t, d)), dtype=u.dtype)
    utt_keys = ctx.utt_mask[:, None, None, :]
    h = sublayer_wrap(
        u_tilde.swapaxes(1, 2),
        lambda x: mha(x, x, x, params.utt_attn, mask=utt_keys),
        params.norm_utt,
        drop,
    )

    # 4. word-utterance attention over the n slots of H
    qu = params.f_u(m).reshape(b, t, 1, d)
    sel = mha(
        qu,
        h,
        h,
        params.wu_attn,
        mask=utt_keys,
        capture=trace._set_utterance if trace is not None else None,
    )
    sel = params.f_l(sel)
    if drop is not None:
        sel = drop(sel)
    c = params.norm_wu(qu + sel).reshape(b, t, d)

    # 5. feed-forward
    f = sublayer_wrap(c, lambda x: ffn(x, params.ffn), params.norm_ffn, drop)

    # fusion gate with the query utterance's word-level summary
    u_query = u[:, -1]
    if gate_override is None:
        lam = params.gate(concat([u_query, f], axis=-1)).sigmoid()
    else:
        lam = Tensor(np.full((b, t, d), gate_override), dtype=f.dtype)
    return lam * f + (1.0 - lam) * u_query


def _upe_rows(upe: PositionalEncoding, ctx: EncodedContext) -> np.ndarray:
    """Utterance position rows ``[B, n, d]``; real utterance i (1-based) gets row i."""
    n_real = ctx.n_utterances
    slots = np.arange(ctx.n_slots)[None, :]
    index = slots - (ctx.n_slots - n_real)[:, None] + 1
    index = np.where(ctx.utt_mask, index, 0)
    return upe.rows(index)


def extract_q_distribution(trace: AttentionTrace, target_mask: np.ndarray | None = None) -> Tensor:
    """Model-side utterance selection ``[B, n_slots]``.

    Final-layer word-utterance weights averaged uniformly over heads, then over
    the real response positions. Padding slots carry exactly zero mass.
    """
    if trace is None or not trace.records:
        raise ValueError("no attention trace captured")
    w = trace.last().utterance
    if w is None:
        raise ValueError("trace lacks word-utterance weights")
    b, t, _, n = w.shape
    tmask = trace.target_mask if target_mask is None else target_mask
    if tmask is None:
        tmask = np.ones((b, t), dtype=bool)
    tmask = np.asarray(tmask, dtype=bool)
    if tmask.shape != (b, t):
        raise ShapeError(f"target mask {tmask.shape} does not match trace {(b, t)}")
    lengths = tmask.sum(axis=1)
    if (lengths == 0).any():
        raise ShapeError("response with no positions")
    weights = np.broadcast_to((tmask / lengths[:, None])[:, :, None], (b, t, n))
    return (w.mean(axis=2) * Tensor(weights, dtype=w.dtype)).sum(axis=1)
