"""Per-utterance transformer encoder.

Utterances are held in a right-aligned block ``[B, n_max, pad_len]``: an
example with ``n`` utterances occupies the last ``n`` slots, so slot ``-1`` is
always the query. Empty slots and padding tokens are hidden as keys; an empty
slot keeps one dummy key (position 0) so its ignored rows stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import FfnParams, LayerNorm, MhaParams, PositionalEncoding, ffn, mha, sublayer_wrap
from .autodiff import Tensor, embedding
from .errors import ShapeError
from .params import Module
from .vocab import PAD


class EncoderLayer(Module):
    def __init__(self, d_model: int, heads: int, d_ff: int, rng, dtype):
        self.attn = MhaParams(d_model, heads, rng, dtype)
        self.norm_attn = LayerNorm(d_model, dtype)
        self.ffn = FfnParams(d_model, d_ff, rng, dtype)
        self.norm_ffn = LayerNorm(d_model, dtype)


class EncoderStack(Module):
    """``layers`` encoder layers over a word-embedding table shared with the decoder."""

    def __init__(
        self,
        embedding_table: Tensor,
        wpe: PositionalEncoding,
        layers: Sequence[EncoderLayer],
        pad_len: int = 30,
        drop=None,
    ):
        self.embedding = embedding_table
        self.layers = list(layers)
        self._wpe = wpe
        self._pad_len = pad_len
        self._drop = drop

    @property
    def wpe(self) -> PositionalEncoding:
        return self._wpe

    @property
    def pad_len(self) -> int:
        return self._pad_len

    @property
    def d_model(self) -> int:
        return self.embedding.shape[1]


@dataclass
class EncodedContext:
    """Encoded utterance block plus the masks needed downstream.

    ``states`` is ``[B, n_max, pad_len, d]``; ``token_mask`` marks real tokens,
    ``key_mask`` adds the dummy key of empty slots, ``utt_mask`` marks real slots.
    """

    states: Tensor
    token_mask: np.ndarray
    key_mask: np.ndarray
    utt_mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    @property
    def n_slots(self) -> int:
        return self.states.shape[1]

    @property
    def n_utterances(self) -> np.ndarray:
        return self.utt_mask.sum(axis=1)

    def utterance(self, i: int, b: int = 0) -> Tensor:
        """Encoding ``[L_i, d]`` of the i-th real utterance (0-based, oldest first)."""
        n = int(self.utt_mask[b].sum())
        if not 0 <= i < n:
            raise IndexError(f"utterance {i} out of range for n={n}")
        slot = self.n_slots - n + i
        length = int(self.token_mask[b, slot].sum())
        return self.states[b, slot, :length]

    def repeat(self, k: int) -> "EncodedContext":
        """Tile a single-example context ``k`` times along the batch (no gradient)."""
        if self.batch_size != 1:
            raise ShapeError("repeat() expects a single-example context")
        tile = lambda a: np.repeat(a, k, axis=0)  # noqa: E731
        return EncodedContext(
            Tensor(tile(self.states.data), dtype=self.states.dtype),
            tile(self.token_mask),
            tile(self.key_mask),
            tile(self.utt_mask),
        )


def context_block(contexts: Sequence[Sequence[Sequence[int]]], pad_len: int):
    """Pack contexts into right-aligned ``(ids, token_mask, key_mask, utt_mask)`` arrays."""
    if not contexts:
        raise ShapeError("empty batch")
    n_max = max(len(c) for c in contexts)
    if n_max == 0:
        raise ShapeError("every context needs at least one utterance")
    ids = np.full((len(contexts), n_max, pad_len), PAD, dtype=np.int64)
    utt_mask = np.zeros((len(contexts), n_max), dtype=bool)
    for b, ctx in enumerate(contexts):
        if not ctx:
            raise ShapeError(f"context {b} is empty")
        offset = n_max - len(ctx)
        for i, utt in enumerate(ctx):
            if len(utt) > pad_len:
                raise ShapeError(f"utterance of length {len(utt)} exceeds pad length {pad_len}")
            ids[b, offset + i, : len(utt)] = utt
            utt_mask[b, offset + i] = True
    token_mask = ids != PAD
    real_empty = utt_mask & ~token_mask.any(axis=2)
    if real_empty.any():
        raise ShapeError("an utterance consists only of padding")
    key_mask = token_mask.copy()
    key_mask[~utt_mask, 0] = True
    return ids, token_mask, key_mask, utt_mask


def embed_utterance(tokens, stack: EncoderStack) -> Tensor:
    """``WE[token_j] + WPE[j]`` for every position ``j`` (any leading shape)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[-1] < 1:
        raise ShapeError("cannot embed an empty utterance")
    we = embedding(stack.embedding, tokens)
    pe = stack.wpe.rows(np.arange(tokens.shape[-1]))
    return we + Tensor(pe, dtype=we.dtype)


def encode_block(tokens: np.ndarray, key_mask: np.ndarray, stack: EncoderStack) -> Tensor:
    """Run the encoder stack over ``tokens[..., L]`` with keys limited by ``key_mask``."""
    x = embed_utterance(tokens, stack)
    attn_mask = np.asarray(key_mask, dtype=bool)[..., None, :]
    for layer in stack.layers:
        x = sublayer_wrap(x, lambda h, lyr=layer: mha(h, h, h, lyr.attn, mask=attn_mask), layer.norm_attn, stack._drop)
        x = sublayer_wrap(x, lambda h, lyr=layer: ffn(h, lyr.ffn), layer.norm_ffn, stack._drop)
    return x


def encode_utterance(tokens: Sequence[int], pad_mask: Sequence[bool] | None, stack: EncoderStack) -> Tensor:
    """Encode one utterance; returns ``[L, d]`` for the ``L`` given positions.

    ``pad_mask`` marks padding positions (True = padding); by default every
    PAD id is padding. The utterance is padded to the stack's fixed length so
    appended padding never changes the arithmetic at real positions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    length = tokens.shape[0]
    if length < 1:
        raise ShapeError("cannot encode an empty utterance")
    if length > stack.pad_len:
        raise ShapeError(f"utterance of length {length} exceeds pad length {stack.pad_len}")
    is_pad = tokens == PAD if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if is_pad.all():
        raise ShapeError("utterance consists only of padding")
    ids = np.full(stack.pad_len, PAD, dtype=np.int64)
    ids[:length] = tokens
    keys = np.zeros(stack.pad_len, dtype=bool)
    keys[:length] = ~is_pad
    return encode_block(ids, keys, stack)[:length]


def encode_contexts(contexts: Sequence[Sequence[Sequence[int]]], stack: EncoderStack) -> EncodedContext:
    ids, token_mask, key_mask, utt_mask = context_block(contexts, stack.pad_len)
    return EncodedContext(encode_block(ids, key_mask, stack), token_mask, key_mask, utt_mask)


def encode_context(example, stack: EncoderStack) -> EncodedContext:
    """Encode every utterance of ``example.context`` independently (batch of one)."""
    if not example.context:
        raise ShapeError("empty context")
    return encode_contexts([example.context], stack)
