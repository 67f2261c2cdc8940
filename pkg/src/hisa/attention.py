"""Shared sublayers: multi-head attention, positional tables, FFN, layer norm."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, normalize, softmax
from .errors import ShapeError
from .params import Module, ones, xavier, zeros

AttentionSink = Callable[[Tensor], None]


class Linear(Module):
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = xavier(rng, d_in, d_out, dtype)
        self.bias = zeros((d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        if x.ndim > 2:
            lead = x.shape[:-1]
            flat = x.reshape(-1, x.shape[-1]) @ self.weight + self.bias
            return flat.reshape(*lead, self.weight.shape[1])
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float64, eps: float = 1e-6):
        self.gamma = ones((d,), dtype)
        self.beta = zeros((d,), dtype)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return normalize(x, self._eps) * self.gamma + self.beta


class MhaParams(Module):
    """Fused-head projections; each head uses a d_model // heads slice."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if heads <= 0 or d_model % heads:
            raise ShapeError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_k = d_model // heads
        self.query = Linear(d_model, d_model, rng, dtype)
        self.key = Linear(d_model, d_model, rng, dtype)
        self.value = Linear(d_model, d_model, rng, dtype)
        self.out = Linear(d_model, d_model, rng, dtype)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    return x.reshape(*lead, t, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, t, h * dk)


def mha(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    params: MhaParams,
    mask: np.ndarray | None = None,
    capture: AttentionSink | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention.

    Inputs are ``[..., T, d_model]``; leading dimensions of the query side and
    key side broadcast against each other. ``mask`` (True = visible) must
    broadcast to ``[..., T_q, T_k]``. ``capture`` receives the post-softmax
    weights shaped ``[..., heads, T_q, T_k]``.
    """
    d = params.d_model
    for name, t in (("query", q_in), ("key", k_in), ("value", v_in)):
        if t.ndim < 2 or t.shape[-1] != d:
            raise ShapeError(f"mha {name} input must be [..., T, {d}], got {t.shape}")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ShapeError(f"key/value lengths differ: {k_in.shape} vs {v_in.shape}")
    h = params.heads
    q = _split_heads(params.query(q_in), h)
    k = _split_heads(params.key(k_in), h)
    v = _split_heads(params.value(v_in), h)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(params.d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim < 2:
            raise ShapeError(f"mask must be at least [T_q, T_k], got {mask.shape}")
        mask = mask[..., None, :, :]
    weights = softmax(scores, axis=-1, mask=mask)
    if capture is not None:
        capture(weights)
    return params.out(_merge_heads(weights @ v))


def causal_mask(length: int) -> np.ndarray:
    """Boolean [T, T]; entry (i, j) is True iff j <= i."""
    if length < 1:
        raise ShapeError("causal mask length must be >= 1")
    return np.tril(np.ones((length, length), dtype=bool))


class PositionalEncoding:
    """Fixed sinusoidal table: even columns sin, odd columns cos."""

    KINDS = ("word", "utterance")

    def __init__(self, kind: str, max_positions: int, d_model: int):
        if kind not in self.KINDS:
            raise ValueError(f"positional encoding kind must be one of {self.KINDS}")
        self.kind = kind
        self.max_positions = max_positions
        self.d_model = d_model
        pos = np.arange(max_positions, dtype=np.float64)[:, None]
        i = np.arange(0, d_model, 2, dtype=np.float64)
        angle = pos / np.power(10000.0, i / d_model)
        table = np.zeros((max_positions, d_model))
        table[:, 0::2] = np.sin(angle)
        table[:, 1::2] = np.cos(angle[:, : d_model // 2])
        self.table = table

    def rows(self, positions) -> np.ndarray:
        positions = np.asarray(positions, dtype=np.int64)
        if positions.size and (positions.min() < 0 or positions.max() >= self.max_positions):
            raise IndexError(
                f"{self.kind} position out of range [0, {self.max_positions}): {positions.tolist()}"
            )
        return self.table[positions]


def positional_encode(table: PositionalEncoding, positions: Sequence[int], dtype=np.float64) -> Tensor:
    return Tensor(table.rows(positions), dtype=dtype)


class FfnParams(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float64):
        self.inner = Linear(d_model, d_ff, rng, dtype)
        self.outer = Linear(d_ff, d_model, rng, dtype)


def ffn(x: Tensor, params: FfnParams) -> Tensor:
    """Position-wise ``outer(relu(inner(x)))``."""
    return params.outer(params.inner(x).relu())


def sublayer_wrap(
    x: Tensor,
    f: Callable[[Tensor], Tensor],
    norm: LayerNorm,
    drop: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """Post-norm residual: ``norm(x + f(x))``; ``drop`` applies to ``f(x)`` only."""
    y = f(x)
    if y.shape != x.shape:
        raise ShapeError(f"sublayer changed shape {x.shape} -> {y.shape}")
    if drop is not None:
        y = drop(y)
    return norm(x + y)
