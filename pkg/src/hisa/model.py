"""Full encoder/decoder model and its configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .attention import Linear, PositionalEncoding
from .autodiff import Tensor, dropout, embedding, parameter
from .decoder import AttentionTrace, DecoderLayerParams, decoder_layer
from .encoder import EncodedContext, EncoderLayer, EncoderStack, encode_contexts
from .errors import ShapeError
from .params import Module


@dataclass
class ModelConfig:
    vocab_size: int = 0
    d_model: int = 512
    heads: int = 8
    enc_layers: int = 4
    dec_layers: int = 2
    d_ff: int = 0  # 0 means 4 * d_model
    utterance_pad_len: int = 30
    max_utterances: int = 10
    max_response_len: int = 30
    max_positions: int = 64
    dropout: float = 0.0
    dtype: str = "float64"
    use_upe: bool = True
    init_seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "heads", "enc_layers", "dec_layers", "utterance_pad_len", "max_utterances", "max_response_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_ff < 0:
            raise ValueError("d_ff must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def ffn_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PROFILES = {
    "paper": dict(d_model=512, heads=8, enc_layers=4, dec_layers=2),
    "desk": dict(d_model=64, heads=2, enc_layers=2, dec_layers=1),
}


class HisaModel(Module):
    """Shared word embeddings, utterance encoder, hierarchical decoder, output head."""

    def __init__(self, config: ModelConfig):
        if config.vocab_size <= 4:
            raise ValueError("vocab_size must exceed the 4 reserved tokens")
        need = max(config.utterance_pad_len, config.max_response_len + 1, config.max_utterances + 1)
        if config.max_positions < need:
            raise ValueError(f"max_positions must be at least {need}")
        self.config = config
        dtype = np.dtype(config.dtype).type
        self._dtype = dtype
        rng = np.random.default_rng(config.init_seed)
        d = config.d_model
        self.embedding = parameter(rng.normal(0.0, 1.0, size=(config.vocab_size, d)), dtype=dtype)
        self._wpe = PositionalEncoding("word", config.max_positions, d)
        self._upe = PositionalEncoding("utterance", config.max_positions, d)
        self._drop_rng = np.random.default_rng([config.init_seed, 1])
        self.training = False
        enc_layers = [EncoderLayer(d, config.heads, config.ffn_dim, rng, dtype) for _ in range(config.enc_layers)]
        self.encoder = EncoderStack(self.embedding, self._wpe, enc_layers, config.utterance_pad_len, self._drop)
        self.decoder_layers = [
            DecoderLayerParams(d, config.heads, config.ffn_dim, rng, dtype) for _ in range(config.dec_layers)
        ]
        self.output = Linear(d, config.vocab_size, rng, dtype)
        # test hook: force every fusion gate to a constant
        self.gate_override: float | None = None

    @property
    def dtype(self):
        return self._dtype

    def _drop(self, x: Tensor) -> Tensor:
        if not self.training or self.config.dropout <= 0.0:
            return x
        return dropout(x, self.config.dropout, self._drop_rng)

    def encode(self, contexts) -> EncodedContext:
        if any(len(c) > self.config.max_utterances for c in contexts):
            raise ShapeError(f"context longer than {self.config.max_utterances} utterances")
        return encode_contexts(contexts, self.encoder)

    def decode(
        self,
        prefix_ids,
        ctx: EncodedContext,
        trace: AttentionTrace | None = None,
    ) -> Tensor:
        """Vocabulary logits ``[B, T, V]`` for decoder inputs ``prefix_ids[B, T]``.

        A 1-d prefix is treated as a batch of one and returns ``[T, V]``.
        """
        prefix = np.asarray(prefix_ids, dtype=np.int64)
        single = prefix.ndim == 1
        if single:
            prefix = prefix[None, :]
        if prefix.shape[-1] < 1:
            raise ShapeError("empty decoder prefix")
        t = prefix.shape[1]
        x = embedding(self.embedding, prefix) + Tensor(self._wpe.rows(np.arange(t)), dtype=self._dtype)
        upe = self._upe if self.config.use_upe else None
        if trace is not None:
            trace.utt_mask = ctx.utt_mask
            trace.token_mask = ctx.token_mask
        total = len(self.decoder_layers)
        drop = self._drop if self.training and self.config.dropout > 0 else None
        for i, layer in enumerate(self.decoder_layers):
            sink = trace.sink(i) if trace is not None and trace.wants(i, total) else None
            x = decoder_layer(x, ctx, layer, upe=upe, trace=sink, gate_override=self.gate_override, drop=drop)
        logits = self.output(x)
        return logits[0] if single else logits


def decode_forward(prefix_ids, ctx: EncodedContext, model: HisaModel, trace: AttentionTrace | None = None) -> Tensor:
    return model.decode(prefix_ids, ctx, trace)
