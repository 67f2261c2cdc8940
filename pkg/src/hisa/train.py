"""Adam training loop with global-norm clipping and ``.npz`` checkpoints.

Checkpoint layout (format version 1), a plain uncompressed ``numpy.savez``
archive:

* ``param/<name>``   every model parameter, named as in ``named_parameters``
* ``adam_m/<name>``, ``adam_v/<name>``   Adam moment buffers
* ``__meta__``       UTF-8 JSON as a ``uint8`` array: ``format_version``,
  ``model_config``, ``train_config``, ``step``, ``adam_step``, ``embedder``,
  ``vocab`` (tokens and tokenizer mode) and ``rng`` (shuffle seed and epoch)

Array shapes and dtypes travel in the ``.npy`` headers of each entry.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import DialogueExample, batchify
from .errors import NumericalError
from .gds import LossBreakdown, combined_loss
from .model import HisaModel, ModelConfig
from .vocab import Vocabulary

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 1
    steps: int = 0  # > 0 overrides epochs
    batch_size: int = 32
    eta1: float = 1.0
    eta2: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update applied in place to ``params[name].data``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so the global L2 norm is at most ``clip_norm``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads, norm
    scale = clip_norm / norm
    clipped = {k: g * scale for k, g in grads.items()}
    # guard against the scaled norm rounding above the bound
    while global_norm(clipped) > clip_norm:
        scale *= 1.0 - 1e-12
        clipped = {k: g * scale for k, g in grads.items()}
    return clipped, norm


# -------------------------------------------------------------- checkpoints
@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    step: int
    train_config: TrainConfig | None = None
    embedder: dict | None = None
    vocab: Vocabulary | None = None
    rng: dict | None = None

    def build_model(self) -> HisaModel:
        model = HisaModel(self.model_config)
        model.load_state_dict(self.params)
        return model


def save_checkpoint(
    path: str | Path,
    model: HisaModel,
    adam: AdamState | None = None,
    step: int = 0,
    train_config: TrainConfig | None = None,
    embedder: dict | None = None,
    vocab: Vocabulary | None = None,
) -> None:
    adam = adam or AdamState()
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
        if name in adam.m:
            arrays[f"adam_m/{name}"] = adam.m[name]
            arrays[f"adam_v/{name}"] = adam.v[name]
    seed = train_config.seed if train_config else None
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "step": step,
        "adam_step": adam.step,
        "embedder": embedder,
        "vocab": {"tokens": vocab.tokens, "mode": vocab.mode} if vocab else None,
        "rng": {"shuffle_seed": seed, "epoch_streams": "default_rng([seed, epoch])"},
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (no metadata block)")
        meta = json.loads(bytes(z["__meta__"]).decode("utf-8"))
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version!r}")
        params, m, v = {}, {}, {}
        for key in z.files:
            kind, _, name = key.partition("/")
            if kind == "param":
                params[name] = z[key]
            elif kind == "adam_m":
                m[name] = z[key]
            elif kind == "adam_v":
                v[name] = z[key]
    vocab = None
    if meta.get("vocab"):
        vocab = Vocabulary(meta["vocab"]["tokens"], mode=meta["vocab"]["mode"])
    tc = meta.get("train_config")
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model_config"]),
        params=params,
        adam=AdamState(step=meta.get("adam_step", 0), m=m, v=v),
        step=meta["step"],
        train_config=TrainConfig.from_dict(tc) if tc else None,
        embedder=meta.get("embedder"),
        vocab=vocab,
        rng=meta.get("rng"),
    )


# ------------------------------------------------------------------ training
def total_steps(n_examples: int, config: TrainConfig) -> int:
    if config.steps > 0:
        return config.steps
    return config.epochs * math.ceil(n_examples / config.batch_size)


def train(
    examples: Sequence[DialogueExample],
    model: HisaModel,
    config: TrainConfig,
    adam: AdamState | None = None,
    start_step: int = 0,
    log_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_meta: dict | None = None,
    on_step: Callable[[dict, LossBreakdown], None] | None = None,
) -> list[dict]:
    """Optimise the combined objective; returns one log record per step.

    Batches come from a per-epoch seeded shuffle, so resuming at ``start_step``
    with the saved Adam state replays the uninterrupted run exactly.
    """
    if not examples:
        raise ValueError("training corpus is empty")
    adam = adam or AdamState()
    steps = total_steps(len(examples), config)
    per_epoch = math.ceil(len(examples) / config.batch_size)
    params = dict(model.named_parameters())
    pad_len = model.config.utterance_pad_len
    records: list[dict] = []
    log_fh = Path(log_path).open("a", encoding="utf-8") if log_path else None
    model.training = True
    start = time.perf_counter()
    try:
        epoch, batches = None, []
        for step in range(start_step, steps):
            if step // per_epoch != epoch:
                epoch = step // per_epoch
                batches = list(batchify(examples, config.batch_size, config.seed, epoch, pad_len))
            batch = batches[step % per_epoch]
            model.zero_grad()
            losses = combined_loss(batch, model, config.eta1, config.eta2)
            if not math.isfinite(losses.total):
                raise NumericalError(f"non-finite loss at step {step}")
            losses.tensor.backward()
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            grads, norm = clip_gradients(grads, config.clip_norm)
            adam_step(params, grads, adam, config)
            rec = {"step": step, **losses.as_record(), "grad_norm": norm, "wallclock": time.perf_counter() - start}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_step:
                on_step(rec, losses)
            done = step + 1
            if checkpoint_dir and config.checkpoint_interval > 0 and done % config.checkpoint_interval == 0:
                save_checkpoint(
                    Path(checkpoint_dir) / f"step_{done:06d}.npz",
                    model,
                    adam,
                    done,
                    config,
                    **(checkpoint_meta or {}),
                )
            if step % 50 == 0:
                log.info("step %d total=%.4f mle=%.4f kl=%.4f mce=%.4f", step, losses.total, losses.mle, losses.kl, losses.mce)
    finally:
        model.training = False
        if log_fh:
            log_fh.close()
    return records
