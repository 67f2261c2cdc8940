"""JSONL dialogue ingestion, example encoding and batching."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .encoder import context_block
from .errors import CorpusError
from .vocab import BOS, EOS, PAD, Vocabulary, tokenize

log = logging.getLogger(__name__)


class CorpusReader:
    """Stream ``{"context": [str, ...], "response": str}`` records from a JSONL file.

    Malformed lines raise :class:`CorpusError` naming the line, unless
    ``skip_malformed`` is set, in which case they are counted in ``skipped``.
    Extra keys are passed through untouched.
    """

    def __init__(self, path: str | Path, skip_malformed: bool = False):
        self.path = Path(path)
        self.skip_malformed = skip_malformed
        self.skipped = 0

    def __iter__(self) -> Iterator[dict]:
        self.skipped = 0
        produced = 0
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = parse_record(line, lineno)
                except CorpusError:
                    if not self.skip_malformed:
                        raise
                    self.skipped += 1
                    log.warning("skipping malformed line %d of %s", lineno, self.path)
                    continue
                produced += 1
                yield record
        if produced == 0:
            log.warning("corpus %s contains no dialogues", self.path)


def parse_record(line: str, lineno: int | None = None) -> dict:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusError(f"invalid JSON ({exc.msg})", lineno) from None
    if not isinstance(record, dict):
        raise CorpusError("record must be a JSON object", lineno)
    for key in ("context", "response"):
        if key not in record:
            raise CorpusError(f"missing {key!r} key", lineno)
    ctx = record["context"]
    if not isinstance(ctx, list) or not all(isinstance(u, str) for u in ctx):
        raise CorpusError("'context' must be an array of strings", lineno)
    if not isinstance(record["response"], str):
        raise CorpusError("'response' must be a string", lineno)
    return record


def load_corpus(path: str | Path, skip_malformed: bool = False) -> CorpusReader:
    return CorpusReader(path, skip_malformed)


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"invalid JSON ({exc.msg})", lineno) from None
    return out


@dataclass
class DialogueExample:
    """Token-id encoded context (oldest first) and EOS-terminated response."""

    context: list[list[int]]
    response: list[int]
    relevance_labels: list[bool] | None = None
    gds_target: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.context)


def record_tokens(record: dict, mode: str = "word") -> list[list[str]]:
    """All token sequences in a record (context utterances, then response)."""
    return [tokenize(u, mode) for u in record["context"]] + [tokenize(record["response"], mode)]


def make_example(
    record: dict,
    vocab: Vocabulary,
    max_utterances: int = 10,
    pad_len: int = 30,
    max_response_len: int = 30,
    embedder=None,
    lineno: int | None = None,
) -> DialogueExample:
    """Tokenise and encode one record.

    Utterances keep their last ``pad_len`` tokens and the context keeps its last
    ``max_utterances`` non-empty utterances. Responses keep their first
    ``max_response_len - 1`` tokens followed by EOS. ``relevance_labels`` in the
    record are carried through the same truncation.
    """
    labels = record.get("relevance_labels")
    if labels is not None and len(labels) != len(record["context"]):
        raise CorpusError("relevance_labels length differs from context length", lineno)
    context: list[list[int]] = []
    kept_labels: list[bool] = []
    for i, utt in enumerate(record["context"]):
        ids = vocab.encode(tokenize(utt, vocab.mode))[-pad_len:]
        if ids:
            context.append(ids)
            if labels is not None:
                kept_labels.append(bool(labels[i]))
    context = context[-max_utterances:]
    kept_labels = kept_labels[-max_utterances:]
    if not context:
        raise CorpusError("context has no non-empty utterance", lineno)
    response = vocab.encode(tokenize(record["response"], vocab.mode))[: max_response_len - 1]
    if not response:
        raise CorpusError("empty response", lineno)
    response = response + [EOS]
    ex = DialogueExample(context, response, kept_labels if labels is not None else None)
    if embedder is not None:
        from .gds import gds_target

        ex.gds_target = gds_target(context, response, embedder).p
    return ex


def make_examples(records: Iterable[dict], vocab: Vocabulary, embedder=None, **limits) -> list[DialogueExample]:
    return [make_example(r, vocab, embedder=embedder, lineno=i, **limits) for i, r in enumerate(records, start=1)]


@dataclass
class Batch:
    """Padded block of examples. Context slots are right-aligned (see encoder)."""

    contexts: list[list[list[int]]]
    context_ids: np.ndarray  # [B, n_max, pad_len]
    token_mask: np.ndarray
    utt_mask: np.ndarray  # [B, n_max]
    decoder_input: np.ndarray  # [B, T] BOS + response[:-1]
    targets: np.ndarray  # [B, T] response incl. EOS, PAD-padded
    target_mask: np.ndarray
    gds_p: np.ndarray  # [B, n_max], zero on empty slots
    labels: np.ndarray | None  # [B, n_max] bool

    @property
    def size(self) -> int:
        return len(self.contexts)

    @property
    def n(self) -> np.ndarray:
        return self.utt_mask.sum(axis=1)


def make_batch(examples: Sequence[DialogueExample], pad_len: int = 30) -> Batch:
    ids, token_mask, _, utt_mask = context_block([e.context for e in examples], pad_len)
    b, n_max = utt_mask.shape
    t = max(len(e.response) for e in examples)
    dec_in = np.full((b, t), PAD, dtype=np.int64)
    targets = np.full((b, t), PAD, dtype=np.int64)
    gds_p = np.zeros((b, n_max))
    labels = np.zeros((b, n_max), dtype=bool) if all(e.relevance_labels is not None for e in examples) else None
    for i, e in enumerate(examples):
        m = len(e.response)
        dec_in[i, 0] = BOS
        dec_in[i, 1:m] = e.response[:-1]
        targets[i, :m] = e.response
        off = n_max - e.n
        if e.gds_target is not None:
            gds_p[i, off:] = e.gds_target
        else:
            gds_p[i, off:] = 1.0 / e.n
        if labels is not None:
            labels[i, off:] = e.relevance_labels
    return Batch(
        contexts=[[list(u) for u in e.context] for e in examples],
        context_ids=ids,
        token_mask=token_mask,
        utt_mask=utt_mask,
        decoder_input=dec_in,
        targets=targets,
        target_mask=targets != PAD,
        gds_p=gds_p,
        labels=labels,
    )


def unbatch(batch: Batch) -> list[DialogueExample]:
    """Invert :func:`make_batch` from the padded arrays alone."""
    out = []
    for i in range(batch.context_ids.shape[0]):
        slots = np.flatnonzero(batch.utt_mask[i])
        context = [batch.context_ids[i, s][batch.token_mask[i, s]].tolist() for s in slots]
        response = batch.targets[i][batch.target_mask[i]].tolist()
        labels = batch.labels[i, slots].tolist() if batch.labels is not None else None
        out.append(DialogueExample(context, response, labels, batch.gds_p[i, slots].copy()))
    return out


def batchify(
    examples: Sequence[DialogueExample],
    batch_size: int = 32,
    seed: int | None = None,
    epoch: int = 0,
    pad_len: int = 30,
) -> Iterator[Batch]:
    """Yield batches for one epoch; ``seed`` enables a per-epoch seeded shuffle."""
    order = np.arange(len(examples))
    if seed is not None:
        order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    for start in range(0, len(order), batch_size):
        yield make_batch([examples[j] for j in order[start : start + batch_size]], pad_len)
