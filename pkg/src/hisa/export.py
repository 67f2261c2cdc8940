"""Teacher-forced attention traces and their CSV/JSON export.

Per example the exporter writes into ``example_XXXX/``:

* ``utterance_attention.csv``: per-head word-utterance weights of the final
  decoder layer, one row per ``(head, t)`` over real response positions, one
  column per real utterance
* ``word_attention_uJ.csv``: head-averaged word-level weights over utterance J
  (1-based, oldest first), one row per response position, one column per token
* ``summary.json``: tokens, the utterance-selection distribution ``q``, the
  relevance target and (when known) the relevance labels

Floats are written with ``repr`` so files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import no_grad
from .corpus import Batch, DialogueExample, batchify, make_batch
from .decoder import AttentionTrace, extract_q_distribution
from .model import HisaModel
from .vocab import Vocabulary


def teacher_forced_trace(model: HisaModel, batch: Batch) -> tuple[AttentionTrace, np.ndarray]:
    """Run the reference responses through the decoder; returns the trace and ``q`` ``[B, n_slots]``."""
    with no_grad():
        ctx = model.encode(batch.contexts)
        trace = AttentionTrace(layers="last", target_mask=batch.target_mask)
        model.decode(batch.decoder_input, ctx, trace)
        q = extract_q_distribution(trace, batch.target_mask).data
    return trace, q


def q_distributions(model: HisaModel, examples: Sequence[DialogueExample], batch_size: int = 32) -> list[np.ndarray]:
    """Utterance-selection distribution per example, restricted to its real utterances."""
    out = []
    pad_len = model.config.utterance_pad_len
    for batch in batchify(examples, batch_size, pad_len=pad_len):
        _, q = teacher_forced_trace(model, batch)
        for i in range(batch.size):
            out.append(q[i][batch.utt_mask[i]].copy())
    return out


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        w.writerow(header)
        w.writerows(rows)


def export_example(
    directory: str | Path,
    trace: AttentionTrace,
    q: np.ndarray,
    b: int,
    example: DialogueExample,
    vocab: Vocabulary | None = None,
    index: int = 0,
) -> dict:
    """Write the files for example ``b`` of a traced batch; returns the summary."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    slots = np.flatnonzero(trace.utt_mask[b])
    n = len(slots)

    utt = trace.utterance_weights(b)  # [h, T, n], real response positions only
    heads, t_len, _ = utt.shape
    rows = [[str(h), str(t)] + [_fmt(x) for x in utt[h, t]] for h in range(heads) for t in range(t_len)]
    _write_csv(directory / "utterance_attention.csv", ["head", "t"] + [f"u{j + 1}" for j in range(n)], rows)

    decode = vocab.decode if vocab is not None else (lambda ids: [str(i) for i in ids])
    files = ["utterance_attention.csv"]
    for j, w in enumerate(trace.word_weights(b)):
        avg = w.mean(axis=0)  # [T, L_j]
        name = f"word_attention_u{j + 1}.csv"
        header = ["t"] + decode(example.context[j])
        _write_csv(directory / name, header, [[str(t)] + [_fmt(x) for x in avg[t]] for t in range(t_len)])
        files.append(name)

    q_real = q[b][slots]
    summary = {
        "index": index,
        "context": [decode(u) for u in example.context],
        "response": decode(example.response),
        "heads": heads,
        "positions": t_len,
        "q_distribution": [float(x) for x in q_real],
        "gds_target": None if example.gds_target is None else [float(x) for x in example.gds_target],
        "relevance_labels": example.relevance_labels,
        "files": files,
    }
    with (directory / "summary.json").open("w", encoding="utf-8") as fh:
        json.dump(summary, fh, ensure_ascii=False, indent=2)
    return summary


def export_traces(
    out_dir: str | Path,
    model: HisaModel,
    examples: Sequence[DialogueExample],
    vocab: Vocabulary | None = None,
    batch_size: int = 16,
) -> list[dict]:
    out_dir = Path(out_dir)
    summaries = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = make_batch(chunk, model.config.utterance_pad_len)
        trace, q = teacher_forced_trace(model, batch)
        for b, ex in enumerate(chunk):
            idx = start + b
            summaries.append(export_example(out_dir / f"example_{idx:04d}", trace, q, b, ex, vocab, idx))
    return summaries


def read_matrix(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Load an exported CSV back as ``(header, float matrix)``."""
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64)
