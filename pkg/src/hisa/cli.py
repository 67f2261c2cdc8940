"""``hisa`` command line: synth, vocab, train, generate, eval, inspect-attention.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort,
4 I/O error. Every subcommand writes only into its ``--out`` directory and
leaves the resolved configuration there as ``config.ini``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import RunConfig, parse_assignment
from .corpus import CorpusReader, make_example, read_jsonl, record_tokens, write_jsonl
from .errors import ConfigError, CorpusError, HisaError, NumericalError, VocabularyError
from .export import export_traces, q_distributions
from .gds import SentenceEmbedder
from .generate import MAX_BEAM, generate
from .metrics import attention_relevance_agreement, evaluate
from .model import HisaModel
from .synth import synth_corpus
from .train import AdamState, load_checkpoint, save_checkpoint, total_steps, train
from .vocab import Vocabulary, build_vocabulary, tokenize

log = logging.getLogger("hisa")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class UsageError(HisaError):
    pass


# ----------------------------------------------------------------- helpers
def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args, mapping: dict[str, str]) -> RunConfig:
    overrides: dict[str, object] = {}
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in args.set or []:
        k, v = parse_assignment(item)
        overrides[k] = v
    return RunConfig.resolve(args.config, overrides)


def _load_vocab_for(cfg: RunConfig, corpus: Path, vocab_path: str | None) -> Vocabulary:
    if vocab_path:
        return Vocabulary.load(_require_file(vocab_path, "vocabulary"))
    records = CorpusReader(corpus, cfg["data.skip_malformed"])
    mode = cfg["data.tokenizer"]
    seqs = (t for r in records for t in record_tokens(r, mode))
    return build_vocabulary(seqs, max_size=cfg["data.max_vocab"], min_freq=cfg["data.min_freq"], mode=mode)


def _examples(path: Path, vocab: Vocabulary, model_cfg, cfg: RunConfig, embedder=None, labels=None):
    reader = CorpusReader(path, cfg["data.skip_malformed"])
    out = []
    for i, record in enumerate(reader):
        if labels is not None:
            record = dict(record, relevance_labels=labels[i])
        out.append(
            make_example(
                record,
                vocab,
                max_utterances=model_cfg.max_utterances,
                pad_len=model_cfg.utterance_pad_len,
                max_response_len=model_cfg.max_response_len,
                embedder=embedder,
                lineno=i + 1,
            )
        )
    if reader.skipped:
        log.warning("skipped %d malformed line(s)", reader.skipped)
    if not out:
        raise CorpusError("corpus contains no usable dialogues")
    return out


def _read_labels(path: str | None) -> list[list[bool]] | None:
    if not path:
        return None
    return [r["relevance_labels"] for r in read_jsonl(_require_file(path, "labels file"))]


def _embedder(vocab: Vocabulary, seed: int, dim: int, idf_docs=None) -> SentenceEmbedder:
    emb = SentenceEmbedder.from_vocab(vocab, seed=seed, dim=dim)
    return emb.with_idf(idf_docs) if idf_docs is not None else emb


# ------------------------------------------------------------- subcommands
def cmd_synth(args) -> int:
    cfg = _resolve(
        args,
        {
            "examples": "synth.num_examples",
            "utterances": "synth.n_utterances",
            "vocab_size": "synth.vocab_size",
            "distractor_ratio": "synth.distractor_ratio",
            "seed": "synth.seed",
        },
    )
    spec = cfg.synth_spec()
    try:
        spec.validate(cfg["model.utterance_pad_len"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = synth_corpus(spec)
    out = _out_dir(args.out)
    write_jsonl(out / "corpus.jsonl", [{"context": r["context"], "response": r["response"]} for r in records])
    write_jsonl(
        out / "labels.jsonl",
        [{"relevant": r["relevance_labels"].index(True), "relevance_labels": r["relevance_labels"]} for r in records],
    )
    cfg.write(out)
    print(f"wrote {len(records)} dialogues to {out / 'corpus.jsonl'}")
    return EXIT_OK


def cmd_vocab(args) -> int:
    cfg = _resolve(
        args,
        {"max_size": "data.max_vocab", "min_freq": "data.min_freq", "tokenizer": "data.tokenizer"},
    )
    corpus = _require_file(args.corpus, "corpus")
    vocab = _load_vocab_for(cfg, corpus, None)
    out = _out_dir(args.out)
    vocab.save(out / "vocab.tsv")
    cfg.write(out)
    print(f"vocabulary of {len(vocab)} entries written to {out / 'vocab.tsv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(
        args,
        {
            "profile": "model.profile",
            "steps": "train.steps",
            "epochs": "train.epochs",
            "batch_size": "train.batch_size",
            "learning_rate": "train.learning_rate",
            "eta1": "train.eta1",
            "eta2": "train.eta2",
            "seed": "train.seed",
            "init_seed": "model.init_seed",
        },
    )
    corpus = _require_file(args.corpus, "corpus")
    train_cfg = cfg.train_config()
    resume = load_checkpoint(_require_file(args.resume, "checkpoint")) if args.resume else None
    vocab = resume.vocab if resume and resume.vocab else _load_vocab_for(cfg, corpus, args.vocab)
    model_cfg = resume.model_config if resume else cfg.model_config(len(vocab))
    if model_cfg.vocab_size != len(vocab):
        raise ConfigError("vocabulary size differs from the model's embedding table")
    embedder = _embedder(vocab, cfg["gds.embedder_seed"], cfg["gds.embedder_dim"])
    examples = _examples(corpus, vocab, model_cfg, cfg)
    if cfg["gds.idf"]:
        embedder = embedder.with_idf([u for e in examples for u in e.context] + [e.response for e in examples])
    from .gds import gds_target

    for e in examples:
        e.gds_target = gds_target(e.context, e.response, embedder).p

    out = _out_dir(args.out)
    cfg.write(out)
    vocab.save(out / "vocab.tsv")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    meta = {"embedder": {**embedder.metadata(), "idf": bool(cfg["gds.idf"])}, "vocab": vocab}
    if resume:
        model, adam, start = resume.build_model(), resume.adam, resume.step
    else:
        model, adam, start = HisaModel(model_cfg), AdamState(), 0
    log_path = out / "log.jsonl"
    if not resume and log_path.exists():
        log_path.unlink()
    records = train(
        examples,
        model,
        train_cfg,
        adam=adam,
        start_step=start,
        log_path=log_path,
        checkpoint_dir=ckpt_dir,
        checkpoint_meta=meta,
    )
    save_checkpoint(out / "model.npz", model, adam, total_steps(len(examples), train_cfg), train_cfg, **meta)
    if records:
        last = records[-1]
        print(f"trained {len(records)} steps: mle {records[0]['mle']:.4f} -> {last['mle']:.4f}")
    print(f"checkpoint written to {out / 'model.npz'}")
    return EXIT_OK


def _load_model(path: str):
    ckpt = load_checkpoint(_require_file(path, "checkpoint"))
    if ckpt.vocab is None:
        raise UsageError(f"checkpoint {path} carries no vocabulary")
    return ckpt, ckpt.build_model(), ckpt.vocab


def cmd_generate(args) -> int:
    cfg = _resolve(args, {"beam": "generate.beam", "max_len": "generate.max_len"})
    corpus = _require_file(args.corpus, "corpus")
    ckpt, model, vocab = _load_model(args.checkpoint)
    mode = "beam" if args.beam is not None else cfg["generate.mode"]
    if mode == "beam" and not 1 <= cfg["generate.beam"] <= MAX_BEAM:
        raise UsageError(f"beam width must be in [1, {MAX_BEAM}]")
    if cfg["generate.max_len"] < 1:
        raise UsageError("max_len must be positive")
    out = _out_dir(args.out)
    cfg.write(out)
    mcfg = model.config
    rows = []
    for i, record in enumerate(CorpusReader(corpus, cfg["data.skip_malformed"])):
        ex = make_example(record, vocab, mcfg.max_utterances, mcfg.utterance_pad_len, mcfg.max_response_len, lineno=i + 1)
        g = generate(ex.context, model, mode=mode, beam=cfg["generate.beam"], max_len=cfg["generate.max_len"])
        sep = "" if vocab.mode == "char" else " "
        rows.append({"context": record["context"], "response": sep.join(vocab.decode(g.tokens)), "log_prob": g.log_prob})
    write_jsonl(out / "responses.jsonl", rows)
    print(f"wrote {len(rows)} responses to {out / 'responses.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(
        args,
        {"per_example": "eval.per_example", "embedder_seed": "eval.embedder_seed"},
    )
    responses = read_jsonl(_require_file(args.responses, "responses file"))
    references = list(CorpusReader(_require_file(args.references, "references corpus")))
    if len(responses) != len(references):
        raise UsageError(f"{len(responses)} responses vs {len(references)} references")
    for i, (h, r) in enumerate(zip(responses, references)):
        if "context" in h and h["context"] != r["context"]:
            raise UsageError(f"line {i + 1}: response context differs from the reference context")
    mode = cfg["data.tokenizer"]
    texts = [tokenize(h["response"], mode) for h in responses]
    texts += [t for r in references for t in record_tokens(r, mode)]
    vocab = build_vocabulary(texts, max_size=10**9, mode=mode)
    embedder = _embedder(vocab, cfg["eval.embedder_seed"], cfg["eval.embedder_dim"])
    hyps = [vocab.encode(tokenize(h["response"], mode)) for h in responses]
    refs = [vocab.encode(tokenize(r["response"], mode)) for r in references]
    ctxs = [[vocab.encode(tokenize(u, mode)) for u in r["context"]] for r in references]
    report = evaluate(hyps, refs, ctxs, embedder, per_example=cfg["eval.per_example"]).to_dict()
    if args.checkpoint:
        labels = _read_labels(args.labels)
        _, model, mvocab = _load_model(args.checkpoint)
        examples = _examples(Path(args.references), mvocab, model.config, cfg, labels=labels)
        if all(e.relevance_labels is not None for e in examples):
            qs = q_distributions(model, examples)
            report["attention_relevance"] = attention_relevance_agreement(qs, [e.relevance_labels for e in examples])
    out = _out_dir(args.out)
    cfg.write(out)
    with (out / "report.json").open("w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, ensure_ascii=False)
    print(json.dumps(report["scores"], indent=2))
    return EXIT_OK


def cmd_inspect_attention(args) -> int:
    cfg = _resolve(args, {"limit": "inspect.limit"})
    corpus = _require_file(args.corpus, "corpus")
    labels = _read_labels(args.labels)
    ckpt, model, vocab = _load_model(args.checkpoint)
    embedder = None
    if ckpt.embedder:
        embedder = _embedder(vocab, ckpt.embedder.get("seed") or 0, ckpt.embedder.get("dim", 64))
    examples = _examples(corpus, vocab, model.config, cfg, embedder=embedder, labels=labels)
    if cfg["inspect.limit"] > 0:
        examples = examples[: cfg["inspect.limit"]]
    out = _out_dir(args.out)
    cfg.write(out)
    summaries = export_traces(out, model, examples, vocab)
    print(f"exported attention for {len(summaries)} example(s) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", required=True, metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hisa", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labelled corpus")
    p.add_argument("--examples", type=int)
    p.add_argument("--utterances", type=int)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--distractor-ratio", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vocab", parents=[common], help="build a vocabulary from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-size", type=int)
    p.add_argument("--min-freq", type=int)
    p.add_argument("--tokenizer", choices=["word", "char"])
    p.set_defaults(func=cmd_vocab)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="vocabulary file (built from the corpus when omitted)")
    p.add_argument("--profile", choices=["paper", "desk"])
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--init-seed", type=int, help="parameter initialisation seed")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="generate responses")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--beam", type=int, help="beam width (greedy decoding when omitted)")
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common], help="score responses against references")
    p.add_argument("--responses", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--per-example", action="store_true", default=None)
    p.add_argument("--embedder-seed", type=int)
    p.add_argument("--checkpoint", help="also measure attention/relevance agreement")
    p.add_argument("--labels", help="relevance labels aligned with the references")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attention", parents=[common], help="export attention traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_inspect_attention)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CorpusError, VocabularyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
