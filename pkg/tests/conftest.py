import numpy as np
import pytest

from hisa.corpus import make_examples, record_tokens
from hisa.gds import SentenceEmbedder
from hisa.model import HisaModel, ModelConfig
from hisa.synth import SynthSpec, synth_corpus
from hisa.vocab import build_vocabulary

_ACCEPTANCE: list[tuple[str, str, str]] = []


def tiny_config(vocab_size=12, **kw):
    base = dict(
        vocab_size=vocab_size,
        d_model=8,
        heads=1,
        enc_layers=1,
        dec_layers=1,
        d_ff=16,
        utterance_pad_len=6,
        max_utterances=4,
        max_response_len=6,
        max_positions=12,
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return HisaModel(tiny_config())


def synth_examples(spec: SynthSpec):
    records = synth_corpus(spec)
    vocab = build_vocabulary([t for r in records for t in record_tokens(r)])
    embedder = SentenceEmbedder.from_vocab(vocab)
    return records, vocab, embedder, make_examples(records, vocab, embedder=embedder)


@pytest.fixture(scope="session")
def synth_small():
    return synth_examples(SynthSpec(num_examples=50, seed=0))


def random_contexts(rng, batch, vocab_size, max_n=3, max_len=5):
    return [
        [rng.integers(4, vocab_size, size=int(rng.integers(1, max_len + 1))).tolist() for _ in range(int(rng.integers(1, max_n + 1)))]
        for _ in range(batch)
    ]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and report.when == "call":
        title = (item.function.__doc__ or item.name).strip().splitlines()[0]
        detail = dict(item.user_properties).get("detail", "")
        _ACCEPTANCE.append((title, "PASS" if report.passed else "FAIL", detail))
    elif item.module.__name__.endswith("test_acceptance") and report.when == "setup" and report.failed:
        _ACCEPTANCE.append((item.name, "FAIL", "setup error"))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for title, status, detail in _ACCEPTANCE:
        line = f"{status}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
