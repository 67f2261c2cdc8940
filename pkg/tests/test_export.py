import json

import numpy as np
import pytest

from conftest import tiny_config
from hisa.corpus import DialogueExample
from hisa.export import export_traces, q_distributions, read_matrix
from hisa.model import HisaModel

EXAMPLES = [
    DialogueExample([[4, 5, 6], [7, 8]], [9, 10, 2], [False, True], np.array([0.4, 0.6])),
    DialogueExample([[5]], [4, 2], [True], np.array([1.0])),
    DialogueExample([[6, 7], [8], [9, 10, 11]], [4, 5, 6, 7, 2], [True, False, False], np.array([0.5, 0.2, 0.3])),
]


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    model = HisaModel(tiny_config(heads=2, dec_layers=2))
    rng = np.random.default_rng(0)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0.0, 0.3, p.data.shape)
    out = tmp_path_factory.mktemp("traces")
    return model, out, export_traces(out, model, EXAMPLES, batch_size=2)


def test_layout(exported):
    _, out, summaries = exported
    assert [s["index"] for s in summaries] == [0, 1, 2]
    for ex, s in zip(EXAMPLES, summaries):
        d = out / f"example_{s['index']:04d}"
        assert sorted(p.name for p in d.iterdir()) == sorted(s["files"] + ["summary.json"])
        assert len(s["files"]) == 1 + ex.n


def test_every_row_sums_to_one(exported):
    _, out, _ = exported
    for path in out.glob("example_*/*.csv"):
        _, m = read_matrix(path)
        skip = 2 if path.name == "utterance_attention.csv" else 1
        np.testing.assert_allclose(m[:, skip:].sum(axis=1), 1.0, atol=1e-5)


def test_row_counts_follow_real_positions(exported):
    _, out, summaries = exported
    for ex, s in zip(EXAMPLES, summaries):
        d = out / f"example_{s['index']:04d}"
        header, m = read_matrix(d / "utterance_attention.csv")
        assert header == ["head", "t"] + [f"u{j + 1}" for j in range(ex.n)]
        assert m.shape[0] == 2 * len(ex.response)
        for j, utt in enumerate(ex.context):
            header, w = read_matrix(d / f"word_attention_u{j + 1}.csv")
            assert len(header) == 1 + len(utt) and w.shape[0] == len(ex.response)


def test_single_utterance_column_is_ones(exported):
    _, out, _ = exported
    _, m = read_matrix(out / "example_0001" / "utterance_attention.csv")
    assert (m[:, 2] == 1.0).all()


def test_json_q_matches_csv_recombination(exported):
    _, out, summaries = exported
    for s in summaries:
        d = out / f"example_{s['index']:04d}"
        _, m = read_matrix(d / "utterance_attention.csv")
        q = json.loads((d / "summary.json").read_text(encoding="utf-8"))["q_distribution"]
        np.testing.assert_allclose(m[:, 2:].mean(axis=0), q, atol=1e-9)


def test_summary_matches_q_distributions(exported):
    model, _, summaries = exported
    for s, q in zip(summaries, q_distributions(model, EXAMPLES)):
        np.testing.assert_allclose(s["q_distribution"], q, atol=1e-12)
    assert summaries[0]["relevance_labels"] == [False, True]
    assert summaries[0]["gds_target"] == [0.4, 0.6]
