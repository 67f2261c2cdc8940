import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import synth_examples
from hisa.corpus import (
    CorpusReader,
    DialogueExample,
    batchify,
    make_batch,
    make_example,
    parse_record,
    unbatch,
    write_jsonl,
)
from hisa.errors import CorpusError, VocabularyError
from hisa.gds import gds_target
from hisa.synth import SynthSpec, synth_corpus
from hisa.vocab import BOS, EOS, PAD, RESERVED, UNK, Vocabulary, build_vocabulary, tokenize


class TestTokenize:
    def test_lowercase_whitespace(self):
        assert tokenize("Hello World") == ["hello", "world"]

    def test_empty(self):
        assert tokenize("") == []

    def test_cjk_runs_split_per_character(self):
        assert tokenize("你好world 再见") == ["你", "好", "world", "再", "见"]

    def test_char_mode(self):
        assert tokenize("ab c", mode="char") == ["a", "b", "c"]

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet=st.sampled_from(list("abcXYZ 你好再見カナ。！,.")), max_size=30))
    def test_idempotent(self, text):
        once = tokenize(text)
        assert tokenize(" ".join(once)) == once

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            tokenize("a", mode="bpe")


class TestVocabulary:
    def test_frequency_ranking(self):
        v = build_vocabulary([tokenize("a a b")], max_size=10)
        assert (v.id("a"), v.id("b")) == (4, 5)

    def test_reserved_ids(self):
        v = build_vocabulary([["x"]])
        assert [v.id(t) for t in RESERVED] == [PAD, BOS, EOS, UNK]

    def test_min_freq(self):
        v = build_vocabulary([["a", "a", "b"]], min_freq=2)
        assert "a" in v and "b" not in v

    def test_ties_are_lexicographic_and_deterministic(self):
        corpus = [["z", "y", "x", "y", "z", "x"]]
        a, b = build_vocabulary(corpus), build_vocabulary(list(reversed(corpus)))
        assert a.tokens == b.tokens == list(RESERVED) + ["x", "y", "z"]

    def test_max_size(self):
        v = build_vocabulary([["a", "a", "b", "c"]], max_size=5)
        assert v.tokens == list(RESERVED) + ["a"]

    def test_round_trip_and_unk(self):
        v = build_vocabulary([["a", "b"]])
        assert v.decode(v.encode(["b", "a"])) == ["b", "a"]
        assert v.encode(["zzz"]) == [UNK]

    def test_save_load(self, tmp_path):
        v = build_vocabulary([tokenize("héllo wörld 你好")], mode="word")
        v.save(tmp_path / "v.tsv")
        header = (tmp_path / "v.tsv").read_text(encoding="utf-8").splitlines()[0]
        assert "mode=word" in header and f"size={len(v)}" in header
        assert Vocabulary.load(tmp_path / "v.tsv") == v

    def test_bad_id(self):
        with pytest.raises(VocabularyError):
            build_vocabulary([["a"]]).decode([99])


class TestCorpusReader:
    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "c.jsonl"
        path.write_text("", encoding="utf-8")
        with caplog.at_level(logging.WARNING):
            assert list(CorpusReader(path)) == []
        assert "no dialogues" in caplog.text

    def test_one_record(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_jsonl(path, [{"context": ["hi"], "response": "yo", "extra": 1}])
        records = list(CorpusReader(path))
        assert records == [{"context": ["hi"], "response": "yo", "extra": 1}]

    def test_missing_response_names_line(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({"context": ["hi"]}) + "\n", encoding="utf-8")
        with pytest.raises(CorpusError, match="line 1"):
            list(CorpusReader(path))

    def test_skip_malformed(self, tmp_path):
        path = tmp_path / "c.jsonl"
        path.write_text('{"context": ["a"], "response": "b"}\nnot json\n{"context": "x", "response": "y"}\n', encoding="utf-8")
        reader = CorpusReader(path, skip_malformed=True)
        assert len(list(reader)) == 1 and reader.skipped == 2

    def test_bad_types(self):
        with pytest.raises(CorpusError):
            parse_record('{"context": [1], "response": "a"}', 3)


class TestMakeExample:
    vocab = build_vocabulary([tokenize("a b c d e f g h")])

    def test_encodes_and_terminates(self):
        ex = make_example({"context": ["a b", "c"], "response": "d e"}, self.vocab)
        assert ex.context == [[4, 5], [6]] and ex.response == [7, 8, EOS]

    def test_left_truncation(self):
        ex = make_example({"context": ["a b c d", "e", "f", "g"], "response": "h"}, self.vocab, max_utterances=2, pad_len=3)
        assert ex.context == [self.vocab.encode(["f"]), self.vocab.encode(["g"])]
        ex = make_example({"context": ["a b c d"], "response": "h"}, self.vocab, pad_len=3)
        assert ex.context == [self.vocab.encode(["b", "c", "d"])]

    def test_response_truncation(self):
        ex = make_example({"context": ["a"], "response": "a b c d e"}, self.vocab, max_response_len=3)
        assert ex.response == self.vocab.encode(["a", "b"]) + [EOS]

    def test_labels_follow_truncation(self):
        rec = {"context": ["a", "", "b", "c"], "response": "d", "relevance_labels": [True, False, False, True]}
        ex = make_example(rec, self.vocab, max_utterances=2)
        assert ex.relevance_labels == [False, True]

    def test_empty_context_rejected(self):
        with pytest.raises(CorpusError):
            make_example({"context": [""], "response": "a"}, self.vocab)

    def test_empty_response_rejected(self):
        with pytest.raises(CorpusError):
            make_example({"context": ["a"], "response": " "}, self.vocab)


class TestBatching:
    def _examples(self, n=7, seed=0):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            ctx = [rng.integers(4, 20, size=int(rng.integers(1, 6))).tolist() for _ in range(int(rng.integers(1, 4)))]
            resp = rng.integers(4, 20, size=int(rng.integers(1, 5))).tolist() + [EOS]
            out.append(DialogueExample(ctx, resp, [bool(x) for x in rng.integers(0, 2, len(ctx))], rng.dirichlet(np.ones(len(ctx)))))
        return out

    def test_unbatch_recovers_examples(self):
        examples = self._examples()
        back = unbatch(make_batch(examples, pad_len=6))
        for a, b in zip(examples, back):
            assert a.context == b.context and a.response == b.response
            assert a.relevance_labels == b.relevance_labels
            np.testing.assert_array_equal(a.gds_target, b.gds_target)

    def test_decoder_input_is_shifted_response(self):
        b = make_batch(self._examples(3), pad_len=6)
        assert (b.decoder_input[:, 0] == BOS).all()
        np.testing.assert_array_equal(b.decoder_input[:, 1:][b.target_mask[:, 1:]], b.targets[:, :-1][b.target_mask[:, 1:]])
        assert (b.targets[~b.target_mask] == PAD).all()

    def test_unshuffled_batchify_is_lossless(self):
        examples = self._examples(10)
        back = [e for b in batchify(examples, batch_size=3, pad_len=6) for e in unbatch(b)]
        assert [e.context for e in back] == [e.context for e in examples]
        assert [e.response for e in back] == [e.response for e in examples]

    def test_seeded_shuffle_is_a_permutation(self):
        examples = self._examples(10)
        order1 = [e.response for b in batchify(examples, 4, seed=1, epoch=0, pad_len=6) for e in unbatch(b)]
        order2 = [e.response for b in batchify(examples, 4, seed=1, epoch=0, pad_len=6) for e in unbatch(b)]
        assert order1 == order2
        assert sorted(map(tuple, order1)) == sorted(tuple(e.response) for e in examples)


class TestSynth:
    def test_deterministic(self):
        assert synth_corpus(SynthSpec(seed=4)) == synth_corpus(SynthSpec(seed=4))

    def test_single_utterance_labels(self):
        assert all(r["relevance_labels"] == [True] for r in synth_corpus(SynthSpec(n_utterances=1, num_examples=5)))

    def test_one_relevant_slot_and_echoed_keywords(self):
        for r in synth_corpus(SynthSpec(num_examples=20, distractor_ratio=0.6)):
            assert sum(r["relevance_labels"]) == 1
            rel = r["context"][r["relevance_labels"].index(True)].split()
            words = r["response"].split()
            assert words[0] == "echo" and words[1:] == [w for w in rel if w.startswith("k")]

    def test_distractor_ratio(self):
        spec = SynthSpec(num_examples=10, distractor_ratio=0.75)
        for r in synth_corpus(spec):
            rel = r["context"][r["relevance_labels"].index(True)].split()
            assert sum(w.startswith("d") for w in rel) / len(rel) == 0.75

    def test_relevant_slot_gets_above_uniform_mass(self):
        _, _, embedder, examples = synth_examples(SynthSpec(num_examples=100, seed=2))
        for ex in examples:
            p = gds_target(ex.context, ex.response, embedder).p
            assert p[ex.relevance_labels.index(True)] > 1.0 / ex.n

    @pytest.mark.parametrize("bad", [dict(n_utterances=0), dict(distractor_ratio=1.0), dict(vocab_size=5), dict(num_examples=0)])
    def test_invalid_specs(self, bad):
        with pytest.raises(ValueError):
            SynthSpec(**bad).validate()
