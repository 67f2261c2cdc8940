import numpy as np
import pytest

import oracle
from conftest import random_contexts, tiny_config
from hisa.autodiff import Tensor, gradient_errors
from hisa.decoder import AttentionTrace, LayerTrace, decoder_layer, extract_q_distribution
from hisa.errors import ShapeError
from hisa.gds import mle_loss
from hisa.model import HisaModel, decode_forward


def build(seed=0, scale=0.3, **kw):
    model = HisaModel(tiny_config(**kw))
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0.0, scale, p.data.shape)
    return model


def layer_inputs(model, contexts, t, seed=0):
    rng = np.random.default_rng(seed)
    ctx = model.encode(contexts)
    d_prev = Tensor(rng.normal(size=(len(contexts), t, model.config.d_model)))
    return ctx, d_prev


def run_layer(model, ctx, d_prev, trace=None, gate=None):
    upe = model._upe if model.config.use_upe else None
    return decoder_layer(d_prev, ctx, model.decoder_layers[0], upe=upe, trace=trace, gate_override=gate).data


def oracle_layer(model, ctx, d_prev, b=0, capture=None):
    n = int(ctx.utt_mask[b].sum())
    utts = [ctx.utterance(i, b).data.tolist() for i in range(n)]
    return oracle.decoder_layer(d_prev.data[b].tolist(), utts, model.decoder_layers[0], model.config.use_upe, capture)


class TestDecoderLayer:
    def test_tiny_case_against_scalar_oracle(self):
        model = build(d_model=4, heads=1, d_ff=8)
        ctx, d_prev = layer_inputs(model, [[[4, 5], [6, 7]]], t=2)
        np.testing.assert_allclose(run_layer(model, ctx, d_prev)[0], oracle_layer(model, ctx, d_prev), atol=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_batched_ragged_case_against_oracle(self, seed):
        model = build(seed=seed, d_model=8, heads=2)
        contexts = random_contexts(np.random.default_rng(seed), 3, 12)
        ctx, d_prev = layer_inputs(model, contexts, t=3, seed=seed)
        out = run_layer(model, ctx, d_prev)
        for b in range(3):
            np.testing.assert_allclose(out[b], oracle_layer(model, ctx, d_prev, b), atol=1e-5)

    def test_attention_weights_match_oracle(self):
        model = build(d_model=8, heads=2)
        ctx, d_prev = layer_inputs(model, [[[4, 5, 6], [7], [8, 9]]], t=3)
        trace = AttentionTrace(layers="all")
        trace.records[0] = rec = LayerTrace()
        trace.utt_mask, trace.token_mask = ctx.utt_mask, ctx.token_mask
        run_layer(model, ctx, d_prev, trace=rec)
        cap = {}
        oracle_layer(model, ctx, d_prev, capture=cap)
        # utterance_weights is [h, T, n]; oracle is [t][head][i]
        np.testing.assert_allclose(trace.utterance_weights(0), np.transpose(cap["utterance"], (1, 0, 2)), atol=1e-9)
        for i, w in enumerate(trace.word_weights(0)):
            np.testing.assert_allclose(w, cap["word"][i], atol=1e-9)

    def test_gate_forced_open_gives_ffn_output(self):
        model = build(d_model=8, heads=2)
        ctx, d_prev = layer_inputs(model, [[[4, 5], [6, 7, 8]]], t=3)
        cap = {}
        oracle_layer(model, ctx, d_prev, capture=cap)
        np.testing.assert_allclose(run_layer(model, ctx, d_prev, gate=1.0)[0], cap["F"], atol=1e-9)

    def test_gate_forced_shut_gives_query_summary(self):
        model = build(d_model=8, heads=2)
        ctx, d_prev = layer_inputs(model, [[[4, 5], [6, 7, 8]]], t=3)
        cap = {}
        oracle_layer(model, ctx, d_prev, capture=cap)
        np.testing.assert_allclose(run_layer(model, ctx, d_prev, gate=0.0)[0], cap["u_query"], atol=1e-9)

    def test_output_lies_between_gate_inputs(self):
        model = build(d_model=8, heads=2)
        ctx, d_prev = layer_inputs(model, [[[4, 5], [6, 7, 8]]], t=3)
        open_, shut = run_layer(model, ctx, d_prev, gate=1.0), run_layer(model, ctx, d_prev, gate=0.0)
        out = run_layer(model, ctx, d_prev)
        lo, hi = np.minimum(open_, shut), np.maximum(open_, shut)
        assert ((out >= lo - 1e-12) & (out <= hi + 1e-12)).all()

    def test_single_utterance_attention_is_exactly_one(self):
        model = build(d_model=8, heads=2)
        ctx, d_prev = layer_inputs(model, [[[4, 5, 6]]], t=4)
        rec = LayerTrace()
        run_layer(model, ctx, d_prev, trace=rec)
        assert (rec.utterance.data == 1.0).all()

    def test_utterance_weights_strictly_positive(self):
        model = build(d_model=8, heads=2)
        ctx, d_prev = layer_inputs(model, [[[4, 5], [6], [7, 8, 9]]], t=3)
        rec = LayerTrace()
        run_layer(model, ctx, d_prev, trace=rec)
        assert (rec.utterance.data > 0).all()
        np.testing.assert_allclose(rec.utterance.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_rejects_bad_input_shape(self):
        model = build()
        ctx, _ = layer_inputs(model, [[[4]]], t=1)
        with pytest.raises(ShapeError):
            decoder_layer(Tensor(np.zeros((2, 8))), ctx, model.decoder_layers[0])

    def test_every_parameter_gets_a_valid_gradient(self):
        model = build(d_model=8, heads=2)
        ctx_in = [[[4, 5], [6, 7, 8]]]
        prefix, targets = np.array([[1, 9, 10]]), np.array([[9, 10, 2]])
        layer = model.decoder_layers[0]

        def loss():
            return mle_loss(model.decode(prefix, model.encode(ctx_in)), targets)

        errs = gradient_errors(loss, layer.parameters())
        assert max(errs) < 1e-3


class TestDecodeForward:
    @pytest.mark.parametrize("seed", range(10))
    def test_logits_are_causal_exactly(self, seed):
        rng = np.random.default_rng(seed)
        model = build(seed=seed, dec_layers=2, heads=2)
        ctx = model.encode(random_contexts(rng, 1, 12))
        prefix = rng.integers(4, 12, size=5)
        base = decode_forward(prefix, ctx, model).data
        for t in range(4):
            edited = prefix.copy()
            edited[t + 1 :] = rng.integers(4, 12, size=4 - t)
            np.testing.assert_array_equal(decode_forward(edited, ctx, model).data[: t + 1], base[: t + 1])

    def test_probability_rows_sum_to_one(self):
        model = build()
        logits = decode_forward([1, 5, 6], model.encode([[[4, 5]]]), model)
        np.testing.assert_allclose(logits.softmax(axis=-1).data.sum(axis=-1), 1.0, atol=1e-6)

    def test_seeded_model_is_reproducible(self):
        a = HisaModel(tiny_config(init_seed=3))
        b = HisaModel(tiny_config(init_seed=3))
        ctx = [[[4, 5], [6]]]
        np.testing.assert_array_equal(
            decode_forward([1, 7], a.encode(ctx), a).data, decode_forward([1, 7], b.encode(ctx), b).data
        )


class TestExtractQ:
    def test_single_utterance(self):
        model = build()
        trace = AttentionTrace()
        model.decode([1, 5, 6], model.encode([[[4, 5]]]), trace)
        np.testing.assert_array_equal(extract_q_distribution(trace).data, [[1.0]])

    def _trace_from(self, w):
        b, t, h, n = w.shape
        trace = AttentionTrace()
        trace.records[0] = LayerTrace(utterance=Tensor(w))
        trace.utt_mask = np.ones((b, n), dtype=bool)
        return trace

    def test_one_position_one_head_is_the_row(self):
        w = np.array([[[[0.2, 0.5, 0.3]]]])
        np.testing.assert_array_equal(extract_q_distribution(self._trace_from(w)).data[0], [0.2, 0.5, 0.3])

    def test_mean_against_flat_loop(self):
        rng = np.random.default_rng(0)
        raw = rng.random((1, 3, 2, 4))
        w = raw / raw.sum(axis=-1, keepdims=True)
        got = extract_q_distribution(self._trace_from(w)).data[0]
        ref = []
        for i in range(4):
            total = 0.0
            for t in range(3):
                for h in range(2):
                    total += w[0, t, h, i]
            ref.append(total / 6)
        np.testing.assert_allclose(got, ref, atol=1e-15)

    def test_target_mask_excludes_padding_positions(self):
        w = np.array([[[[0.9, 0.1]], [[0.1, 0.9]]]])
        q = extract_q_distribution(self._trace_from(w), np.array([[True, False]])).data[0]
        np.testing.assert_allclose(q, [0.9, 0.1], atol=1e-15)

    def test_padding_slots_get_zero_mass(self):
        model = build()
        trace = AttentionTrace()
        model.decode(np.array([[1, 5], [1, 6]]), model.encode([[[4]], [[5], [6, 7]]]), trace)
        q = extract_q_distribution(trace).data
        assert q[0, 0] == 0.0
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)

    def test_permutation_without_upe(self):
        model = build(use_upe=False, heads=2)
        utts = [[4, 5], [6, 7, 8], [9, 10]]
        perm = [2, 0, 1]
        q = self._q(model, utts)
        q_perm = self._q(model, [utts[i] for i in perm])
        np.testing.assert_allclose(q_perm, q[perm], atol=1e-12)

    def test_permutation_with_upe_changes_q(self):
        model = build(use_upe=True, heads=2)
        utts = [[4, 5], [6, 7, 8], [9, 10]]
        perm = [2, 0, 1]
        q = self._q(model, utts)
        q_perm = self._q(model, [utts[i] for i in perm])
        assert np.abs(q_perm - q[perm]).max() > 1e-6

    @staticmethod
    def _q(model, utts):
        trace = AttentionTrace()
        model.decode([1, 11, 5, 6], model.encode([utts]), trace)
        return extract_q_distribution(trace).data[0]

    def test_empty_trace(self):
        with pytest.raises(ValueError):
            extract_q_distribution(AttentionTrace())
