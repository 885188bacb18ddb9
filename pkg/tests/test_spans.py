import math
import unittest

import numpy as np
from numpy.testing import assert_allclose

from fie_reader.core import tensor as T
from fie_reader.core.data import TokenizedBatch
from fie_reader.core.encoder import EncoderOutput, PairCounter
from fie_reader.core.errors import ContractError, DegenerateError, NoPredictionError
from fie_reader.core.gradcheck import finite_diff_check
from fie_reader.core.metrics import normalize_answer
from fie_reader.core.spans import (
    ScoredExample,
    SpanSet,
    StringScoreTable,
    aggregate_strings,
    baseline_start_end,
    count_spans,
    enumerate_spans,
    example_loss,
    global_span_log_softmax,
    global_span_softmax,
    hardem_loss,
    init_span_params,
    mml_loss,
    predict_answer,
    predict_span,
    score_example,
    select_hardem_spans,
    span_classifier,
    span_logits,
    start_end_distributions,
    string_prob_space_variants,
)
from fie_reader.core.tensor import Parameter
from fie_reader.spec import FusionConfig, Objective, ProbSpace, ProbSpaceConfig

PREFIX = ["", "q", ""]
DIM = 4


def make_batch(contexts, seq_len=None, answers=()):
    n = len(contexts)
    s = seq_len or len(PREFIX) + max(len(c) for c in contexts)
    ids = np.zeros((n, s), dtype=np.int64)
    mask = np.zeros((n, s), dtype=bool)
    surfaces = []
    for j, ctx in enumerate(contexts):
        toks = PREFIX + list(ctx)
        ids[j, : len(toks)] = 5
        mask[j, : len(toks)] = True
        surfaces.append(toks + [""] * (s - len(toks)))
    return TokenizedBatch(
        question="q",
        answers=list(answers),
        query_ids=np.array([5], dtype=np.int64),
        passage_ids=ids,
        attention_mask=mask,
        global_slot_ids=np.zeros(0, dtype=np.int64),
        context_start=np.full(n, len(PREFIX), dtype=np.int64),
        context_end=np.array([len(PREFIX) + len(c) for c in contexts], dtype=np.int64),
        passage_tokens=surfaces,
    )


def make_output(batch, seed=0, states=None):
    if states is None:
        states = np.random.default_rng(seed).normal(size=(batch.num_passages, batch.seq_len, DIM))
    return EncoderOutput(
        passage_states=states if isinstance(states, T.Array) else T.constant(states),
        global_states=T.constant(np.zeros((0, DIM))),
        attention_mask=batch.attention_mask,
        pair_counter=PairCounter(),
    )


def make_params(seed=0):
    fusion = FusionConfig(model_dim=DIM, num_heads=2, init_std=0.5)
    return init_span_params(fusion, np.random.default_rng(seed), np.dtype(np.float64))


def zero_head(params):
    params["span.out.weight"].data[...] = 0.0
    return params


def table(probs, strings=None):
    strings = strings or [chr(ord("a") + i) for i in range(len(probs))]
    return StringScoreTable(list(strings), T.constant(np.log(np.asarray(probs, dtype=float))), [[i] for i in range(len(probs))])


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def oracle_logit(params, hs, he):
    x = np.concatenate([hs, he])
    h = _gelu(x @ params["span.hidden.weight"].data + params["span.hidden.bias"].data)
    return float((h @ params["span.out.weight"].data + params["span.out.bias"].data)[0])


class TestEnumerateSpans(unittest.TestCase):
    def test_four_tokens_two_long(self):
        spans = enumerate_spans(make_batch([["a", "b", "c", "d"]]), 2)
        self.assertEqual(len(spans), 7)
        self.assertEqual(int((spans.end == spans.start).sum()), 4)
        self.assertEqual(count_spans(4, 2), 7)

    def test_length_one(self):
        spans = enumerate_spans(make_batch([["a", "b", "c"], ["d", "e"]]), 1)
        self.assertEqual(len(spans), 5)
        self.assertTrue(np.all(spans.start == spans.end))

    def test_empty_context(self):
        batch = make_batch([[]], seq_len=5)
        self.assertEqual(len(enumerate_spans(batch, 3)), 0)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            lengths = rng.integers(0, 6, size=rng.integers(1, 4))
            batch = make_batch([["w"] * int(k) for k in lengths], seq_len=len(PREFIX) + 6)
            max_len = int(rng.integers(1, 5))
            spans = enumerate_spans(batch, max_len)
            got = list(zip(spans.passage, spans.start, spans.end))
            expected = []
            for j, k in enumerate(lengths):
                lo, hi = len(PREFIX), len(PREFIX) + int(k)
                for st in range(lo, hi):
                    for en in range(lo, hi):
                        if 0 <= en - st < max_len:
                            expected.append((j, st, en))
            self.assertEqual([tuple(map(int, t)) for t in got], expected)

    def test_span_outside_context_is_rejected(self):
        batch = make_batch([["a", "b"]])
        bad = SpanSet(
            passage=np.array([0]),
            start=np.array([1]),
            end=np.array([3]),
            context_start=batch.context_start,
            context_end=batch.context_end,
            seq_len=batch.seq_len,
        )
        with self.assertRaises(ContractError):
            span_logits(make_output(batch), bad, make_params())


class TestSpanLogits(unittest.TestCase):
    def test_zero_final_layer(self):
        batch = make_batch([["a", "b", "c"]])
        logits = span_logits(make_output(batch), enumerate_spans(batch, 2), zero_head(make_params()))
        assert_allclose(logits.data, 0.0)

    def test_identical_states_identical_logits(self):
        batch = make_batch([["a", "b"], ["a", "b"]])
        states = np.random.default_rng(1).normal(size=(1, batch.seq_len, DIM))
        output = make_output(batch, states=np.concatenate([states, states]))
        spans = enumerate_spans(batch, 2)
        logits = span_logits(output, spans, make_params()).data
        half = len(spans) // 2
        assert_allclose(logits[:half], logits[half:], atol=1e-12)

    def test_chunking_does_not_change_logits(self):
        batch = make_batch([["a", "b", "c", "d"], ["e", "f"]])
        output, spans, params = make_output(batch), enumerate_spans(batch, 3), make_params()
        whole = span_logits(output, spans, params).data
        self.assertEqual(len(spans), 12)
        for chunk in (1, 2, 5, 11):
            with self.subTest(chunk=chunk):
                chunked = span_logits(output, spans, params, chunk=chunk).data
                self.assertEqual(chunked.shape, (12,))
                assert_allclose(chunked, whole, atol=1e-12)

    def test_flat_index_rows(self):
        batch = make_batch([["a", "b"], ["c", "d", "e"]])
        spans = enumerate_spans(batch, 1)
        full = spans.flat_index(spans.start)
        assert_allclose(spans.flat_index(spans.start, slice(1, 4)), full[1:4])
        self.assertEqual(int(full[-1]), batch.seq_len + 5)

    def test_gradient_against_finite_differences(self):
        batch = make_batch([["a", "b", "c"]])
        states = Parameter("states", np.random.default_rng(2).normal(size=(1, batch.seq_len, DIM)))
        output = make_output(batch, states=states)
        spans = enumerate_spans(batch, 2)
        params = make_params()
        report = finite_diff_check(lambda: T.take(span_logits(output, spans, params), np.array([3])), [states], rel_tol=1e-5)
        self.assertTrue(report.passed, report.to_dict())


class TestGlobalSoftmax(unittest.TestCase):
    def test_uniform(self):
        assert_allclose(global_span_softmax(T.constant(np.zeros(3))).data, [1 / 3] * 3)

    def test_single(self):
        assert_allclose(global_span_softmax(T.constant(np.array([4.2]))).data, [1.0])

    def test_ln2(self):
        p = global_span_softmax(T.constant(np.array([math.log(2.0), 0.0]))).data
        assert_allclose(p, [2 / 3, 1 / 3], atol=1e-9)

    def test_empty(self):
        with self.assertRaises(DegenerateError):
            global_span_softmax(T.constant(np.zeros(0)))


class TestAggregation(unittest.TestCase):
    def test_duplicate_string_sums(self):
        batch = make_batch([["a", "a", "b"]])
        spans = enumerate_spans(batch, 1)
        tbl = aggregate_strings(global_span_log_softmax(T.constant(np.zeros(3))), spans, batch)
        self.assertEqual(tbl.strings, ["a", "b"])
        assert_allclose(tbl.probabilities, [2 / 3, 1 / 3], atol=1e-12)

    def test_distinct_strings_keep_span_probabilities(self):
        batch = make_batch([["a", "b", "c"]])
        spans = enumerate_spans(batch, 1)
        log_p = global_span_log_softmax(T.constant(np.array([0.1, 0.7, -0.4])))
        tbl = aggregate_strings(log_p, spans, batch)
        assert_allclose(tbl.probabilities, np.exp(log_p.data), atol=1e-12)

    def test_brute_force_grouping_across_passages(self):
        rng = np.random.default_rng(3)
        words = ["x", "y", "Z!", "z"]
        for _ in range(25):
            n = int(rng.integers(1, 4))
            contexts = [[words[int(w)] for w in rng.integers(0, 4, size=rng.integers(1, 6))] for _ in range(n)]
            batch = make_batch(contexts, seq_len=8)
            spans = enumerate_spans(batch, 2)
            log_p = global_span_log_softmax(T.constant(rng.normal(size=len(spans))))
            tbl = aggregate_strings(log_p, spans, batch)
            oracle = {}
            for j, st, en, lp in zip(spans.passage, spans.start, spans.end, log_p.data):
                key = normalize_answer(batch.span_text(int(j), int(st), int(en)))
                oracle[key] = oracle.get(key, 0.0) + math.exp(lp)
            self.assertEqual(set(tbl.strings), set(oracle))
            for s, p in tbl.as_dict().items():
                self.assertAlmostEqual(p, oracle[s], places=9)
            self.assertAlmostEqual(float(tbl.probabilities.sum()), 1.0, places=6)

    def test_shift_invariance(self):
        batch = make_batch([["a", "b", "a"], ["b", "c"]])
        spans = enumerate_spans(batch, 2)
        logits = np.random.default_rng(4).normal(size=len(spans))
        a = aggregate_strings(global_span_log_softmax(T.constant(logits)), spans, batch)
        b = aggregate_strings(global_span_log_softmax(T.constant(logits + 37.5)), spans, batch)
        assert_allclose(a.probabilities, b.probabilities, atol=1e-9)
        self.assertEqual(predict_answer(a)[0], predict_answer(b)[0])


class TestMml(unittest.TestCase):
    def test_half_probability(self):
        self.assertAlmostEqual(float(mml_loss(table([0.5, 0.5]), ["a"]).loss.data), math.log(2.0))

    def test_two_gold_strings(self):
        loss = mml_loss(table([0.3, 0.2, 0.5]), ["a", "b"]).loss
        self.assertAlmostEqual(float(loss.data), -math.log(0.5))

    def test_gold_absent_is_skipped(self):
        result = mml_loss(table([0.5, 0.5]), ["zzz"])
        self.assertTrue(result.skipped)
        self.assertEqual(float(result.loss.data), 0.0)

    def test_empty_table(self):
        empty = StringScoreTable([], T.constant(np.zeros(0)), [])
        with self.assertRaises(DegenerateError):
            mml_loss(empty, ["a"])

    def test_non_negative_and_zero_when_gold_owns_all(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = rng.dirichlet(np.ones(4))
            self.assertGreaterEqual(float(mml_loss(table(p), ["a", "c"]).loss.data), -1e-12)
        self.assertAlmostEqual(float(mml_loss(table([1.0]), ["a"]).loss.data), 0.0)


class TestHardEm(unittest.TestCase):
    def test_singleton_modes_agree(self):
        log_p = T.constant(np.log(np.array([0.4, 0.6])))
        logits = T.constant(np.array([0.0, 1.0]))
        values = [float(hardem_loss(logits, log_p, [1], obj).loss.data) for obj in (
            Objective.MML_PLUS_HARDEM_MAX, Objective.MML_PLUS_HARDEM_MIN, Objective.MML_PLUS_HARDEM_MASS80)]
        assert_allclose(values, [-math.log(0.6)] * 3)

    def test_mass80_greedy_cover(self):
        probs = np.array([0.5, 0.3, 0.05, 0.15])
        chosen = select_hardem_spans(np.log(probs), np.log(probs), [0, 1, 2], Objective.MML_PLUS_HARDEM_MASS80)
        self.assertEqual(sorted(chosen), [0, 1])
        loss = hardem_loss(T.constant(np.log(probs)), T.constant(np.log(probs)), [0, 1, 2], Objective.MML_PLUS_HARDEM_MASS80)
        self.assertAlmostEqual(float(loss.loss.data), -math.log(0.8))

    def test_max_and_min(self):
        logits = np.array([2.0, 1.0, 0.0])
        log_p = global_span_log_softmax(T.constant(logits)).data
        self.assertEqual(select_hardem_spans(logits, log_p, [0, 1], Objective.MML_PLUS_HARDEM_MAX), [0])
        self.assertEqual(select_hardem_spans(logits, log_p, [0, 1], Objective.MML_PLUS_HARDEM_MIN), [1])

    def test_combined_objective_weight(self):
        batch = make_batch([["a", "b", "a"]], answers=["a"])
        output, params = make_output(batch), make_params()
        mml = example_loss(score_example(output, batch, params, ProbSpaceConfig(), 1), ["a"], ProbSpaceConfig())
        prob = ProbSpaceConfig(objective=Objective.MML_PLUS_HARDEM_MAX, hardem_weight=0.1)
        combined = example_loss(score_example(output, batch, params, prob, 1), ["a"], prob)
        self.assertAlmostEqual(float(combined.loss.data), mml.mml + 0.1 * combined.hardem, places=12)


class TestStartEndSpaces(unittest.TestCase):
    def test_single_position(self):
        batch = make_batch([["a"]])
        spans = enumerate_spans(batch, 1)
        for space in (ProbSpace.PER_PASSAGE_BASELINE, ProbSpace.SEPARATE_GLOBAL, ProbSpace.NONCOND_START_END):
            _, log_p = baseline_start_end(make_output(batch), spans, batch, make_params(), space)
            assert_allclose(np.exp(log_p.data), [1.0], atol=1e-12)

    def test_normalization_contracts(self):
        batch = make_batch([["a", "b", "c"], ["d", "e"]])
        output, params = make_output(batch), make_params()
        ps, pe = start_end_distributions(output, batch, params, ProbSpace.PER_PASSAGE_BASELINE)
        assert_allclose(ps.sum(axis=1), [1.0, 1.0], atol=1e-12)
        assert_allclose(pe.sum(axis=1), [1.0, 1.0], atol=1e-12)
        ps, pe = start_end_distributions(output, batch, params, ProbSpace.SEPARATE_GLOBAL)
        self.assertAlmostEqual(float(ps.sum()), 1.0, places=12)

    def test_cross_occurrence_span(self):
        batch = make_batch([["x", "m", "m", "m", "x"]])
        output, params = make_output(batch), make_params()
        ps, pe = start_end_distributions(output, batch, params, ProbSpace.SEPARATE_GLOBAL)
        first, last = len(PREFIX), len(PREFIX) + 4
        self.assertGreater(ps[0, first] * pe[0, last], 0.0)
        spans = enumerate_spans(batch, 2)
        self.assertFalse(any(int(s) == first and int(e) == last for s, e in zip(spans.start, spans.end)))

    def test_product_spaces_are_unnormalized_tables(self):
        batch = make_batch([["a", "b", "c"]], answers=["b"])
        scored = score_example(make_output(batch), batch, make_params(), ProbSpaceConfig(variant=ProbSpace.PER_PASSAGE_BASELINE), 2)
        self.assertFalse(scored.table.normalized)
        self.assertLessEqual(float(scored.table.probabilities.sum()), 1.0 + 1e-12)


class TestStringVariants(unittest.TestCase):
    def test_logit_sum_differs_from_direct(self):
        batch = make_batch([["a", "a", "b"]])
        output, params, spans = make_output(batch), zero_head(make_params()), enumerate_spans(batch, 1)
        v = string_prob_space_variants(output, spans, batch, params, ProbSpace.LOGIT_SUM_STRING)
        assert_allclose(v.as_dict()["a"], 0.5, atol=1e-12)
        direct = aggregate_strings(global_span_log_softmax(span_logits(output, spans, params)), spans, batch)
        assert_allclose(direct.as_dict()["a"], 2 / 3, atol=1e-12)

    def test_singleton_strings_reduce_to_direct(self):
        batch = make_batch([["a", "b", "c"]])
        output, params, spans = make_output(batch), make_params(), enumerate_spans(batch, 1)
        direct = np.exp(global_span_log_softmax(span_logits(output, spans, params)).data)
        for variant in (ProbSpace.LOGIT_SUM_STRING, ProbSpace.SPAN_REPR_SUM_STRING):
            tbl = string_prob_space_variants(output, spans, batch, params, variant)
            assert_allclose(tbl.probabilities, direct, atol=1e-12)

    def test_repr_sum_of_duplicates(self):
        batch = make_batch([["a", "a", "b"]])
        states = np.random.default_rng(6).normal(size=(1, batch.seq_len, DIM))
        states[0, len(PREFIX) + 1] = states[0, len(PREFIX)]
        output, params, spans = make_output(batch, states=states), make_params(), enumerate_spans(batch, 1)
        tbl = string_prob_space_variants(output, spans, batch, params, ProbSpace.SPAN_REPR_SUM_STRING)
        h_a, h_b = states[0, len(PREFIX)], states[0, len(PREFIX) + 2]
        reps = T.constant(np.stack([2 * np.concatenate([h_a, h_a]), np.concatenate([h_b, h_b])]))
        expected = T.log_softmax(span_classifier(reps, params), axis=0).data
        assert_allclose(tbl.log_scores.data, expected, atol=1e-12)


class TestPredict(unittest.TestCase):
    def test_argmax(self):
        self.assertEqual(predict_answer(table([0.7, 0.3])), ("a", 0.7))

    def test_tie_goes_to_lower_passage(self):
        batch = make_batch([["b"], ["a"]])
        spans = enumerate_spans(batch, 1)
        tbl = aggregate_strings(global_span_log_softmax(T.constant(np.zeros(2))), spans, batch)
        self.assertEqual(predict_answer(tbl)[0], "b")

    def test_empty(self):
        with self.assertRaises(NoPredictionError):
            predict_answer(StringScoreTable([], T.constant(np.zeros(0)), []))

    def test_punctuation_only_span_is_never_predicted(self):
        batch = make_batch([[",", "b"]])
        spans = enumerate_spans(batch, 1)
        logits = T.constant(np.array([2.0, 0.0]))
        log_probs = global_span_log_softmax(logits)
        tbl = aggregate_strings(log_probs, spans, batch)
        self.assertEqual(tbl.strings, ["", "b"])
        answer, prob = predict_answer(tbl)
        self.assertEqual(answer, "b")
        assert_allclose(prob, 1.0 / (1.0 + math.exp(2.0)), atol=1e-12)
        self.assertEqual(predict_span(ScoredExample(spans, logits, log_probs, tbl), batch)[0], "b")

    def test_only_empty_strings(self):
        with self.assertRaises(NoPredictionError):
            predict_answer(table([0.6, 0.4], ["", ""]))

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        words = ["p", "q", "r"]
        params = make_params(1)
        for trial in range(100):
            n = int(rng.integers(1, 4))
            contexts = [[words[int(w)] for w in rng.integers(0, 3, size=rng.integers(1, 5))] for _ in range(n)]
            batch = make_batch(contexts, seq_len=8)
            output = make_output(batch, seed=trial)
            spans = enumerate_spans(batch, batch.seq_len)
            probs = global_span_softmax(span_logits(output, spans, params)).data
            states = output.passage_states.data
            keys, logits = [], []
            for j in range(n):
                lo, hi = int(batch.context_start[j]), int(batch.context_end[j])
                for st in range(lo, hi):
                    for en in range(st, hi):
                        keys.append(normalize_answer(batch.span_text(j, st, en)))
                        logits.append(oracle_logit(params, states[j, st], states[j, en]))
            e = np.exp(np.array(logits) - max(logits))
            oracle = e / e.sum()
            assert_allclose(probs, oracle, atol=1e-9)
            grouped = {}
            for k, p in zip(keys, oracle):
                grouped[k] = grouped.get(k, 0.0) + p
            best = max(grouped, key=grouped.get)
            tbl = aggregate_strings(global_span_log_softmax(span_logits(output, spans, params)), spans, batch)
            self.assertEqual(predict_answer(tbl)[0], best)


if __name__ == "__main__":
    unittest.main()
