import json
import tempfile
import unittest
from pathlib import Path

from numpy.testing import assert_array_equal

from fie_reader.core.data import (
    DatasetRecord,
    Passage,
    Vocab,
    build_vocab,
    build_vocab_and_tokenize,
    frequency_oracle_predict,
    generate_synthetic,
    load_jsonl,
    load_jsonl_report,
    locate_answer,
    tokenize,
    tokenize_record,
    vocab_from_spec,
    write_jsonl,
)
from fie_reader.core.errors import DataError, SpecError, VocabularyError
from fie_reader.spec import FusionConfig, FusionMode, SyntheticTaskSpec


def fusion(**kw):
    base = dict(num_layers=1, model_dim=8, num_heads=2, num_passages=2, passage_seq_len=10, num_global_tokens=2, max_answer_len=3)
    base.update(kw)
    return FusionConfig(**base)


class TestLoadJsonl(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, lines):
        path = self.dir / "d.jsonl"
        path.write_text("\n".join(lines), encoding="utf-8")
        return path

    def test_empty_file(self):
        with self.assertRaises(DataError):
            load_jsonl(self._write([]))

    def test_one_record(self):
        line = json.dumps({"question": "who", "answers": ["x"], "passages": [{"title": "t", "text": "x y"}]})
        records = load_jsonl(self._write([line]))
        self.assertEqual(len(records), 1)
        self.assertEqual(records[0].question, "who")
        self.assertEqual(records[0].answers, ["x"])
        self.assertEqual(records[0].passages, [Passage("t", "x y")])

    def test_missing_answers_skipped_in_eval_mode(self):
        good = json.dumps({"question": "who", "answers": ["x"], "passages": [{"title": "", "text": "x"}]})
        bad = json.dumps({"question": "what", "passages": [{"title": "", "text": "y"}]})
        report = load_jsonl_report(self._write([good, bad, "{not json"]), require_answers=True)
        self.assertEqual(len(report.records), 1)
        self.assertEqual([line for line, _ in report.skipped], [2, 3])

    def test_strict_mode_aborts(self):
        good = json.dumps({"question": "who", "answers": ["x"], "passages": []})
        with self.assertRaisesRegex(DataError, ":2:"):
            load_jsonl(self._write([good, "[1, 2]"]), strict=True)

    def test_unreadable_file(self):
        with self.assertRaises(DataError):
            load_jsonl(self.dir / "missing.jsonl")

    def test_write_then_load(self):
        rec = DatasetRecord("who", ["x"], [Passage("t", "x y")])
        path = self.dir / "out.jsonl"
        self.assertEqual(write_jsonl(path, [rec, rec]), 2)
        self.assertEqual(load_jsonl(path), [rec, rec])


class TestVocab(unittest.TestCase):
    def test_specials_and_globals_come_first(self):
        vocab = Vocab.build(["a", "b"], num_global_slots=2)
        self.assertEqual(vocab.id_to_token[:6], ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[G0]", "[G1]"])
        assert_array_equal(vocab.global_ids(2), [4, 5])
        with self.assertRaises(VocabularyError):
            vocab.global_ids(3)

    def test_frequency_cutoff(self):
        rec = DatasetRecord("a a", [], [Passage("", "b c c")])
        vocab = build_vocab([rec], 0, min_freq=2)
        self.assertIn("a", vocab.token_to_id)
        self.assertIn("c", vocab.token_to_id)
        self.assertNotIn("b", vocab.token_to_id)
        self.assertEqual(vocab.encode(["b"]), [vocab.unk_id])

    def test_round_trip(self):
        vocab = Vocab.build(["x"], 1)
        self.assertEqual(Vocab.from_dict(vocab.to_dict()).id_to_token, vocab.id_to_token)


class TestTokenize(unittest.TestCase):
    def test_direct_match(self):
        rec = DatasetRecord("a b", ["a b"], [Passage("", "c a b d")])
        vocab, (batch,) = build_vocab_and_tokenize([rec], fusion(num_passages=1), min_freq=1)
        start = int(batch.context_start[0])
        self.assertEqual(start, 4)
        self.assertEqual(batch.gold_spans, [(0, start + 1, start + 2)])
        self.assertEqual(batch.span_text(0, start + 1, start + 2), "a b")

    def test_normalized_match(self):
        self.assertEqual(locate_answer(tokenize("x a b y"), "A, B"), [(1, 2)])

    def test_repeats_non_overlapping(self):
        self.assertEqual(locate_answer(["a", "a", "a"], "a a"), [(0, 1)])
        self.assertEqual(locate_answer(["a", "x", "a"], "a"), [(0, 0), (2, 2)])

    def test_layout_with_title(self):
        rec = DatasetRecord("q", ["z"], [Passage("T", "z")])
        vocab = Vocab.build(tokenize("q t z"), 2)
        batch = tokenize_record(rec, vocab, fusion(num_passages=1))
        ids = batch.passage_ids[0]
        self.assertEqual(ids[0], vocab.cls_id)
        self.assertEqual(ids[2], vocab.sep_id)
        self.assertEqual(ids[4], vocab.sep_id)
        self.assertEqual(int(batch.context_start[0]), 5)
        self.assertEqual(batch.gold_spans, [(0, 5, 5)])
        assert_array_equal(batch.query_positions, [1])

    def test_truncation_loses_answer(self):
        rec = DatasetRecord("q", ["z"], [Passage("", "a b c d e f g h z")])
        vocab = Vocab.build(tokenize("q a b c d e f g h z"), 2)
        batch = tokenize_record(rec, vocab, fusion(num_passages=1, passage_seq_len=8))
        self.assertEqual(int(batch.context_end[0]), 8)
        self.assertTrue(batch.zero_recall)

    def test_missing_passages_are_padded_and_empty_dropped(self):
        rec = DatasetRecord("q", ["z"], [Passage("", ""), Passage("", "z")])
        vocab = Vocab.build(["q", "z"], 2)
        batch = tokenize_record(rec, vocab, fusion(num_passages=2))
        self.assertEqual(batch.gold_spans, [(0, 3, 3)])
        self.assertEqual(int(batch.context_end[1]), int(batch.context_start[1]))
        self.assertTrue(batch.attention_mask[1, 0])

    def test_none_mode_has_no_global_slots(self):
        rec = DatasetRecord("q", ["z"], [Passage("", "z")])
        batch = tokenize_record(rec, Vocab.build(["q", "z"], 2), fusion(fusion_mode=FusionMode.NONE))
        self.assertEqual(batch.num_global, 0)

    def test_permuted_moves_gold(self):
        rec = DatasetRecord("q", ["z"], [Passage("", "a"), Passage("", "z")])
        batch = tokenize_record(rec, Vocab.build(["q", "a", "z"], 2), fusion())
        moved = batch.permuted([1, 0])
        self.assertEqual(moved.gold_spans, [(0, 3, 3)])
        assert_array_equal(moved.passage_ids[0], batch.passage_ids[1])


class TestSynthetic(unittest.TestCase):
    def _count(self, record, phrase):
        n = 0
        for p in record.passages:
            words = p.text.split()
            target = phrase.split()
            n += sum(1 for i in range(len(words) - len(target) + 1) if words[i : i + len(target)] == target)
        return n

    def test_plant_and_distractor_counts(self):
        spec = SyntheticTaskSpec(vocab_size=60, num_passages=8, passage_len=10, answer_len=2, num_plants=3, num_distractors=3, num_train=30)
        for rec in generate_synthetic(spec, "train"):
            key = rec.question.split()[-1]
            self.assertEqual(self._count(rec, f"{key} {rec.answers[0]}"), 3)
            self.assertEqual(self._count(rec, key), 6)
            self.assertEqual(frequency_oracle_predict(rec, spec.answer_len), rec.answers[0])

    def test_single_plant_control(self):
        spec = SyntheticTaskSpec(vocab_size=60, num_passages=4, passage_len=8, answer_len=1, num_plants=1, num_distractors=0, requires_aggregation=False, num_dev=10)
        for rec in generate_synthetic(spec, "dev"):
            self.assertEqual(self._count(rec, rec.answers[0]), 1)
            self.assertEqual(frequency_oracle_predict(rec, 1), rec.answers[0])

    def test_deterministic(self):
        spec = SyntheticTaskSpec(vocab_size=50, num_passages=4, passage_len=8, num_plants=2, num_distractors=1, seed=3, num_train=5)
        a = [r.to_dict() for r in generate_synthetic(spec)]
        b = [r.to_dict() for r in generate_synthetic(spec)]
        self.assertEqual(json.dumps(a), json.dumps(b))
        c = [r.to_dict() for r in generate_synthetic(spec, "dev", count=5)]
        self.assertNotEqual(a, c)

    def test_infeasible(self):
        spec = SyntheticTaskSpec(num_passages=3, num_plants=3, num_distractors=2)
        with self.assertRaises(SpecError):
            list(generate_synthetic(spec))

    def test_invalid_spec(self):
        with self.assertRaises(SpecError):
            SyntheticTaskSpec(num_plants=1, requires_aggregation=True)

    def test_every_record_tokenizes_with_recall(self):
        spec = SyntheticTaskSpec(vocab_size=60, num_passages=4, passage_len=8, answer_len=2, num_plants=2, num_distractors=1, num_train=10)
        vocab = vocab_from_spec(spec, 2)
        fz = fusion(num_passages=4, passage_seq_len=14)
        for rec in generate_synthetic(spec):
            batch = tokenize_record(rec, vocab, fz)
            self.assertEqual(len(batch.gold_spans), 2)


if __name__ == "__main__":
    unittest.main()
