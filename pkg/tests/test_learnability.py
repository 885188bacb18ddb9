import tempfile
import unittest

from fie_reader.core.config import Config
from fie_reader.spec import FusionConfig, OptimConfig, RunConfig, SyntheticTaskSpec
from fie_reader.sweep import CHANCE_TOLERANCE, TARGET_MARGIN, learnability_check

ENV = Config.from_env()


@unittest.skipUnless(ENV.slow_tests, "set FIE_READER_SLOW_TESTS=1 to train both arms")
class TestLearnability(unittest.TestCase):
    def test_global_tokens_arm_learns_the_aggregation_task(self):
        config = RunConfig(
            fusion=FusionConfig(num_layers=2, model_dim=64, num_heads=4, num_passages=8, passage_seq_len=24, num_global_tokens=4, max_answer_len=2),
            optim=OptimConfig(steps=1500, learning_rate=3e-3, batch_size=4, eval_every=500, eval_limit=100),
            synthetic=SyntheticTaskSpec(vocab_size=200, num_passages=8, passage_len=16, answer_len=2, num_plants=3, num_distractors=3, num_train=2000, num_dev=100),
        )
        with tempfile.TemporaryDirectory() as root:
            report = learnability_check(config, root, Config(progress=False))
        self.assertEqual(report.oracle_em, 1.0)
        for em in (report.fie_em, report.none_em, report.fie_span_em, report.none_span_em):
            self.assertGreaterEqual(em, 0.0)
            self.assertLessEqual(em, 1.0)
        self.assertLessEqual(report.none_span_em, report.span_chance_level + CHANCE_TOLERANCE, report.to_dict())
        self.assertGreaterEqual(report.span_gap, TARGET_MARGIN, report.to_dict())
        self.assertTrue(report.meets_target())


if __name__ == "__main__":
    unittest.main()
