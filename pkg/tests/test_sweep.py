import tempfile
import unittest
from pathlib import Path

from fie_reader.core.config import Config
from fie_reader.core.errors import ConfigError
from fie_reader.spec import FusionConfig, FusionMode, OptimConfig, ProbSpace, RunConfig, SyntheticTaskSpec
from fie_reader.sweep import MODEL_SIZES, LearnabilityReport, SweepResult, SweepRow, oracle_em, parse_values, point_config, sweep

ENV = Config(progress=False, tracing_enabled=False)


def base_config():
    return RunConfig(
        fusion=FusionConfig(num_layers=1, model_dim=8, num_heads=2, num_passages=4, passage_seq_len=14, num_global_tokens=2, max_answer_len=2),
        optim=OptimConfig(steps=1, batch_size=2, eval_limit=3),
        synthetic=SyntheticTaskSpec(vocab_size=40, num_passages=4, passage_len=8, answer_len=2, num_plants=2, num_distractors=1, num_train=4, num_dev=3),
    )


class TestPointConfig(unittest.TestCase):
    def test_single_axis_override(self):
        config = point_config(base_config(), "num_global_tokens", 0)
        self.assertEqual(config.fusion.num_global_tokens, 0)
        self.assertEqual(config.fusion.num_passages, 4)

    def test_seed_reaches_data_and_optimizer(self):
        config = point_config(base_config(), "fusion_mode", "none", seed=7)
        self.assertIs(config.fusion.fusion_mode, FusionMode.NONE)
        self.assertEqual(config.optim.seed, 7)
        self.assertEqual(config.synthetic.seed, 7)

    def test_components(self):
        config = point_config(base_config(), "components", "global_prob")
        self.assertIs(config.fusion.fusion_mode, FusionMode.NONE)
        self.assertIs(config.prob_space.variant, ProbSpace.DIRECT_SPAN)
        with self.assertRaises(ConfigError):
            point_config(base_config(), "components", "everything")

    def test_unknown_axis(self):
        with self.assertRaises(ConfigError):
            point_config(base_config(), "depth", 3)

    def test_model_size_presets(self):
        config = point_config(base_config(), "model_size", "large")
        self.assertEqual((config.fusion.num_layers, config.fusion.model_dim, config.fusion.num_heads), (4, 64, 8))
        self.assertEqual(config.fusion.num_global_tokens, 2)
        for name, preset in MODEL_SIZES.items():
            with self.subTest(size=name):
                self.assertEqual(point_config(base_config(), "model_size", name).fusion.model_dim, preset["model_dim"])
        with self.assertRaises(ConfigError):
            point_config(base_config(), "model_size", "huge")

    def test_depth_width_and_steps(self):
        self.assertEqual(point_config(base_config(), "num_layers", 3).fusion.num_layers, 3)
        self.assertEqual(point_config(base_config(), "model_dim", 12).fusion.model_dim, 12)
        with self.assertRaises(ConfigError):
            point_config(base_config(), "model_dim", 9)
        config = point_config(base_config(), "steps", 30, seed=2)
        self.assertEqual((config.optim.steps, config.optim.seed), (30, 2))
        self.assertEqual(config.optim.batch_size, 2)

    def test_parse_values(self):
        self.assertEqual(parse_values("num_passages", "1, 2,4"), [1, 2, 4])
        self.assertEqual(parse_values("steps", "100,200"), [100, 200])
        self.assertEqual(parse_values("model_size", "tiny,base"), ["tiny", "base"])
        self.assertEqual(parse_values("fusion_mode", "NONE,GLOBAL_TOKENS"), ["NONE", "GLOBAL_TOKENS"])
        with self.assertRaises(ConfigError):
            parse_values("num_global_tokens", "a,b")
        with self.assertRaises(ConfigError):
            parse_values("objective", " , ")


class TestSweepResult(unittest.TestCase):
    def test_csv_round_trip(self):
        result = SweepResult([
            SweepRow("fusion_mode", "NONE", 0, 0.5, 0.25),
            SweepRow("fusion_mode", "BOGUS", 0, None, None, "ValueError: 'BOGUS', not a mode"),
        ])
        again = SweepResult.from_csv(result.to_csv())
        self.assertEqual(again.rows, result.rows)

    def test_summary_mean_and_stderr(self):
        rows = [SweepRow("num_passages", "2", s, em) for s, em in enumerate([0.2, 0.4, 0.6])]
        rows.append(SweepRow("num_passages", "4", 0, 1.0))
        summary = SweepResult(rows).summary()
        self.assertEqual([s["value"] for s in summary], ["2", "4"])
        self.assertAlmostEqual(summary[0]["mean_em"], 0.4)
        self.assertAlmostEqual(summary[0]["stderr"], 0.2 / 3 ** 0.5)
        self.assertIsNone(summary[1]["stderr"])


class TestSweep(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_failures_are_recorded_and_the_sweep_continues(self):
        result = sweep(base_config(), "fusion_mode", ["BOGUS", "NONE"], self.root, seeds=[0, 1], env=ENV)
        self.assertEqual(len(result.rows), 4)
        self.assertTrue(all(r.error for r in result.rows[:2]))
        for r in result.rows[2:]:
            self.assertEqual(r.error, "")
            self.assertGreaterEqual(r.em, 0.0)
            self.assertLessEqual(r.em, 1.0)
        self.assertTrue((self.root / "fusion_mode=NONE" / "seed=1" / "report.json").exists())
        written = SweepResult.from_csv((self.root / "sweep.csv").read_text(encoding="utf-8"))
        self.assertEqual([r.value for r in written.rows], ["BOGUS", "BOGUS", "NONE", "NONE"])

    def test_zero_global_tokens_point_trains(self):
        result = sweep(base_config(), "num_global_tokens", [0], self.root, env=ENV)
        self.assertEqual(result.rows[0].error, "")
        self.assertIsNotNone(result.rows[0].em)

    def test_unknown_axis(self):
        with self.assertRaises(ConfigError):
            sweep(base_config(), "width", [1], self.root, env=ENV)


class TestLearnabilityReport(unittest.TestCase):
    def report(self, fie_span, none_span):
        return LearnabilityReport(fie_em=0.9, none_em=0.8, fie_span_em=fie_span, none_span_em=none_span, chance_level=0.25, oracle_em=1.0, span_chance_level=0.5)

    def test_target_needs_margin_and_isolated_arm_near_chance(self):
        self.assertTrue(self.report(0.8, 0.5).meets_target())
        self.assertFalse(self.report(0.6, 0.5).meets_target())
        self.assertFalse(self.report(0.95, 0.75).meets_target())
        self.assertFalse(self.report(None, 0.5).meets_target())

    def test_dict_carries_span_numbers(self):
        d = self.report(0.8, 0.5).to_dict()
        self.assertAlmostEqual(d["span_gap"], 0.3)
        self.assertEqual(d["span_chance_level"], 0.5)
        self.assertTrue(d["meets_target"])

    def test_span_chance_of_the_construction(self):
        spec = SyntheticTaskSpec(num_plants=3, num_distractors=3)
        self.assertEqual(spec.span_chance_level, 0.5)
        self.assertEqual(spec.chance_level, 0.25)


class TestOracle(unittest.TestCase):
    def test_counting_oracle_is_perfect(self):
        self.assertEqual(oracle_em(base_config()), 1.0)

    def test_oracle_needs_synthetic_block(self):
        with self.assertRaises(ConfigError):
            oracle_em(RunConfig())


if __name__ == "__main__":
    unittest.main()
