import unittest
from fractions import Fraction

from fie_reader.bench import (
    CSV_HEADER,
    BenchRow,
    GridPoint,
    bench_forward,
    closed_form,
    grid_points,
    measure_pairs,
    overhead_ratio,
    pairs_fie,
    pairs_vanilla,
    parse_csv,
    rows_to_csv,
    verify_counts,
    wall_time_violations,
)
from fie_reader.core.errors import ConfigError
from fie_reader.spec import FusionMode


class TestClosedForms(unittest.TestCase):
    def test_reference_configuration(self):
        self.assertEqual(pairs_fie(12, 100, 250, 10), 81_001_200)
        self.assertEqual(pairs_vanilla(12, 100, 250), 75_000_000)
        ratio = overhead_ratio(FusionMode.GLOBAL_TOKENS, 12, 100, 250, 10)
        self.assertAlmostEqual(float(ratio.exact), 1.080016, places=6)
        self.assertEqual(ratio.approx, Fraction(108, 100))
        self.assertEqual(ratio.dropped_term, Fraction(16, 1_000_000))

    def test_full_concat_ratio(self):
        ratio = overhead_ratio(FusionMode.FULL_CONCAT, 12, 100, 250)
        self.assertEqual(ratio.exact, Fraction(37, 4))
        self.assertEqual(ratio.approx, Fraction(37, 4))

    def test_zero_globals_is_vanilla(self):
        for mode in (FusionMode.GLOBAL_TOKENS, FusionMode.GLOBAL_TO_CLS_ONLY):
            self.assertEqual(closed_form(mode, 3, 4, 5, 0), pairs_vanilla(3, 4, 5))

    def test_single_passage_full_concat_is_vanilla(self):
        self.assertEqual(closed_form(FusionMode.FULL_CONCAT, 4, 1, 7, 0), pairs_vanilla(4, 1, 7))

    def test_large_inputs_stay_exact(self):
        self.assertEqual(pairs_vanilla(10**6, 10**6, 10**6), 10**24)

    def test_negative_inputs(self):
        with self.assertRaises(ConfigError):
            pairs_fie(1, -1, 2, 0)

    def test_expanded_identity_over_small_grid(self):
        for p in grid_points("small"):
            with self.subTest(point=p):
                expected = p.L * p.N * p.S**2 + 2 * p.L * p.N * p.S * p.G + p.L * p.G**2
                self.assertEqual(pairs_fie(p.L, p.N, p.S, p.G), expected)


class TestInstrumentedCounts(unittest.TestCase):
    def test_small_grid_matches_every_mode(self):
        report = verify_counts("small", tuple(FusionMode))
        self.assertEqual(len(report.rows), 81 * len(FusionMode))
        self.assertTrue(report.passed, [(r.mode.value, r.point, r.pairs_measured, r.pairs_closed) for r in report.failures()])

    def test_layer_breakdown_sums_to_total(self):
        point = grid_points("tiny")[-1]
        counter = measure_pairs(FusionMode.GLOBAL_TOKENS, point)
        breakdown = counter.layer_breakdown()
        self.assertEqual(len(breakdown), point.L)
        self.assertEqual(sum(b["passage"] + b["global"] for b in breakdown), counter.total)

    def test_unknown_grid(self):
        with self.assertRaises(ConfigError):
            grid_points("huge")


class TestBenchOutput(unittest.TestCase):
    def test_forward_rows_and_csv(self):
        rows = bench_forward("tiny", (FusionMode.NONE, FusionMode.GLOBAL_TOKENS), repeats=1, model_dim=4)
        self.assertEqual(len(rows), 16 * 2)
        for r in rows:
            self.assertEqual(r.pairs_measured, r.pairs_closed)
            self.assertGreaterEqual(r.wall_ms_median, 0.0)
        parsed = parse_csv(rows_to_csv(rows))
        self.assertEqual(len(parsed), len(rows))
        self.assertEqual(tuple(parsed[0].keys()), CSV_HEADER)
        self.assertEqual(parsed[0]["mode"], "NONE")
        self.assertEqual(int(parsed[1]["pairs_closed"]), rows[1].pairs_closed)

    def test_memory_budget_skips_timing(self):
        rows = bench_forward("tiny", (FusionMode.FULL_CONCAT,), repeats=1, model_dim=4, memory_budget=0)
        self.assertTrue(all(r.wall_ms_median is None for r in rows))
        self.assertIn(",,", rows_to_csv(rows).splitlines()[2])

    def test_zero_repeats(self):
        with self.assertRaises(ConfigError):
            bench_forward("tiny", repeats=0)

    def test_csv_header_names(self):
        self.assertEqual(
            CSV_HEADER,
            ("mode", "L", "N", "S", "G", "pairs_closed", "pairs_measured", "ratio_exact", "ratio_paper_approx", "wall_ms_median", "mem_bytes_est"),
        )


def timed_row(N, wall, mode=FusionMode.GLOBAL_TOKENS, G=1):
    point = GridPoint(2, N, 4, G)
    pairs = closed_form(mode, 2, N, 4, G)
    return BenchRow(mode, point, pairs, pairs, overhead_ratio(mode, 2, N, 4, G), wall_ms_median=wall)


class TestWallTimeOrder(unittest.TestCase):
    def test_increasing_series_passes(self):
        rows = [timed_row(1, 1.0), timed_row(2, 1.5), timed_row(4, 3.0)]
        self.assertEqual(wall_time_violations(rows), [])

    def test_small_dip_within_tolerance(self):
        rows = [timed_row(4, 3.0), timed_row(1, 1.0), timed_row(2, 0.95)]
        self.assertEqual(wall_time_violations(rows, tolerance=0.1), [])

    def test_large_drop_is_reported(self):
        rows = [timed_row(1, 1.0), timed_row(2, 2.0), timed_row(4, 1.0)]
        found = wall_time_violations(rows, tolerance=0.1)
        self.assertEqual(len(found), 1)
        mode, earlier, later = found[0]
        self.assertIs(mode, FusionMode.GLOBAL_TOKENS)
        self.assertEqual((earlier.point.N, later.point.N), (2, 4))

    def test_series_are_separate_and_untimed_rows_ignored(self):
        rows = [timed_row(1, 5.0, G=0), timed_row(2, 1.0, G=1), timed_row(2, None, G=0), timed_row(4, 6.0, G=0)]
        self.assertEqual(wall_time_violations(rows), [])


if __name__ == "__main__":
    unittest.main()
