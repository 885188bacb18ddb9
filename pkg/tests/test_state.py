import json
import unittest

from fie_reader.core.state import MetricsRow, RunState


class TestMetrics(unittest.TestCase):
    def test_best_dev_em_tracks_maximum(self):
        state = RunState()
        state.add_metrics(MetricsRow(1, 2.0, 1e-3, dev_em=0.25))
        state.add_metrics(MetricsRow(2, 1.5, 1e-3))
        state.add_metrics(MetricsRow(3, 1.0, 5e-4, dev_em=0.5))
        state.add_metrics(MetricsRow(4, 0.9, 1e-4, dev_em=0.4))
        self.assertEqual(state.best_dev_em, 0.5)

    def test_csv(self):
        state = RunState()
        state.add_metrics(MetricsRow(1, 0.5, 0.001, skipped=2))
        self.assertEqual(state.metrics_csv(), "step,loss,dev_em,skipped,lr\n1,0.500000,,2,0.001\n")


class TestTrace(unittest.TestCase):
    def test_events_serialize_as_jsonl(self):
        state = RunState()
        state.add_trace("start", {"steps": 3})
        state.add_trace("done", {"step": 3})
        lines = [json.loads(line) for line in state.to_trace_jsonl().splitlines()]
        self.assertEqual([e["type"] for e in lines], ["start", "done"])
        self.assertEqual(lines[0]["data"], {"steps": 3})
        self.assertIn("timestamp", lines[0])

    def test_round_trip_keeps_counters(self):
        state = RunState(step=7, best_dev_em=0.3, skipped_examples=2, zero_recall_examples=1)
        again = RunState.from_dict(state.to_dict())
        self.assertEqual((again.step, again.best_dev_em, again.skipped_examples, again.zero_recall_examples), (7, 0.3, 2, 1))
        self.assertEqual(again.metrics, [])

    def test_round_trip_carries_metrics_and_trace(self):
        state = RunState(step=2)
        state.add_metrics(MetricsRow(1, 0.75, 0.001, skipped=1))
        state.add_metrics(MetricsRow(2, 0.5, 0.002, dev_em=0.25))
        state.add_trace("start", {"steps": 4})
        again = RunState.from_dict(json.loads(json.dumps(state.to_dict())))
        self.assertEqual(again.metrics, state.metrics)
        self.assertEqual(again.metrics_csv(), state.metrics_csv())
        self.assertEqual(again.best_dev_em, 0.25)
        self.assertEqual([(e.type, e.data, e.timestamp) for e in again.trace], [(e.type, e.data, e.timestamp) for e in state.trace])


if __name__ == "__main__":
    unittest.main()
