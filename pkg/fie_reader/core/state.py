from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Literal, Optional


EventType = Literal["start", "eval", "checkpoint", "skip", "abort", "resume", "done"]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class TraceEvent:
    type: str
    data: Dict[str, Any]
    timestamp: str = field(default_factory=_now)


@dataclass
class MetricsRow:
    step: int
    loss: float
    lr: float
    dev_em: Optional[float] = None
    skipped: int = 0

    HEADER = ("step", "loss", "dev_em", "skipped", "lr")

    def to_csv(self) -> str:
        dev = "" if self.dev_em is None else f"{self.dev_em:.6f}"
        return f"{self.step},{self.loss:.6f},{dev},{self.skipped},{self.lr:.8g}"


@dataclass
class RunState:
    """Everything a training run accumulates besides parameters."""

    step: int = 0
    best_dev_em: Optional[float] = None
    skipped_examples: int = 0
    zero_recall_examples: int = 0
    metrics: List[MetricsRow] = field(default_factory=list)
    trace: List[TraceEvent] = field(default_factory=list)

    def add_trace(self, type_: EventType, data: Dict[str, Any]) -> None:
        self.trace.append(TraceEvent(type=type_, data=data))

    def add_metrics(self, row: MetricsRow) -> None:
        self.metrics.append(row)
        if row.dev_em is not None and (self.best_dev_em is None or row.dev_em > self.best_dev_em):
            self.best_dev_em = row.dev_em

    def metrics_csv(self) -> str:
        lines = [",".join(MetricsRow.HEADER)]
        lines += [r.to_csv() for r in self.metrics]
        return "\n".join(lines) + "\n"

    def to_trace_jsonl(self) -> str:
        return "\n".join(json.dumps(vars(e), ensure_ascii=False) for e in self.trace)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "best_dev_em": self.best_dev_em,
            "skipped_examples": self.skipped_examples,
            "zero_recall_examples": self.zero_recall_examples,
            "metrics": [asdict(r) for r in self.metrics],
            "trace": [vars(e) for e in self.trace],
        }

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "RunState":
        return RunState(
            step=int(d.get("step", 0)),
            best_dev_em=d.get("best_dev_em"),
            skipped_examples=int(d.get("skipped_examples", 0)),
            zero_recall_examples=int(d.get("zero_recall_examples", 0)),
            metrics=[MetricsRow(**r) for r in d.get("metrics", [])],
            trace=[TraceEvent(**e) for e in d.get("trace", [])],
        )
