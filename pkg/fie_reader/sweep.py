"""One-axis sweeps, seed repeats and the fusion-vs-isolated learnability check."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .core.config import Config
from .core.data import frequency_oracle_predict, generate_synthetic
from .core.errors import ConfigError, FieReaderError
from .core.metrics import evaluate_em
from .core.runner import run_training
from .spec import FusionMode, Objective, ProbSpace, RunConfig


logger = logging.getLogger(__name__)

COMPONENTS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "baseline": {"fusion": {"fusion_mode": "NONE"}, "prob_space": {"variant": "PER_PASSAGE_BASELINE"}},
    "global_prob": {"fusion": {"fusion_mode": "NONE"}, "prob_space": {"variant": "DIRECT_SPAN"}},
    "global_tokens": {"fusion": {"fusion_mode": "GLOBAL_TOKENS"}, "prob_space": {"variant": "PER_PASSAGE_BASELINE"}},
    "both": {"fusion": {"fusion_mode": "GLOBAL_TOKENS"}, "prob_space": {"variant": "DIRECT_SPAN"}},
}

MODEL_SIZES: Dict[str, Dict[str, int]] = {
    "tiny": {"num_layers": 1, "model_dim": 16, "num_heads": 2},
    "small": {"num_layers": 2, "model_dim": 32, "num_heads": 4},
    "base": {"num_layers": 2, "model_dim": 64, "num_heads": 4},
    "large": {"num_layers": 4, "model_dim": 64, "num_heads": 8},
}

INT_AXES = ("num_global_tokens", "num_passages", "num_layers", "model_dim", "steps")

AXES = (
    "num_global_tokens", "num_passages", "components", "fusion_mode", "prob_space", "objective",
    "model_size", "num_layers", "model_dim", "steps",
)

TARGET_MARGIN = 0.15
CHANCE_TOLERANCE = 0.1


def point_config(base: RunConfig, axis: str, value: str | int, seed: Optional[int] = None) -> RunConfig:
    """Base config with one axis set to ``value`` (and the seed, when given)."""
    blocks: Dict[str, Dict[str, Any]] = {}
    if axis == "num_global_tokens":
        blocks["fusion"] = {"num_global_tokens": int(value)}
    elif axis in ("num_passages", "num_layers", "model_dim"):
        blocks["fusion"] = {axis: int(value)}
    elif axis == "model_size":
        if value not in MODEL_SIZES:
            raise ConfigError(f"unknown model size {value!r}; choose from {sorted(MODEL_SIZES)}")
        blocks["fusion"] = dict(MODEL_SIZES[str(value)])
    elif axis == "steps":
        blocks["optim"] = {"steps": int(value)}
    elif axis == "components":
        if value not in COMPONENTS:
            raise ConfigError(f"unknown component set {value!r}; choose from {sorted(COMPONENTS)}")
        blocks = {k: dict(v) for k, v in COMPONENTS[str(value)].items()}
    elif axis == "fusion_mode":
        blocks["fusion"] = {"fusion_mode": FusionMode(str(value).upper()).value}
    elif axis == "prob_space":
        blocks["prob_space"] = {"variant": ProbSpace(str(value).upper()).value}
    elif axis == "objective":
        blocks["prob_space"] = {"objective": Objective(str(value).upper()).value}
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    if seed is not None:
        blocks["optim"] = {**blocks.get("optim", {}), "seed": seed}
        if base.synthetic is not None:
            blocks["synthetic"] = {"seed": seed}
    return base.with_overrides(**blocks)


def parse_values(axis: str, raw: str) -> List[str | int]:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise ConfigError("no sweep values given")
    if axis in INT_AXES:
        try:
            return [int(v) for v in items]
        except ValueError as e:
            raise ConfigError(f"{axis} values must be integers: {raw!r}") from e
    return list(items)


@dataclass
class SweepRow:
    axis: str
    value: str
    seed: int
    em: Optional[float]
    span_em: Optional[float] = None
    error: str = ""


@dataclass
class SweepResult:
    rows: List[SweepRow] = field(default_factory=list)

    def summary(self) -> List[Dict[str, Any]]:
        """Mean EM and its standard error across seeds, per value."""
        out: List[Dict[str, Any]] = []
        values: List[str] = []
        for r in self.rows:
            if r.value not in values:
                values.append(r.value)
        for v in values:
            ems = [r.em for r in self.rows if r.value == v and r.em is not None]
            mean = float(np.mean(ems)) if ems else None
            stderr = float(np.std(ems, ddof=1) / math.sqrt(len(ems))) if len(ems) > 1 else None
            out.append({"value": v, "runs": len(ems), "mean_em": mean, "stderr": stderr})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "value", "seed", "em", "span_em", "error"])
        for r in self.rows:
            em = "" if r.em is None else f"{r.em:.6f}"
            span = "" if r.span_em is None else f"{r.span_em:.6f}"
            w.writerow([r.axis, r.value, r.seed, em, span, r.error])
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "SweepResult":
        rows = []
        for d in csv.DictReader(io.StringIO(text)):
            rows.append(
                SweepRow(
                    axis=d["axis"],
                    value=d["value"],
                    seed=int(d["seed"]),
                    em=float(d["em"]) if d["em"] else None,
                    span_em=float(d["span_em"]) if d["span_em"] else None,
                    error=d["error"],
                )
            )
        return SweepResult(rows)


def sweep(
    base: RunConfig,
    axis: str,
    values: Sequence[str | int],
    run_root: str | Path,
    seeds: Optional[Sequence[int]] = None,
    env: Optional[Config] = None,
) -> SweepResult:
    """Train and evaluate once per (value, seed); failures are recorded and the sweep continues."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(AXES)}")
    seeds = list(seeds) if seeds else [base.optim.seed]
    root = Path(run_root)
    result = SweepResult()
    for value in values:
        for seed in seeds:
            run_dir = root / f"{axis}={value}" / f"seed={seed}"
            try:
                config = point_config(base, axis, value, seed)
                _, _, report = run_training(config, run_dir, env)
                result.rows.append(SweepRow(axis, str(value), seed, report.em, report.span_em))
                logger.info("%s=%s seed %d: EM %.4f", axis, value, seed, report.em)
            except (FieReaderError, ValueError) as e:
                logger.warning("sweep point %s=%s seed %d failed: %s", axis, value, seed, e)
                result.rows.append(SweepRow(axis, str(value), seed, None, None, f"{type(e).__name__}: {e}"))
    (root).mkdir(parents=True, exist_ok=True)
    (root / "sweep.csv").write_text(result.to_csv(), encoding="utf-8")
    return result


# ---------------------------------------------------------------------------
# Learnability check
# ---------------------------------------------------------------------------


def oracle_em(config: RunConfig, split: str = "dev") -> float:
    """EM of counting answer candidates after the question key, on the synthetic split."""
    spec = config.synthetic
    if spec is None:
        raise ConfigError("the oracle needs a synthetic block in the run config")
    records = list(generate_synthetic(spec, split))
    preds = [frequency_oracle_predict(r, spec.answer_len) for r in records]
    return evaluate_em(preds, [r.answers for r in records])


@dataclass
class LearnabilityReport:
    fie_em: float
    none_em: float
    fie_span_em: Optional[float]
    none_span_em: Optional[float]
    chance_level: float
    oracle_em: float
    span_chance_level: float = 0.0

    @property
    def gap(self) -> float:
        return self.fie_em - self.none_em

    @property
    def span_gap(self) -> Optional[float]:
        if self.fie_span_em is None or self.none_span_em is None:
            return None
        return self.fie_span_em - self.none_span_em

    def meets_target(self, margin: float = TARGET_MARGIN, tolerance: float = CHANCE_TOLERANCE) -> bool:
        """Span-level lead of the global-token arm, with the isolated arm near its chance level."""
        gap = self.span_gap
        if gap is None or self.none_span_em is None:
            return False
        return gap >= margin and self.none_span_em <= self.span_chance_level + tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fie_em": self.fie_em,
            "none_em": self.none_em,
            "fie_span_em": self.fie_span_em,
            "none_span_em": self.none_span_em,
            "gap": self.gap,
            "span_gap": self.span_gap,
            "chance_level": self.chance_level,
            "span_chance_level": self.span_chance_level,
            "oracle_em": self.oracle_em,
            "meets_target": self.meets_target(),
        }


def learnability_check(base: RunConfig, run_root: str | Path, env: Optional[Config] = None) -> LearnabilityReport:
    """Train a global-token arm and an isolated-passage arm identically on the aggregation task.

    Both arms are reported with string-aggregated and single-span predictions;
    the isolated arm can still count repeats through string aggregation, so
    the span-level numbers show what each encoder resolves on its own.
    """
    if base.synthetic is None:
        raise ConfigError("the learnability check runs on a synthetic block")
    root = Path(run_root)
    arms = {}
    for name, mode in (("fie", FusionMode.GLOBAL_TOKENS), ("none", FusionMode.NONE)):
        config = base.with_overrides(fusion={"fusion_mode": mode.value})
        _, _, report = run_training(config, root / name, env)
        arms[name] = report
    return LearnabilityReport(
        fie_em=arms["fie"].em,
        none_em=arms["none"].em,
        fie_span_em=arms["fie"].span_em,
        none_span_em=arms["none"].span_em,
        chance_level=base.synthetic.chance_level,
        oracle_em=oracle_em(base),
        span_chance_level=base.synthetic.span_chance_level,
    )
