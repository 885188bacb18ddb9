from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict

from .core.errors import ConfigError
from .spec import RunConfig


@dataclass(frozen=True)
class RunLayout:
    """Fixed file names inside one run directory."""

    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def checkpoint(self) -> Path:
        return self.root / "checkpoint"

    @property
    def predictions(self) -> Path:
        return self.root / "predictions.jsonl"

    @property
    def report(self) -> Path:
        return self.root / "report.json"

    @property
    def trace(self) -> Path:
        return self.root / "trace.jsonl"


def scaffold_run(config: RunConfig, dest: str | Path) -> RunLayout:
    layout = RunLayout(Path(dest))
    layout.root.mkdir(parents=True, exist_ok=True)
    layout.config.write_text(json.dumps(config.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")
    return layout


def read_run_config(path: str | Path) -> Dict[str, Any]:
    """Raw run-config object from a JSON file, before overrides are applied."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot load run config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"run config {path} must hold a JSON object")
    return raw
