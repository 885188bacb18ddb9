from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional


logger = logging.getLogger(__name__)

TRUE_WORDS = {"1", "true", "yes", "on"}


def _parse_bool(value: Optional[str], default: bool) -> bool:
    if value is None or not value.strip():
        return default
    return value.strip().lower() in TRUE_WORDS


def load_dotenv(path: str | Path = ".env", override: bool = False) -> List[str]:
    """Copy ``KEY=VALUE`` lines of a .env file into ``os.environ``; returns the keys set.

    Missing files, blank lines, ``#`` comments and lines without ``=`` are
    skipped. Values lose surrounding quotes; nothing is expanded.
    """
    p = Path(path)
    if not p.is_file():
        return []
    loaded: List[str] = []
    for raw in p.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, val = (part.strip() for part in line.split("=", 1))
        if key and (override or key not in os.environ):
            os.environ[key] = val.strip('"').strip("'")
            loaded.append(key)
    if loaded:
        logger.debug("loaded %s from %s", ", ".join(loaded), p)
    return loaded


LOG_LEVELS = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}


@dataclass
class Config:
    """Process-level settings from the environment or defaults.

    - log_level: root logger level for the CLI
    - precision: default float width (f32 | f64) when a run config is silent
    - tracing_enabled: whether runs write trace.jsonl
    - progress: whether training shows progress bars
    - slow_tests: opt-in for the long learnability test
    """

    log_level: str = "INFO"
    precision: str = "f64"
    tracing_enabled: bool = True
    progress: bool = True
    slow_tests: bool = False
    dotenv_path: str = ".env"

    @staticmethod
    def from_env() -> "Config":
        dotenv = os.environ.get("FIE_READER_DOTENV", ".env")
        load_dotenv(dotenv, override=False)
        level = (os.environ.get("FIE_READER_LOG_LEVEL", "INFO") or "INFO").strip().upper()
        precision = (os.environ.get("FIE_READER_PRECISION", "f64") or "f64").strip().lower()
        return Config(
            log_level=level if level in LOG_LEVELS else "INFO",
            precision=precision if precision in {"f32", "f64"} else "f64",
            tracing_enabled=_parse_bool(os.environ.get("FIE_READER_TRACE_ENABLED"), True),
            progress=_parse_bool(os.environ.get("FIE_READER_PROGRESS"), True),
            slow_tests=_parse_bool(os.environ.get("FIE_READER_SLOW_TESTS"), False),
            dotenv_path=dotenv,
        )

    def configure_logging(self) -> None:
        logging.basicConfig(
            level=getattr(logging, self.log_level, logging.INFO),
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        )
