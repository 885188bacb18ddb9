"""Checkpoint directory: ``manifest.json`` + ``params.bin`` + config, vocabulary and run state.

``params.bin`` is the concatenation of every array as little-endian IEEE-754
values; the manifest maps each name to its shape, dtype, byte offset and
byte length. Optimizer moments are stored alongside parameters under
``optim.m.<name>`` / ``optim.v.<name>``; precision and the optimizer step
count live in ``meta.json``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..spec import RunConfig
from .data import Vocab
from .errors import DataError
from .model import FiEReader
from .optim import Adam
from .state import RunState
from .tensor import Parameter


logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
BLOB = "params.bin"
CONFIG = "config.json"
VOCAB = "vocab.json"
STATE = "state.json"
META = "meta.json"

_LE = {"float32": "<f4", "float64": "<f8"}


def write_arrays(directory: Path, arrays: Dict[str, np.ndarray]) -> None:
    entries: Dict[str, Dict[str, object]] = {}
    offset = 0
    directory.mkdir(parents=True, exist_ok=True)
    with (directory / BLOB).open("wb") as f:
        for name in sorted(arrays):
            arr = arrays[name]
            le = _LE.get(arr.dtype.name)
            if le is None:
                raise DataError(f"cannot store {name} of dtype {arr.dtype}")
            raw = np.ascontiguousarray(arr, dtype=le).tobytes()
            entries[name] = {"shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "length": len(raw)}
            f.write(raw)
            offset += len(raw)
    (directory / MANIFEST).write_text(json.dumps(entries, indent=2), encoding="utf-8")


def read_arrays(directory: Path) -> Dict[str, np.ndarray]:
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
        blob = (directory / BLOB).read_bytes()
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"unreadable checkpoint {directory}: {e}") from e
    arrays: Dict[str, np.ndarray] = {}
    if not isinstance(manifest, dict):
        raise DataError(f"checkpoint manifest in {directory} must map names to entries")
    for name, entry in manifest.items():
        start, length = int(entry["offset"]), int(entry["length"])
        if start + length > len(blob):
            raise DataError(f"checkpoint blob truncated at {name}")
        le = _LE[entry["dtype"]]
        flat = np.frombuffer(blob[start : start + length], dtype=le)
        arrays[name] = flat.astype(entry["dtype"]).reshape(entry["shape"])
    return arrays


@dataclass
class LoadedCheckpoint:
    model: FiEReader
    state: RunState
    optimizer_arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_steps: int = 0

    def restore_optimizer(self, optimizer: Adam) -> None:
        if self.optimizer_arrays:
            optimizer.load_state_arrays(self.optimizer_arrays, self.optimizer_steps)


def save_checkpoint(
    directory: str | Path,
    model: FiEReader,
    optimizer: Optional[Adam] = None,
    state: Optional[RunState] = None,
) -> Path:
    d = Path(directory)
    arrays = {name: p.data for name, p in model.params.items()}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    meta = {
        "precision": model.config.optim.precision,
        "optimizer_steps": optimizer.step_count if optimizer is not None else 0,
    }
    write_arrays(d, arrays)
    (d / META).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    (d / CONFIG).write_text(json.dumps(model.config.to_dict(), indent=2), encoding="utf-8")
    (d / VOCAB).write_text(json.dumps(model.vocab.to_dict(), ensure_ascii=False), encoding="utf-8")
    (d / STATE).write_text(json.dumps((state or RunState()).to_dict(), indent=2), encoding="utf-8")
    logger.info("saved checkpoint with %d arrays to %s", len(arrays), d)
    return d


def load_checkpoint(directory: str | Path) -> LoadedCheckpoint:
    d = Path(directory)
    arrays = read_arrays(d)
    try:
        meta_path = d / META
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        config = RunConfig.from_dict(json.loads((d / CONFIG).read_text(encoding="utf-8")))
        vocab = Vocab.from_dict(json.loads((d / VOCAB).read_text(encoding="utf-8")))
        state_path = d / STATE
        state = RunState.from_dict(json.loads(state_path.read_text(encoding="utf-8"))) if state_path.exists() else RunState()
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"unreadable checkpoint {d}: {e}") from e
    params: Dict[str, Parameter] = {}
    optim: Dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith("optim."):
            optim[name] = arr
        else:
            params[name] = Parameter(name, arr)
    model = FiEReader(config=config, vocab=vocab, params=params)
    return LoadedCheckpoint(model, state, optim, int(meta.get("optimizer_steps", 0)))
