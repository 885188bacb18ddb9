"""Attention-pair cost model, counter verification and forward-pass timing.

Costs are counted as (query, key) score entries per attention layer; the
feed-forward sublayers are excluded, matching the cost model being checked.
All counts are Python ints, so large configurations never overflow.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import os
import statistics
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .core.data import random_batch
from .core.encoder import PairCounter, encoder_forward, init_encoder_params
from .core.errors import ConfigError
from .core.tensor import resolve_dtype
from .spec import FusionConfig, FusionMode


logger = logging.getLogger(__name__)

CSV_HEADER = (
    "mode", "L", "N", "S", "G",
    "pairs_closed", "pairs_measured", "ratio_exact", "ratio_paper_approx",
    "wall_ms_median", "mem_bytes_est",
)

GRIDS: Dict[str, Dict[str, Tuple[int, ...]]] = {
    "tiny": {"L": (1, 2), "N": (1, 2), "S": (2, 4), "G": (0, 1)},
    "small": {"L": (1, 2, 3), "N": (1, 2, 4), "S": (2, 4, 8), "G": (0, 1, 3)},
    "medium": {"L": (2,), "N": (2, 4, 8, 16), "S": (16, 32), "G": (0, 4, 10)},
}

VERIFY_MODEL_DIM = 4
VERIFY_HEADS = 2
DEFAULT_MEMORY_BUDGET = 512 * 1024 * 1024


def _check(*values: int) -> None:
    if any(v < 0 for v in values):
        raise ConfigError(f"cost inputs must be non-negative, got {values}")


def pairs_vanilla(L: int, N: int, S: int) -> int:
    _check(L, N, S)
    return L * N * S * S


def pairs_fie(L: int, N: int, S: int, G: int) -> int:
    """Passage rows see S own keys plus G globals; global rows see all N*S tokens plus G globals."""
    _check(L, N, S, G)
    return L * (N * S * (S + G) + G * (N * S + G))


def pairs_global_to_cls(L: int, N: int, S: int, G: int) -> int:
    _check(L, N, S, G)
    return L * (N * S * (S + G) + G * (N + G))


def pairs_cls_to_cls(L: int, N: int, S: int) -> int:
    _check(L, N, S)
    return L * (N * S * S + N * (N - 1))


def pairs_full_concat(L: int, N: int, S: int) -> int:
    """Per-passage layers, then one last layer over the full N*S concatenation."""
    _check(L, N, S)
    if L < 1:
        return 0
    return (L - 1) * N * S * S + (N * S) ** 2


def closed_form(mode: FusionMode, L: int, N: int, S: int, G: int) -> int:
    if mode is FusionMode.NONE:
        return pairs_vanilla(L, N, S)
    if mode in (FusionMode.GLOBAL_TOKENS, FusionMode.QUERY_AS_GLOBAL):
        return pairs_fie(L, N, S, G)
    if mode is FusionMode.GLOBAL_TO_CLS_ONLY:
        return pairs_global_to_cls(L, N, S, G)
    if mode is FusionMode.CLS_TO_CLS:
        return pairs_cls_to_cls(L, N, S)
    return pairs_full_concat(L, N, S)


def effective_globals(mode: FusionMode, G: int) -> int:
    return G if mode.uses_global_tokens else 0


@dataclass
class OverheadRatio:
    exact: Fraction
    approx: Optional[Fraction]

    @property
    def dropped_term(self) -> Optional[Fraction]:
        return None if self.approx is None else self.exact - self.approx


def overhead_ratio(mode: FusionMode, L: int, N: int, S: int, G: int = 0) -> OverheadRatio:
    """Exact pair-count ratio to the vanilla encoder, with the leading-order approximation where one exists.

    Global-token modes approximate as 1 + 2G/S and full concatenation as
    1 + (N-1)/L.
    """
    base = pairs_vanilla(L, N, S)
    if base == 0:
        raise ConfigError("vanilla pair count is zero; ratio undefined")
    exact = Fraction(closed_form(mode, L, N, S, G), base)
    approx: Optional[Fraction] = None
    if mode in (FusionMode.GLOBAL_TOKENS, FusionMode.QUERY_AS_GLOBAL):
        approx = 1 + Fraction(2 * G, S)
    elif mode is FusionMode.FULL_CONCAT:
        approx = 1 + Fraction(N - 1, L)
    elif mode is FusionMode.NONE:
        approx = Fraction(1)
    return OverheadRatio(exact, approx)


# ---------------------------------------------------------------------------
# Instrumented verification and timing
# ---------------------------------------------------------------------------


@dataclass
class GridPoint:
    L: int
    N: int
    S: int
    G: int

    def fusion(self, mode: FusionMode, model_dim: int = VERIFY_MODEL_DIM, heads: int = VERIFY_HEADS) -> FusionConfig:
        return FusionConfig(
            num_layers=self.L,
            model_dim=model_dim,
            num_heads=heads,
            num_passages=self.N,
            passage_seq_len=self.S,
            num_global_tokens=self.G,
            fusion_mode=mode,
            max_answer_len=1,
        )


def grid_points(grid: str | Dict[str, Sequence[int]]) -> List[GridPoint]:
    axes = GRIDS.get(grid) if isinstance(grid, str) else grid
    if axes is None:
        raise ConfigError(f"unknown grid {grid!r}; choose from {sorted(GRIDS)}")
    return [GridPoint(L, N, S, G) for L, N, S, G in itertools.product(axes["L"], axes["N"], axes["S"], axes["G"])]


@dataclass
class BenchRow:
    mode: FusionMode
    point: GridPoint
    pairs_closed: int
    pairs_measured: Optional[int]
    ratio: OverheadRatio
    wall_ms_median: Optional[float] = None
    mem_bytes_est: int = 0
    layers: List[Dict[str, int]] = field(default_factory=list)

    @property
    def matches(self) -> bool:
        return self.pairs_measured == self.pairs_closed

    def csv_row(self) -> List[str]:
        p = self.point
        approx = "" if self.ratio.approx is None else f"{float(self.ratio.approx):.6f}"
        wall = "" if self.wall_ms_median is None else f"{self.wall_ms_median:.4f}"
        measured = "" if self.pairs_measured is None else str(self.pairs_measured)
        return [
            self.mode.value, str(p.L), str(p.N), str(p.S), str(p.G),
            str(self.pairs_closed), measured, f"{float(self.ratio.exact):.6f}", approx, wall, str(self.mem_bytes_est),
        ]


def mem_bytes_est(mode: FusionMode, point: GridPoint, model_dim: int, heads: int, precision: str = "f64") -> int:
    """States plus the largest single-layer score tensor, at the given precision."""
    item = resolve_dtype(precision).itemsize
    g = effective_globals(mode, point.G)
    layer_pairs = closed_form(mode, 1, point.N, point.S, point.G)
    states = (point.N * point.S + g) * model_dim
    return int((states + heads * layer_pairs) * item)


def _measure(mode: FusionMode, point: GridPoint, rng: np.random.Generator, model_dim: int, heads: int, precision: str):
    fusion = point.fusion(mode, model_dim, heads)
    vocab_size = 4 + point.G + 8
    params = init_encoder_params(fusion, vocab_size, rng, resolve_dtype(precision))
    batch = random_batch(fusion, vocab_size, rng)
    return fusion, params, batch


def measure_pairs(mode: FusionMode, point: GridPoint, seed: int = 0) -> PairCounter:
    rng = np.random.default_rng(seed)
    fusion, params, batch = _measure(mode, point, rng, VERIFY_MODEL_DIM, VERIFY_HEADS, "f64")
    return encoder_forward(batch, fusion, params).pair_counter


@dataclass
class VerifyReport:
    rows: List[BenchRow]

    @property
    def passed(self) -> bool:
        return all(r.matches for r in self.rows)

    def failures(self) -> List[BenchRow]:
        return [r for r in self.rows if not r.matches]


def verify_counts(
    grid: str | Dict[str, Sequence[int]] = "small",
    modes: Iterable[FusionMode] = tuple(FusionMode),
    seed: int = 0,
) -> VerifyReport:
    """Run the instrumented encoder at every grid point and mode and compare with the closed forms."""
    modes = list(modes)
    rows: List[BenchRow] = []
    for point in grid_points(grid):
        for mode in modes:
            counter = measure_pairs(mode, point, seed)
            row = BenchRow(
                mode=mode,
                point=point,
                pairs_closed=closed_form(mode, point.L, point.N, point.S, point.G),
                pairs_measured=counter.total,
                ratio=overhead_ratio(mode, point.L, point.N, point.S, point.G),
                layers=counter.layer_breakdown(),
            )
            if not row.matches:
                logger.warning(
                    "pair count mismatch for %s at %s: closed %d, measured %d, layers %s",
                    mode.value, point, row.pairs_closed, counter.total, row.layers,
                )
            rows.append(row)
    return VerifyReport(rows)


def bench_forward(
    grid: str | Dict[str, Sequence[int]] = "small",
    modes: Iterable[FusionMode] = tuple(FusionMode),
    repeats: int = 5,
    model_dim: int = 16,
    heads: int = 2,
    precision: str = "f64",
    seed: int = 0,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> List[BenchRow]:
    """Median wall-clock of ``repeats`` forward passes per grid point and mode."""
    modes = list(modes)
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    if os.environ.get("OMP_NUM_THREADS") != "1":
        logger.warning("OMP_NUM_THREADS is not 1; timings may be noisy")
    rows: List[BenchRow] = []
    for point in grid_points(grid):
        for mode in modes:
            est = mem_bytes_est(mode, point, model_dim, heads, precision)
            row = BenchRow(
                mode=mode,
                point=point,
                pairs_closed=closed_form(mode, point.L, point.N, point.S, point.G),
                pairs_measured=None,
                ratio=overhead_ratio(mode, point.L, point.N, point.S, point.G),
                mem_bytes_est=est,
            )
            if est > memory_budget:
                logger.warning("skipping %s at %s: estimated %d bytes exceeds budget", mode.value, point, est)
                rows.append(row)
                continue
            try:
                fusion, params, batch = _measure(mode, point, np.random.default_rng(seed), model_dim, heads, precision)
                times: List[float] = []
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    out = encoder_forward(batch, fusion, params)
                    times.append((time.perf_counter() - t0) * 1000.0)
                row.pairs_measured = out.pair_counter.total
                row.wall_ms_median = statistics.median(times)
            except MemoryError:
                logger.warning("skipping %s at %s: out of memory", mode.value, point)
            rows.append(row)
    for mode, earlier, later in wall_time_violations(rows):
        p = earlier.point
        logger.warning(
            "median wall time for %s drops from %.4f ms at N=%d to %.4f ms at N=%d (L=%d, S=%d, G=%d)",
            mode.value, earlier.wall_ms_median, p.N, later.wall_ms_median, later.point.N, p.L, p.S, p.G,
        )
    return rows


def wall_time_violations(rows: Sequence[BenchRow], tolerance: float = 0.1) -> List[Tuple[FusionMode, BenchRow, BenchRow]]:
    """Consecutive N steps at fixed (mode, L, S, G) where the median time falls by more than ``tolerance``.

    Rows without a timing are ignored. Each violation is ``(mode, row at smaller N, row at larger N)``.
    """
    series: Dict[Tuple[FusionMode, int, int, int], List[BenchRow]] = {}
    for r in rows:
        if r.wall_ms_median is not None:
            series.setdefault((r.mode, r.point.L, r.point.S, r.point.G), []).append(r)
    out: List[Tuple[FusionMode, BenchRow, BenchRow]] = []
    for (mode, *_), timed in series.items():
        timed.sort(key=lambda r: r.point.N)
        for a, b in zip(timed, timed[1:]):
            assert a.wall_ms_median is not None and b.wall_ms_median is not None
            if b.point.N > a.point.N and b.wall_ms_median < a.wall_ms_median * (1.0 - tolerance):
                out.append((mode, a, b))
    return out


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    buf.write("# attention (query, key) pairs only; feed-forward cost excluded\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.csv_row())
    return buf.getvalue()


def parse_csv(text: str) -> List[Dict[str, str]]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
