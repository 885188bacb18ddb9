"""Post-hoc analyses over recorded attention and final states.

The encoder never builds one attention matrix over all tokens; the helpers
here embed each layer's block pattern into a joint matrix indexed by all
passage tokens in passage-major order followed by the global tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core.data import TokenizedBatch
from .core.encoder import EncoderOutput, LayerTrace
from .core.errors import ContractError, InstrumentationError, ShapeError
from .core.model import FiEReader
from .core.metrics import exact_match
from .core.runner import NON_REPRODUCTION
from .spec import FusionMode


logger = logging.getLogger(__name__)

TOP_K = 10


@dataclass
class JointAttention:
    """Head-averaged joint attention per layer, with the (query, key) pairs each layer computes."""

    matrices: List[np.ndarray]
    visible: List[np.ndarray]
    num_passages: int
    seq_len: int
    num_global: int

    @property
    def size(self) -> int:
        return self.num_passages * self.seq_len + self.num_global


def _global_columns(trace: LayerTrace) -> np.ndarray:
    n, s, g = trace.num_passages, trace.seq_len, trace.num_global
    if trace.mode is FusionMode.GLOBAL_TO_CLS_ONLY:
        return np.concatenate([np.arange(n) * s, n * s + np.arange(g)])
    return np.arange(n * s + g)


def assemble_joint_attention(traces: Optional[Sequence[LayerTrace]], mask: np.ndarray) -> JointAttention:
    """Embed every layer's attention into a ``(T, T)`` matrix; pairs never computed stay exactly 0."""
    if not traces:
        raise InstrumentationError("no attention traces recorded; encode with record_traces=True")
    first = traces[0]
    n, s, g = first.num_passages, first.seq_len, first.num_global
    if mask.shape != (n, s):
        raise ShapeError(f"mask {mask.shape} does not match traced layout {(n, s)}")
    t = n * s + g
    key_valid = np.concatenate([mask.reshape(-1), np.ones(g, dtype=bool)])
    matrices: List[np.ndarray] = []
    visible: List[np.ndarray] = []
    for trace in traces:
        joint = np.zeros((t, t))
        computed = np.zeros((t, t), dtype=bool)
        if trace.concat is not None:
            joint[: n * s, : n * s] = trace.concat.mean(axis=0)
            computed[: n * s, : n * s] = True
        elif trace.passage is not None:
            avg = trace.passage.mean(axis=1)
            for j in range(n):
                rows = np.arange(j * s, (j + 1) * s)
                joint[np.ix_(rows, rows)] = avg[j, :, :s]
                computed[np.ix_(rows, rows)] = True
                if trace.mode.uses_global_tokens and g:
                    gcols = n * s + np.arange(g)
                    joint[np.ix_(rows, gcols)] = avg[j, :, s : s + g]
                    computed[np.ix_(rows, gcols)] = True
                elif trace.mode is FusionMode.CLS_TO_CLS and n > 1:
                    others = np.delete(np.arange(n), j)
                    joint[j * s, others * s] = avg[j, 0, s + others]
                    computed[j * s, others * s] = True
        else:
            raise InstrumentationError(f"layer {trace.layer} trace holds no passage attention")
        if trace.global_ is not None and g:
            cols = _global_columns(trace)
            joint[np.ix_(n * s + np.arange(g), cols)] = trace.global_.mean(axis=0)
            computed[np.ix_(n * s + np.arange(g), cols)] = True
        matrices.append(joint)
        visible.append(computed & key_valid[None, :])
    return JointAttention(matrices, visible, n, s, g)


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------


@dataclass
class RolloutResult:
    matrix: np.ndarray
    cross_passage_mass: List[float]


def attention_rollout(
    matrices: Sequence[np.ndarray],
    num_passages: int,
    seq_len: int,
    row_mask: Optional[np.ndarray] = None,
) -> RolloutResult:
    """Product of residual-adjusted attention, last layer on the left.

    Each layer becomes ``0.5 * A + 0.5 * I`` with rows renormalized. Cross
    passage mass for passage j averages, over its valid rows, the mass that
    lands on input columns of other passages; global columns are not
    counted since the product already resolves them to input tokens.
    """
    if not matrices:
        raise ContractError("rollout needs at least one layer")
    t = matrices[0].shape[0]
    if any(m.shape != (t, t) for m in matrices):
        raise ShapeError(f"rollout matrices disagree in shape: {[m.shape for m in matrices]}")
    if num_passages * seq_len > t:
        raise ShapeError(f"{num_passages}x{seq_len} passage tokens exceed joint size {t}")
    eye = np.eye(t)
    result = eye.copy()
    for a in matrices:
        a_hat = 0.5 * a + 0.5 * eye
        a_hat = a_hat / a_hat.sum(axis=1, keepdims=True)
        result = a_hat @ result
    rows_valid = np.ones((num_passages, seq_len), dtype=bool) if row_mask is None else np.asarray(row_mask, dtype=bool)
    cross: List[float] = []
    for j in range(num_passages):
        rows = j * seq_len + np.flatnonzero(rows_valid[j])
        if not len(rows):
            cross.append(0.0)
            continue
        own = np.zeros(t, dtype=bool)
        own[j * seq_len : (j + 1) * seq_len] = True
        others = np.zeros(t, dtype=bool)
        others[: num_passages * seq_len] = True
        others &= ~own
        cross.append(float(result[np.ix_(rows, np.flatnonzero(others))].sum(axis=1).mean()))
    return RolloutResult(result, cross)


# ---------------------------------------------------------------------------
# Global-token similarity
# ---------------------------------------------------------------------------


@dataclass
class SimilarityResult:
    applicable: bool
    top1_is_answer: bool = False
    all_answers_in_top10: bool = False
    degenerate: bool = False
    ranking: List[Tuple[int, int]] = field(default_factory=list)
    scores: List[float] = field(default_factory=list)


def global_token_similarity(
    output: EncoderOutput,
    batch: TokenizedBatch,
    answer_positions: Optional[Sequence[Tuple[int, int]]] = None,
    top_k: int = TOP_K,
) -> SimilarityResult:
    """Rank context tokens by their best cosine similarity to any global token's final state."""
    if output.num_global == 0:
        return SimilarityResult(applicable=False)
    if answer_positions is None:
        answer_positions = [(j, i) for j, st, en in batch.gold_spans for i in range(st, en + 1)]
    states = output.passage_states.data.astype(np.float64)
    globals_ = output.global_states.data.astype(np.float64)
    positions = [
        (j, i)
        for j in range(batch.num_passages)
        for i in range(int(batch.context_start[j]), int(batch.context_end[j]))
    ]
    if not positions:
        return SimilarityResult(applicable=False)
    vecs = np.stack([states[j, i] for j, i in positions])
    vn = vecs / np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
    gn = globals_ / np.maximum(np.linalg.norm(globals_, axis=1, keepdims=True), 1e-12)
    scores = (vn @ gn.T).max(axis=1)
    order = np.argsort(-scores, kind="stable")
    ranking = [positions[int(k)] for k in order]
    answers = set(answer_positions)
    answer_ids = {int(batch.passage_ids[j, i]) for j, i in answers}
    top_ids: List[int] = []
    for j, i in ranking:
        tid = int(batch.passage_ids[j, i])
        if tid not in top_ids:
            top_ids.append(tid)
        if len(top_ids) == top_k:
            break
    degenerate = bool(np.ptp(scores) < 1e-12)
    if degenerate:
        logger.debug("all similarity scores tie for %r", batch.question)
    return SimilarityResult(
        applicable=True,
        top1_is_answer=ranking[0] in answers,
        all_answers_in_top10=bool(answer_ids) and answer_ids.issubset(top_ids),
        degenerate=degenerate,
        ranking=ranking,
        scores=[float(scores[int(k)]) for k in order],
    )


# ---------------------------------------------------------------------------
# Attention mass
# ---------------------------------------------------------------------------


@dataclass
class MassStats:
    ratios: Dict[str, float]
    shares: Dict[str, float]


def mass_ratios(
    weights: np.ndarray,
    visible: np.ndarray,
    rows: np.ndarray,
    classes: Dict[str, np.ndarray],
) -> MassStats:
    """Attention received by each key class relative to the uniform expectation of each row.

    A row's expectation per key is ``1 / |visible keys of the row|``, so a
    ratio of 1 means the class gets exactly its uniform share.
    """
    w = weights[rows]
    vis = visible[rows]
    k = vis.sum(axis=1, keepdims=True)
    if (k == 0).any():
        raise ContractError("a row with no visible keys cannot be analysed")
    ratios: Dict[str, float] = {}
    shares: Dict[str, float] = {}
    for name, cols in classes.items():
        sel = vis & cols[None, :]
        ratios[name] = float((w * k)[sel].mean()) if sel.any() else float("nan")
        shares[name] = float(np.where(sel, w, 0.0).sum(axis=1).mean())
    return MassStats(ratios, shares)


def token_classes(batch: TokenizedBatch, num_global: int) -> Dict[str, np.ndarray]:
    n, s = batch.num_passages, batch.seq_len
    t = n * s + num_global
    glob = np.zeros(t, dtype=bool)
    glob[n * s :] = True
    query = np.zeros(t, dtype=bool)
    for j in range(n):
        query[j * s + batch.query_positions] = True
    return {"global": glob, "query": query}


def attention_mass_stats(joint: JointAttention, batch: TokenizedBatch) -> MassStats:
    """Mass ratios and shares averaged over layers, over every valid query row."""
    rows = np.flatnonzero(np.concatenate([batch.attention_mask.reshape(-1), np.ones(joint.num_global, dtype=bool)]))
    classes = token_classes(batch, joint.num_global)
    per_layer = [mass_ratios(w, v, rows, classes) for w, v in zip(joint.matrices, joint.visible)]
    ratios: Dict[str, float] = {}
    for c in classes:
        vals = [m.ratios[c] for m in per_layer if np.isfinite(m.ratios[c])]
        ratios[c] = float(np.mean(vals)) if vals else float("nan")
    shares = {c: float(np.mean([m.shares[c] for m in per_layer])) for c in classes}
    return MassStats(ratios, shares)


# ---------------------------------------------------------------------------
# Named analyses
# ---------------------------------------------------------------------------


@dataclass
class ExampleView:
    batch: TokenizedBatch
    output: EncoderOutput
    correct: bool


@dataclass
class Analysis:
    name: str
    description: str
    handler: Callable[[List[ExampleView]], Dict[str, Any]]

    def run(self, views: List[ExampleView]) -> Dict[str, Any]:
        return self.handler(views)


def _rollout(views: List[ExampleView]) -> Dict[str, Any]:
    per_passage: List[List[float]] = []
    for v in views:
        joint = assemble_joint_attention(v.output.traces, v.batch.attention_mask)
        per_passage.append(attention_rollout(joint.matrices, joint.num_passages, joint.seq_len, v.batch.attention_mask).cross_passage_mass)
    mean = np.mean(np.array(per_passage), axis=0).tolist() if per_passage else []
    return {"rollout_cross_passage_mass": mean}


def _fraction(flags: Sequence[bool]) -> Optional[float]:
    return float(np.mean(flags)) if flags else None


def _similarity(views: List[ExampleView]) -> Dict[str, Any]:
    usable: List[Tuple[SimilarityResult, bool]] = []
    for v in views:
        r = global_token_similarity(v.output, v.batch)
        if r.applicable and v.batch.gold_spans:
            usable.append((r, v.correct))
    return {
        "top1_answer_fraction": _fraction([r.top1_is_answer for r, _ in usable]),
        "top10_all_answers_fraction": _fraction([r.all_answers_in_top10 for r, _ in usable]),
        "top1_answer_fraction_correct": _fraction([r.top1_is_answer for r, c in usable if c]),
        "similarity_examples": len(usable),
        "similarity_degenerate": sum(1 for r, _ in usable if r.degenerate),
        "similarity_dedup": "token_id",
    }


def _attention_mass(views: List[ExampleView]) -> Dict[str, Any]:
    stats = [attention_mass_stats(assemble_joint_attention(v.output.traces, v.batch.attention_mask), v.batch) for v in views]

    def avg(key: str, attr: str) -> Optional[float]:
        vals = [getattr(s, attr)[key] for s in stats if np.isfinite(getattr(s, attr)[key])]
        return float(np.mean(vals)) if vals else None

    return {
        "attention_ratios": {"global": avg("global", "ratios"), "query": avg("query", "ratios")},
        "mass_shares": {"global": avg("global", "shares"), "query": avg("query", "shares")},
    }


ANALYSES: Dict[str, Analysis] = {
    a.name: a
    for a in (
        Analysis("rollout", "cross-passage mass of attention rollout per passage", _rollout),
        Analysis("similarity", "context tokens ranked by cosine similarity to global tokens", _similarity),
        Analysis("attention_mass", "attention received by global and query tokens vs. uniform", _attention_mass),
    )
}


def list_analyses() -> List[Dict[str, str]]:
    return [{"name": a.name, "description": a.description} for a in ANALYSES.values()]


def build_analyses_from_names(names: Sequence[str]) -> List[Analysis]:
    built: List[Analysis] = []
    for n in names:
        if n not in ANALYSES:
            raise ContractError(f"unknown analysis {n!r}; choose from {sorted(ANALYSES)}")
        built.append(ANALYSES[n])
    return built


def analyze(model: FiEReader, batches: Sequence[TokenizedBatch], names: Sequence[str] = tuple(ANALYSES)) -> Dict[str, Any]:
    """Encode each example with traces and merge the named analyses into one JSON-ready report."""
    views: List[ExampleView] = []
    for b in batches:
        output = model.encode(b, record_traces=True)
        pred = model.predict(b, output)
        views.append(ExampleView(b, output, bool(b.answers) and bool(exact_match(pred.answer, b.answers))))
    report: Dict[str, Any] = {"examples": len(views), "fusion_mode": model.fusion.fusion_mode.value}
    for analysis in build_analyses_from_names(names):
        report.update(analysis.run(views))
    report["note"] = NON_REPRODUCTION
    return report
