"""Answer-span scoring in one probability space shared by all passages.

Spans up to ``max_answer_len`` tokens inside each passage's context region
are enumerated in (passage, start, end) order and scored directly from the
concatenated start/end states. Span probabilities are grouped by normalized
surface string, and training maximizes the marginal likelihood of the gold
strings, optionally with a HardEM term. The alternative start/end spaces
and string-level spaces are kept for comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..spec import FusionConfig, Objective, ProbSpace, ProbSpaceConfig
from . import tensor as T
from .data import TokenizedBatch
from .encoder import EncoderOutput, Params
from .errors import ContractError, DegenerateError, NoPredictionError
from .metrics import normalize_answer
from .tensor import Array, Parameter


logger = logging.getLogger(__name__)

SPAN_CHUNK = 1 << 16
MASS_FRACTION = 0.8


@dataclass
class SpanCandidate:
    start: int
    end: int
    passage: int
    logit: float
    probability: float


@dataclass
class SpanSet:
    """Enumerated spans as parallel index arrays, with the context bounds they were drawn from."""

    passage: np.ndarray
    start: np.ndarray
    end: np.ndarray
    context_start: np.ndarray
    context_end: np.ndarray
    seq_len: int

    def __len__(self) -> int:
        return int(self.passage.shape[0])

    def flat_index(self, which: np.ndarray, rows: slice = slice(None)) -> np.ndarray:
        """Row of ``which[rows]`` in the flattened (N·S, d) passage states."""
        return self.passage[rows] * self.seq_len + which[rows]

    def validate(self) -> None:
        if not len(self):
            return
        lo = self.context_start[self.passage]
        hi = self.context_end[self.passage]
        bad = (self.start < lo) | (self.end >= hi) | (self.end < self.start)
        if bad.any():
            i = int(np.argmax(bad))
            raise ContractError(
                f"span ({int(self.passage[i])}, {int(self.start[i])}, {int(self.end[i])}) lies outside the context region"
            )

    def candidates(self, logits: np.ndarray, probs: np.ndarray) -> List[SpanCandidate]:
        return [
            SpanCandidate(int(s), int(e), int(j), float(lg), float(p))
            for j, s, e, lg, p in zip(self.passage, self.start, self.end, logits, probs)
        ]


def count_spans(context_len: int, max_len: int) -> int:
    k = min(context_len, max_len)
    return context_len * k - k * (k - 1) // 2


def enumerate_spans(batch: TokenizedBatch, max_len: int) -> SpanSet:
    """All spans of 1..max_len tokens inside each context region, ordered by (passage, start, end)."""
    if max_len < 1:
        raise ContractError(f"max_answer_len must be >= 1, got {max_len}")
    js: List[int] = []
    sts: List[int] = []
    ens: List[int] = []
    for j in range(batch.num_passages):
        lo, hi = int(batch.context_start[j]), int(batch.context_end[j])
        for st in range(lo, hi):
            for en in range(st, min(hi, st + max_len)):
                js.append(j)
                sts.append(st)
                ens.append(en)
    return SpanSet(
        passage=np.array(js, dtype=np.int64),
        start=np.array(sts, dtype=np.int64),
        end=np.array(ens, dtype=np.int64),
        context_start=np.asarray(batch.context_start, dtype=np.int64),
        context_end=np.asarray(batch.context_end, dtype=np.int64),
        seq_len=batch.seq_len,
    )


# ---------------------------------------------------------------------------
# Scoring heads
# ---------------------------------------------------------------------------


def init_span_params(config: FusionConfig, rng: np.random.Generator, dtype: np.dtype) -> Params:
    d, std = config.model_dim, config.init_std

    def normal(name: str, shape: Tuple[int, ...]) -> Parameter:
        return Parameter(name, rng.normal(0.0, std, size=shape).astype(dtype))

    def zeros(name: str, shape: Tuple[int, ...]) -> Parameter:
        return Parameter(name, np.zeros(shape, dtype=dtype))

    params = [
        normal("span.hidden.weight", (2 * d, d)),
        zeros("span.hidden.bias", (d,)),
        normal("span.out.weight", (d, 1)),
        zeros("span.out.bias", (1,)),
        normal("span.start.weight", (d, 1)),
        zeros("span.start.bias", (1,)),
        normal("span.end.weight", (d, 1)),
        zeros("span.end.bias", (1,)),
    ]
    return {p.name: p for p in params}


def span_classifier(reps: Array, params: Params) -> Array:
    """Two-layer feed-forward from ``(M, 2d)`` span representations to ``(M,)`` logits."""
    hidden = T.gelu(reps @ params["span.hidden.weight"] + params["span.hidden.bias"])
    out = hidden @ params["span.out.weight"] + params["span.out.bias"]
    return T.reshape(out, (reps.shape[0],))


def span_representations(output: EncoderOutput, spans: SpanSet) -> Array:
    n, s, d = output.passage_states.shape
    flat = T.reshape(output.passage_states, (n * s, d))
    starts = T.take(flat, spans.flat_index(spans.start), axis=0)
    ends = T.take(flat, spans.flat_index(spans.end), axis=0)
    return T.concat([starts, ends], axis=1)


def span_logits(output: EncoderOutput, spans: SpanSet, params: Params, chunk: int = SPAN_CHUNK) -> Array:
    """Logit per span, evaluated in chunks of at most ``chunk`` spans."""
    spans.validate()
    n, s, d = output.passage_states.shape
    if not len(spans):
        return T.constant(np.zeros(0, dtype=output.passage_states.dtype))
    flat = T.reshape(output.passage_states, (n * s, d))
    pieces: List[Array] = []
    for lo in range(0, len(spans), chunk):
        hi = min(lo + chunk, len(spans))
        starts = T.take(flat, spans.flat_index(spans.start, slice(lo, hi)), axis=0)
        ends = T.take(flat, spans.flat_index(spans.end, slice(lo, hi)), axis=0)
        pieces.append(span_classifier(T.concat([starts, ends], axis=1), params))
    return T.concat(pieces, axis=0)


def global_span_softmax(logits: Array) -> Array:
    """Probabilities from one softmax across every span of every passage."""
    if logits.shape[0] == 0:
        raise DegenerateError("no candidate spans to normalize over")
    return T.softmax(logits, axis=0)


def global_span_log_softmax(logits: Array) -> Array:
    if logits.shape[0] == 0:
        raise DegenerateError("no candidate spans to normalize over")
    return T.log_softmax(logits, axis=0)


# ---------------------------------------------------------------------------
# String grouping
# ---------------------------------------------------------------------------


def span_strings(spans: SpanSet, batch: TokenizedBatch) -> List[str]:
    norm_tokens = [[normalize_answer(t) for t in toks] for toks in batch.passage_tokens]
    out: List[str] = []
    for j, st, en in zip(spans.passage, spans.start, spans.end):
        words = [w for w in norm_tokens[int(j)][int(st) : int(en) + 1] if w]
        out.append(" ".join(words))
    return out


def group_strings(strings: Sequence[str]) -> Tuple[List[str], np.ndarray, List[List[int]]]:
    """Distinct strings in first-occurrence order, the group of every span, and each group's members."""
    index: Dict[str, int] = {}
    assign = np.empty(len(strings), dtype=np.int64)
    members: List[List[int]] = []
    for i, s in enumerate(strings):
        k = index.get(s)
        if k is None:
            k = index[s] = len(members)
            members.append([])
        assign[i] = k
        members[k].append(i)
    return list(index), assign, members


def _assignment_matrix(assign: np.ndarray, groups: int, dtype: np.dtype) -> Array:
    onehot = np.zeros((groups, assign.shape[0]), dtype=dtype)
    onehot[assign, np.arange(assign.shape[0])] = 1.0
    return T.constant(onehot)


def group_logsumexp(values: Array, assign: np.ndarray, groups: int) -> Array:
    """Per-group log-sum-exp of a ``(M,)`` array, shifted by each group's max."""
    shift = np.full(groups, -np.inf, dtype=values.dtype)
    np.maximum.at(shift, assign, values.data)
    shifted = T.exp(values - T.constant(shift[assign]))
    onehot = _assignment_matrix(assign, groups, values.dtype)
    sums = T.reshape(onehot @ T.reshape(shifted, (values.shape[0], 1)), (groups,))
    return T.log(sums) + T.constant(shift)


@dataclass
class StringScoreTable:
    """Aggregated answer-string scores; ``log_scores`` stays on the tape for training.

    ``normalized`` is False for the start/end product spaces, whose span
    probabilities do not sum to one over the length-limited enumeration.
    """

    strings: List[str]
    log_scores: Array
    members: List[List[int]]
    normalized: bool = True

    def __len__(self) -> int:
        return len(self.strings)

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_scores.data)

    def as_dict(self) -> Dict[str, float]:
        return {s: float(p) for s, p in zip(self.strings, self.probabilities)}

    def get(self, answer: str) -> float:
        key = normalize_answer(answer)
        for s, p in zip(self.strings, self.probabilities):
            if s == key:
                return float(p)
        return 0.0

    def gold_indices(self, gold_answers: Iterable[str]) -> List[int]:
        gold = {normalize_answer(a) for a in gold_answers}
        return [i for i, s in enumerate(self.strings) if s in gold]


def aggregate_strings(span_log_probs: Array, spans: SpanSet, batch: TokenizedBatch, normalized: bool = True) -> StringScoreTable:
    """Sum span probabilities per normalized surface string, in log space."""
    strings, assign, members = group_strings(span_strings(spans, batch))
    if not strings:
        return StringScoreTable([], T.constant(np.zeros(0, dtype=span_log_probs.dtype)), [], normalized)
    return StringScoreTable(strings, group_logsumexp(span_log_probs, assign, len(strings)), members, normalized)


# ---------------------------------------------------------------------------
# Alternative probability spaces
# ---------------------------------------------------------------------------


def _context_mask(batch: TokenizedBatch) -> np.ndarray:
    pos = np.arange(batch.seq_len)[None, :]
    return (pos >= batch.context_start[:, None]) & (pos < batch.context_end[:, None])


def start_end_logits(output: EncoderOutput, params: Params) -> Tuple[Array, Array]:
    """Independent per-token start and end logits of shape ``(N, S)``."""
    n, s, d = output.passage_states.shape
    states = output.passage_states
    start = T.reshape(states @ params["span.start.weight"] + params["span.start.bias"], (n, s))
    end = T.reshape(states @ params["span.end.weight"] + params["span.end.bias"], (n, s))
    return start, end


def baseline_start_end(
    output: EncoderOutput,
    spans: SpanSet,
    batch: TokenizedBatch,
    params: Params,
    space: ProbSpace,
) -> Tuple[Array, Array]:
    """Span (logits, log-probabilities) under a start/end factorized space.

    PER_PASSAGE_BASELINE normalizes start and end within each passage,
    SEPARATE_GLOBAL across all passages, and NONCOND_START_END sums the raw
    start and end logits and normalizes once over the enumerated spans.
    """
    start, end = start_end_logits(output, params)
    n, s = start.shape
    start_idx = spans.flat_index(spans.start)
    end_idx = spans.flat_index(spans.end)
    flat_start = T.reshape(start, (n * s,))
    flat_end = T.reshape(end, (n * s,))
    logits = T.take(flat_start, start_idx) + T.take(flat_end, end_idx)
    if space is ProbSpace.NONCOND_START_END:
        return logits, global_span_log_softmax(logits)

    mask = _context_mask(batch)
    if space is ProbSpace.PER_PASSAGE_BASELINE:
        row_mask = mask | ~mask.any(axis=1, keepdims=True)
        log_start = T.reshape(T.log_softmax(start, axis=1, mask=row_mask), (n * s,))
        log_end = T.reshape(T.log_softmax(end, axis=1, mask=row_mask), (n * s,))
    elif space is ProbSpace.SEPARATE_GLOBAL:
        if not mask.any():
            raise DegenerateError("no context tokens in any passage")
        log_start = T.log_softmax(flat_start, axis=0, mask=mask.reshape(-1))
        log_end = T.log_softmax(flat_end, axis=0, mask=mask.reshape(-1))
    else:
        raise ContractError(f"{space.value} is not a start/end probability space")
    return logits, T.take(log_start, start_idx) + T.take(log_end, end_idx)


def start_end_distributions(output: EncoderOutput, batch: TokenizedBatch, params: Params, space: ProbSpace) -> Tuple[np.ndarray, np.ndarray]:
    """Start and end probabilities ``(N, S)`` of a factorized space, zero outside contexts."""
    start, end = start_end_logits(output, params)
    mask = _context_mask(batch)
    if space is ProbSpace.PER_PASSAGE_BASELINE:
        row_mask = mask | ~mask.any(axis=1, keepdims=True)
        ps = T.softmax(start, axis=1, mask=row_mask).data * mask
        pe = T.softmax(end, axis=1, mask=row_mask).data * mask
    elif space is ProbSpace.SEPARATE_GLOBAL:
        n, s = start.shape
        ps = T.softmax(T.reshape(start, (n * s,)), axis=0, mask=mask.reshape(-1)).data.reshape(n, s)
        pe = T.softmax(T.reshape(end, (n * s,)), axis=0, mask=mask.reshape(-1)).data.reshape(n, s)
    else:
        raise ContractError(f"{space.value} has no separate start/end distributions")
    return ps, pe


def string_prob_space_variants(
    output: EncoderOutput,
    spans: SpanSet,
    batch: TokenizedBatch,
    params: Params,
    variant: ProbSpace,
) -> StringScoreTable:
    """Softmax over strings after summing span representations (iv) or span logits (v) per string."""
    strings, assign, members = group_strings(span_strings(spans, batch))
    if not strings:
        raise DegenerateError("no candidate spans to group into strings")
    onehot = _assignment_matrix(assign, len(strings), output.passage_states.dtype)
    if variant is ProbSpace.SPAN_REPR_SUM_STRING:
        spans.validate()
        summed = onehot @ span_representations(output, spans)
        string_logits = span_classifier(summed, params)
    elif variant is ProbSpace.LOGIT_SUM_STRING:
        logits = span_logits(output, spans, params)
        string_logits = T.reshape(onehot @ T.reshape(logits, (len(spans), 1)), (len(strings),))
    else:
        raise ContractError(f"{variant.value} is not a string-level probability space")
    return StringScoreTable(strings, T.log_softmax(string_logits, axis=0), members, normalized=True)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


@dataclass
class LossResult:
    loss: Array
    skipped: bool = False
    mml: float = 0.0
    hardem: float = 0.0


def _zero(dtype: np.dtype) -> Array:
    return T.constant(np.zeros((), dtype=dtype))


def mml_loss(table: StringScoreTable, gold_answers: Iterable[str]) -> LossResult:
    """Negative log of the total probability of the gold strings; skipped when none is present."""
    if not len(table):
        raise DegenerateError("empty string table")
    gold = table.gold_indices(gold_answers)
    if not gold:
        return LossResult(_zero(table.log_scores.dtype), skipped=True)
    gold_lse = T.logsumexp(T.take(table.log_scores, np.array(gold)), axis=0)
    if table.normalized:
        loss = T.logsumexp(table.log_scores, axis=0) - gold_lse
    else:
        loss = -gold_lse
    return LossResult(loss, mml=float(loss.data))


def gold_span_indices(table: StringScoreTable, gold_answers: Iterable[str]) -> List[int]:
    out: List[int] = []
    for k in table.gold_indices(gold_answers):
        out.extend(table.members[k])
    return sorted(out)


def select_hardem_spans(logits: np.ndarray, log_probs: np.ndarray, gold: Sequence[int], objective: Objective) -> List[int]:
    gold = list(gold)
    if objective is Objective.MML_PLUS_HARDEM_MAX:
        return [gold[int(np.argmax(logits[gold]))]]
    if objective is Objective.MML_PLUS_HARDEM_MIN:
        return [gold[int(np.argmin(logits[gold]))]]
    if objective is Objective.MML_PLUS_HARDEM_MASS80:
        probs = np.exp(log_probs[gold])
        order = np.argsort(-probs, kind="stable")
        target = MASS_FRACTION * probs.sum()
        chosen: List[int] = []
        covered = 0.0
        for i in order:
            chosen.append(gold[int(i)])
            covered += probs[i]
            if covered >= target:
                break
        return chosen
    raise ContractError(f"{objective.value} has no HardEM term")


def hardem_loss(logits: Array, log_probs: Array, gold: Sequence[int], objective: Objective) -> LossResult:
    """HardEM term: -log of the probability of the selected gold span(s)."""
    if not gold:
        return LossResult(_zero(log_probs.dtype), skipped=True)
    chosen = select_hardem_spans(logits.data, log_probs.data, gold, objective)
    loss = -T.logsumexp(T.take(log_probs, np.array(chosen)), axis=0)
    return LossResult(loss, hardem=float(loss.data))


# ---------------------------------------------------------------------------
# Putting it together
# ---------------------------------------------------------------------------


@dataclass
class ScoredExample:
    spans: SpanSet
    span_logits: Array
    span_log_probs: Array
    table: StringScoreTable

    def candidates(self) -> List[SpanCandidate]:
        return self.spans.candidates(self.span_logits.data, np.exp(self.span_log_probs.data))


def score_example(
    output: EncoderOutput,
    batch: TokenizedBatch,
    params: Params,
    prob: ProbSpaceConfig,
    max_len: int,
) -> ScoredExample:
    spans = enumerate_spans(batch, max_len)
    if not len(spans):
        raise DegenerateError("no candidate spans: every context region is empty")
    variant = prob.variant
    if variant in (ProbSpace.NONCOND_START_END, ProbSpace.SEPARATE_GLOBAL, ProbSpace.PER_PASSAGE_BASELINE):
        logits, log_probs = baseline_start_end(output, spans, batch, params, variant)
        normalized = variant is ProbSpace.NONCOND_START_END
        table = aggregate_strings(log_probs, spans, batch, normalized=normalized)
        return ScoredExample(spans, logits, log_probs, table)
    logits = span_logits(output, spans, params)
    log_probs = global_span_log_softmax(logits)
    if variant is ProbSpace.DIRECT_SPAN:
        table = aggregate_strings(log_probs, spans, batch)
    else:
        table = string_prob_space_variants(output, spans, batch, params, variant)
    return ScoredExample(spans, logits, log_probs, table)


def example_loss(scored: ScoredExample, gold_answers: Sequence[str], prob: ProbSpaceConfig) -> LossResult:
    """MML on the string table, plus ``hardem_weight`` times the HardEM term when selected."""
    mml = mml_loss(scored.table, gold_answers)
    if mml.skipped or prob.objective is Objective.MML:
        return mml
    gold = gold_span_indices(scored.table, gold_answers)
    hard = hardem_loss(scored.span_logits, scored.span_log_probs, gold, prob.objective)
    total = mml.loss + T.scale(hard.loss, prob.hardem_weight)
    return LossResult(total, mml=mml.mml, hardem=hard.hardem)


def predict_answer(table: StringScoreTable) -> Tuple[str, float]:
    """Highest-probability non-empty string; exact ties go to the earliest (passage, start, end) occurrence.

    Spans that normalize to nothing, such as bare punctuation, are never answers.
    """
    if not len(table):
        raise NoPredictionError("cannot predict from an empty string table")
    probs = table.probabilities
    usable = np.array([bool(s) for s in table.strings])
    if not usable.any():
        raise NoPredictionError("every candidate span normalizes to an empty string")
    best = int(np.argmax(np.where(usable, probs, -1.0)))
    return table.strings[best], float(probs[best])


def predict_span(scored: ScoredExample, batch: TokenizedBatch) -> Tuple[str, float]:
    """Single best span, without string aggregation."""
    if not len(scored.spans):
        raise NoPredictionError("no candidate spans")
    texts = [normalize_answer(batch.span_text(int(j), int(s), int(e))) for j, s, e in zip(scored.spans.passage, scored.spans.start, scored.spans.end)]
    usable = np.array([bool(t) for t in texts])
    if not usable.any():
        raise NoPredictionError("every candidate span normalizes to an empty string")
    best = int(np.argmax(np.where(usable, scored.span_log_probs.data, -np.inf)))
    return texts[best], float(np.exp(scored.span_log_probs.data[best]))


__all__ = [
    "LossResult",
    "ScoredExample",
    "SpanCandidate",
    "SpanSet",
    "StringScoreTable",
    "aggregate_strings",
    "baseline_start_end",
    "count_spans",
    "enumerate_spans",
    "example_loss",
    "global_span_log_softmax",
    "global_span_softmax",
    "gold_span_indices",
    "group_logsumexp",
    "group_strings",
    "hardem_loss",
    "init_span_params",
    "mml_loss",
    "predict_answer",
    "predict_span",
    "score_example",
    "span_classifier",
    "span_logits",
    "span_representations",
    "span_strings",
    "start_end_distributions",
    "string_prob_space_variants",
]
