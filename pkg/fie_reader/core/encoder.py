"""Passage encoder with global tokens fusing information across passages.

Every passage is encoded on its own, as ``[CLS] q [SEP] context``. In the
global-token modes each passage token additionally attends to G shared
global tokens, and the global tokens attend to every unmasked token of
every passage, so information can cross passages in two hops. All attention
groups of a layer read the previous layer's states.

Layouts used throughout: passage states ``(N, S, d)``; global states
``(G, d)``; per-head tensors ``(B, H, T, d_head)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..spec import FusionConfig, FusionMode
from . import tensor as T
from .data import TokenizedBatch
from .errors import ContractError, ModeError, NumericError, ShapeError, VocabularyError
from .tensor import Array, Parameter


logger = logging.getLogger(__name__)

Params = Dict[str, Parameter]


# ---------------------------------------------------------------------------
# Instrumentation
# ---------------------------------------------------------------------------


@dataclass
class PairCounter:
    """Per-layer tally of (query, key) pairs in the attention pattern.

    Counts follow the attention pattern, not the tensors materialized:
    padded positions inside an attended block are included, and in
    CLS_TO_CLS mode only the n(n-1) CLS-to-other-CLS entries are added on
    top of the within-passage block, although the masked score tensor
    spans s+n keys for every row.
    """

    passage_pairs: List[int] = field(default_factory=list)
    global_pairs: List[int] = field(default_factory=list)

    def reset(self, num_layers: int) -> None:
        self.passage_pairs = [0] * num_layers
        self.global_pairs = [0] * num_layers

    def _ensure(self, layer: int) -> None:
        while len(self.passage_pairs) <= layer:
            self.passage_pairs.append(0)
            self.global_pairs.append(0)

    def add_passage(self, layer: int, count: int) -> None:
        self._ensure(layer)
        self.passage_pairs[layer] += int(count)

    def add_global(self, layer: int, count: int) -> None:
        self._ensure(layer)
        self.global_pairs[layer] += int(count)

    @property
    def total(self) -> int:
        return sum(self.passage_pairs) + sum(self.global_pairs)

    def layer_breakdown(self) -> List[Dict[str, int]]:
        return [
            {"layer": i, "passage": p, "global": g}
            for i, (p, g) in enumerate(zip(self.passage_pairs, self.global_pairs))
        ]


@dataclass
class LayerTrace:
    """Head-resolved attention weights of one layer.

    ``passage`` has shape ``(N, H, S, K)`` where the K key columns are the
    passage's own S tokens followed by the extra keys of the mode (G global
    tokens, or the N passage CLS states for CLS_TO_CLS). ``global_`` has
    shape ``(H, G, K_g)``; ``concat`` is ``(H, N*S, N*S)`` for the last
    FULL_CONCAT layer, in which case ``passage`` is None.
    """

    layer: int
    mode: FusionMode
    num_passages: int
    seq_len: int
    num_global: int
    passage: Optional[np.ndarray] = None
    global_: Optional[np.ndarray] = None
    concat: Optional[np.ndarray] = None


@dataclass
class EncoderOutput:
    passage_states: Array
    global_states: Array
    attention_mask: np.ndarray
    pair_counter: PairCounter
    traces: Optional[List[LayerTrace]] = None

    @property
    def num_passages(self) -> int:
        return int(self.passage_states.shape[0])

    @property
    def num_global(self) -> int:
        return int(self.global_states.shape[0])


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def init_encoder_params(config: FusionConfig, vocab_size: int, rng: np.random.Generator, dtype: np.dtype) -> Params:
    d, h, s = config.model_dim, config.hidden_dim, config.passage_seq_len
    std = config.init_std
    params: Params = {}

    def normal(name: str, shape: Tuple[int, ...]) -> None:
        params[name] = Parameter(name, rng.normal(0.0, std, size=shape).astype(dtype))

    def const(name: str, shape: Tuple[int, ...], value: float) -> None:
        params[name] = Parameter(name, np.full(shape, value, dtype=dtype))

    normal("embed.token", (vocab_size, d))
    normal("embed.position", (s, d))
    const("embed.norm.gain", (d,), 1.0)
    const("embed.norm.bias", (d,), 0.0)
    for layer in range(config.num_layers):
        p = f"layer{layer}"
        for proj in ("q", "k", "v", "o"):
            normal(f"{p}.attn.{proj}.weight", (d, d))
            const(f"{p}.attn.{proj}.bias", (d,), 0.0)
        const(f"{p}.attn_norm.gain", (d,), 1.0)
        const(f"{p}.attn_norm.bias", (d,), 0.0)
        normal(f"{p}.ffn.in.weight", (d, h))
        const(f"{p}.ffn.in.bias", (h,), 0.0)
        normal(f"{p}.ffn.out.weight", (h, d))
        const(f"{p}.ffn.out.bias", (d,), 0.0)
        const(f"{p}.ffn_norm.gain", (d,), 1.0)
        const(f"{p}.ffn_norm.bias", (d,), 0.0)
    return params


def _linear(x: Array, params: Params, prefix: str) -> Array:
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]


def _norm(x: Array, params: Params, prefix: str, eps: float) -> Array:
    return T.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps=eps)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------


def global_input_ids(batch: TokenizedBatch, config: FusionConfig) -> np.ndarray:
    """Token ids the global slots start from: reserved slot ids, or the query cycled."""
    g = config.effective_global_tokens
    if g == 0:
        return np.zeros(0, dtype=np.int64)
    if config.fusion_mode is FusionMode.QUERY_AS_GLOBAL and len(batch.query_ids):
        q = batch.query_ids
        return np.array([q[i % len(q)] for i in range(g)], dtype=np.int64)
    if len(batch.global_slot_ids) != g:
        raise VocabularyError(f"batch carries {len(batch.global_slot_ids)} global slot ids, config expects {g}")
    return batch.global_slot_ids


def embed_batch(batch: TokenizedBatch, config: FusionConfig, params: Params) -> Tuple[Array, Array]:
    """Layer-0 states: token + position embedding for passages, token embedding alone for globals."""
    n, s = config.num_passages, config.passage_seq_len
    if batch.passage_ids.shape != (n, s):
        raise ShapeError(f"passage ids of shape {batch.passage_ids.shape}, config expects {(n, s)}")
    eps = config.layer_norm_eps
    table = params["embed.token"]
    tokens = T.embedding_lookup(table, batch.passage_ids)
    passages = _norm(tokens + params["embed.position"], params, "embed.norm", eps)
    globals_ = _norm(T.embedding_lookup(table, global_input_ids(batch, config)), params, "embed.norm", eps)
    return passages, globals_


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _split_heads(x: Array, heads: int) -> Array:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Array) -> Array:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attend(
    queries: Array,
    keys: Array,
    key_mask: np.ndarray,
    params: Params,
    layer: int,
    heads: int,
) -> Tuple[Array, np.ndarray]:
    """Multi-head attention of ``queries (B,Tq,d)`` over ``keys (B,Tk,d)``.

    ``key_mask`` broadcasts to ``(B, H, Tq, Tk)``. Returns the projected
    output before the residual, and the attention weights.
    """
    p = f"layer{layer}.attn"
    q = _split_heads(_linear(queries, params, f"{p}.q"), heads)
    k = _split_heads(_linear(keys, params, f"{p}.k"), heads)
    v = _split_heads(_linear(keys, params, f"{p}.v"), heads)
    dh = q.shape[-1]
    scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = T.softmax(scores, axis=-1, mask=key_mask)
    out = _linear(_merge_heads(weights @ v), params, f"{p}.o")
    return out, weights.data


def _check_layer(layer: int, config: FusionConfig) -> None:
    if not 0 <= layer < config.num_layers:
        raise ContractError(f"layer index {layer} outside [0, {config.num_layers})")


def passage_attention(
    layer: int,
    passages: Array,
    globals_: Optional[Array],
    mask: np.ndarray,
    config: FusionConfig,
    params: Params,
    counter: Optional[PairCounter] = None,
) -> Tuple[Array, np.ndarray]:
    """Self-attention within each passage, plus the mode's extra keys; residual and norm."""
    _check_layer(layer, config)
    mode = config.fusion_mode
    if mode is FusionMode.FULL_CONCAT and layer == config.num_layers - 1:
        raise ModeError("the last FULL_CONCAT layer runs full_concat_attention")
    n, s, d = passages.shape
    g = globals_.shape[0] if (globals_ is not None and mode.uses_global_tokens) else 0

    if g > 0:
        keys = T.concat([passages, T.broadcast_to(T.reshape(globals_, (1, g, d)), (n, g, d))], axis=1)
        key_mask = np.concatenate([mask, np.ones((n, g), dtype=bool)], axis=1)[:, None, None, :]
    elif mode is FusionMode.CLS_TO_CLS and n > 1:
        cls = T.reshape(T.slice_axis(passages, 1, 0, 1), (1, n, d))
        keys = T.concat([passages, T.broadcast_to(cls, (n, n, d))], axis=1)
        key_mask = np.zeros((n, s, s + n), dtype=bool)
        key_mask[:, :, :s] = mask[:, None, :]
        key_mask[:, 0, s:] = ~np.eye(n, dtype=bool)
        key_mask = key_mask[:, None, :, :]
    else:
        keys = passages
        key_mask = mask[:, None, None, :]

    out, weights = _attend(passages, keys, key_mask, params, layer, config.num_heads)
    if counter is not None:
        # CLS rows score the other n-1 CLS states; masked entries are not counted
        extra = n * (n - 1) if (mode is FusionMode.CLS_TO_CLS and g == 0) else 0
        counter.add_passage(layer, n * s * (s + g) + extra)
    return _norm(passages + out, params, f"layer{layer}.attn_norm", config.layer_norm_eps), weights


def global_attention(
    layer: int,
    passages: Array,
    globals_: Array,
    mask: np.ndarray,
    config: FusionConfig,
    params: Params,
    counter: Optional[PairCounter] = None,
) -> Tuple[Array, np.ndarray]:
    """Global tokens attend to every unmasked passage token (or only the CLS states) plus themselves."""
    _check_layer(layer, config)
    mode = config.fusion_mode
    if not mode.uses_global_tokens:
        raise ModeError(f"global_attention is undefined in {mode.value} mode")
    n, s, d = passages.shape
    g = globals_.shape[0]
    if mode is FusionMode.GLOBAL_TO_CLS_ONLY:
        context = T.reshape(T.slice_axis(passages, 1, 0, 1), (n, d))
        context_mask = mask[:, 0]
    else:
        context = T.reshape(passages, (n * s, d))
        context_mask = mask.reshape(-1)
    keys = T.reshape(T.concat([context, globals_], axis=0), (1, context.shape[0] + g, d))
    key_mask = np.concatenate([context_mask, np.ones(g, dtype=bool)])[None, None, None, :]
    out, weights = _attend(T.reshape(globals_, (1, g, d)), keys, key_mask, params, layer, config.num_heads)
    if counter is not None:
        counter.add_global(layer, g * (context.shape[0] + g))
    updated = _norm(globals_ + T.reshape(out, (g, d)), params, f"layer{layer}.attn_norm", config.layer_norm_eps)
    return updated, weights[0]


def full_concat_attention(
    layer: int,
    passages: Array,
    mask: np.ndarray,
    config: FusionConfig,
    params: Params,
    counter: Optional[PairCounter] = None,
) -> Tuple[Array, np.ndarray]:
    """Attention over the concatenation of all N*S tokens, used by the last FULL_CONCAT layer."""
    _check_layer(layer, config)
    if config.fusion_mode is not FusionMode.FULL_CONCAT:
        raise ModeError(f"full_concat_attention is undefined in {config.fusion_mode.value} mode")
    n, s, d = passages.shape
    flat = T.reshape(passages, (1, n * s, d))
    out, weights = _attend(flat, flat, mask.reshape(1, 1, 1, n * s), params, layer, config.num_heads)
    if counter is not None:
        counter.add_passage(layer, (n * s) ** 2)
    updated = _norm(flat + out, params, f"layer{layer}.attn_norm", config.layer_norm_eps)
    return T.reshape(updated, (n, s, d)), weights[0]


def feed_forward(x: Array, layer: int, config: FusionConfig, params: Params) -> Array:
    p = f"layer{layer}"
    hidden = T.gelu(_linear(x, params, f"{p}.ffn.in"))
    return _norm(x + _linear(hidden, params, f"{p}.ffn.out"), params, f"{p}.ffn_norm", config.layer_norm_eps)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _encoder_layer(
    layer: int,
    passages: Array,
    globals_: Array,
    mask: np.ndarray,
    config: FusionConfig,
    params: Params,
    counter: PairCounter,
    traces: Optional[List[LayerTrace]],
) -> Tuple[Array, Array]:
    mode = config.fusion_mode
    g = globals_.shape[0]
    trace = LayerTrace(layer, mode, passages.shape[0], passages.shape[1], g)
    if mode is FusionMode.FULL_CONCAT and layer == config.num_layers - 1:
        new_passages, trace.concat = full_concat_attention(layer, passages, mask, config, params, counter)
    else:
        new_passages, trace.passage = passage_attention(
            layer, passages, globals_ if g else None, mask, config, params, counter
        )
    new_globals = globals_
    if mode.uses_global_tokens and g:
        new_globals, trace.global_ = global_attention(layer, passages, globals_, mask, config, params, counter)
        new_globals = feed_forward(new_globals, layer, config, params)
    if traces is not None:
        traces.append(trace)
    return feed_forward(new_passages, layer, config, params), new_globals


def encoder_forward(
    batch: TokenizedBatch,
    config: FusionConfig,
    params: Params,
    record_traces: bool = False,
) -> EncoderOutput:
    counter = PairCounter()
    counter.reset(config.num_layers)
    traces: Optional[List[LayerTrace]] = [] if record_traces else None
    mask = np.asarray(batch.attention_mask, dtype=bool)
    passages, globals_ = embed_batch(batch, config, params)
    for layer in range(config.num_layers):
        try:
            passages, globals_ = _encoder_layer(layer, passages, globals_, mask, config, params, counter, traces)
        except NumericError as e:
            logger.error("non-finite activations in encoder layer %d", layer)
            raise NumericError(f"encoder layer {layer}: {e}") from e
    return EncoderOutput(
        passage_states=passages,
        global_states=globals_,
        attention_mask=mask,
        pair_counter=counter,
        traces=traces,
    )


__all__ = [
    "EncoderOutput",
    "LayerTrace",
    "PairCounter",
    "embed_batch",
    "encoder_forward",
    "feed_forward",
    "full_concat_attention",
    "global_attention",
    "global_input_ids",
    "init_encoder_params",
    "passage_attention",
]
