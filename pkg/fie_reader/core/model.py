from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..spec import FusionConfig, ProbSpaceConfig, RunConfig
from .data import DatasetRecord, TokenizedBatch, Vocab, tokenize_record
from .encoder import EncoderOutput, encoder_forward, init_encoder_params
from .errors import ConfigError, DegenerateError
from .metrics import exact_match
from .spans import LossResult, ScoredExample, example_loss, init_span_params, predict_answer, predict_span, score_example
from .tensor import Parameter, resolve_dtype


logger = logging.getLogger(__name__)


@dataclass
class Prediction:
    question: str
    answer: str
    probability: float
    span_answer: str
    span_probability: float
    gold: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "question": self.question,
            "prediction": self.answer,
            "probability": self.probability,
            "span_prediction": self.span_answer,
            "span_probability": self.span_probability,
            "gold": list(self.gold),
            "em": exact_match(self.answer, self.gold) if self.gold else 0,
        }


@dataclass
class FiEReader:
    """Encoder, span head and vocabulary bundled under one run configuration."""

    config: RunConfig
    vocab: Vocab
    params: Dict[str, Parameter]

    @staticmethod
    def initialize(config: RunConfig, vocab: Vocab, seed: Optional[int] = None) -> "FiEReader":
        fusion = config.fusion
        if fusion.num_global_tokens > vocab.num_global_slots:
            raise ConfigError(
                f"{fusion.num_global_tokens} global tokens requested, vocabulary reserves {vocab.num_global_slots}"
            )
        dtype = resolve_dtype(config.optim.precision)
        rng = np.random.default_rng(config.optim.seed if seed is None else seed)
        params = init_encoder_params(fusion, len(vocab), rng, dtype)
        params.update(init_span_params(fusion, rng, dtype))
        logger.info("initialized %d parameter tensors (%d values)", len(params), sum(p.data.size for p in params.values()))
        return FiEReader(config=config, vocab=vocab, params=params)

    @property
    def fusion(self) -> FusionConfig:
        return self.config.fusion

    @property
    def prob_space(self) -> ProbSpaceConfig:
        return self.config.prob_space

    def parameters(self) -> List[Parameter]:
        return [self.params[k] for k in sorted(self.params)]

    def tokenize(self, record: DatasetRecord) -> TokenizedBatch:
        return tokenize_record(record, self.vocab, self.fusion)

    def encode(self, batch: TokenizedBatch, record_traces: bool = False) -> EncoderOutput:
        return encoder_forward(batch, self.fusion, self.params, record_traces=record_traces)

    def score(self, batch: TokenizedBatch, output: Optional[EncoderOutput] = None) -> ScoredExample:
        output = output if output is not None else self.encode(batch)
        return score_example(output, batch, self.params, self.prob_space, self.fusion.max_answer_len)

    def loss(self, batch: TokenizedBatch) -> LossResult:
        return example_loss(self.score(batch), batch.answers, self.prob_space)

    def predict(self, batch: TokenizedBatch, output: Optional[EncoderOutput] = None) -> Prediction:
        try:
            scored = self.score(batch, output)
        except DegenerateError as e:
            logger.warning("no prediction for %r: %s", batch.question, e)
            return Prediction(batch.question, "", 0.0, "", 0.0, list(batch.answers))
        answer, prob = predict_answer(scored.table)
        span_answer, span_prob = predict_span(scored, batch)
        return Prediction(batch.question, answer, prob, span_answer, span_prob, list(batch.answers))
