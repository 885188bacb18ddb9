from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from ..scaffold import RunLayout, scaffold_run
from ..spec import RunConfig
from .checkpoint import LoadedCheckpoint, save_checkpoint
from .config import Config
from .data import TokenizedBatch, Vocab, sources_from_config, tokenize_record
from .errors import DataError, NumericError
from .metrics import evaluate_em
from .model import FiEReader, Prediction
from .optim import Adam, LinearSchedule, clip_grad_norm
from .state import MetricsRow, RunState
from .tensor import Tape, backward


logger = logging.getLogger(__name__)

NON_REPRODUCTION = (
    "Toy-scale run. Published open-domain QA accuracies and attention-analysis "
    "percentages depend on large pretrained encoders and retrieval corpora and "
    "are not reproduced here; only structural properties are checked."
)


@dataclass
class RunResult:
    steps: int
    final_loss: Optional[float]
    dev_em: Optional[float]
    state: RunState


@dataclass
class EvalReport:
    em: float
    count: int
    zero_recall: int
    predictions: List[Prediction] = field(default_factory=list)
    span_em: Optional[float] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "em": self.em,
            "span_em": self.span_em,
            "count": self.count,
            "zero_recall": self.zero_recall,
            "note": NON_REPRODUCTION,
        }


def evaluate(model: FiEReader, batches: Sequence[TokenizedBatch], limit: Optional[int] = None) -> EvalReport:
    items = list(batches[:limit] if limit else batches)
    preds = [model.predict(b) for b in items]
    golds = [b.answers for b in items]
    em = evaluate_em([p.answer for p in preds], golds)
    span_em = evaluate_em([p.span_answer for p in preds], golds)
    zero = sum(1 for b in items if b.zero_recall)
    return EvalReport(em=em, count=len(items), zero_recall=zero, predictions=preds, span_em=span_em)


def write_eval(report: EvalReport, layout: RunLayout) -> None:
    layout.root.mkdir(parents=True, exist_ok=True)
    with layout.predictions.open("w", encoding="utf-8") as f:
        for p in report.predictions:
            f.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")
    layout.report.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")


class TrainingRunner:
    """Single-threaded training loop with accumulation, clipping, linear schedule and dev evaluation.

    Example order is a pure function of (seed, position in the stream), so a
    run resumed from a checkpoint sees the same examples as an uninterrupted one.
    """

    def __init__(
        self,
        model: FiEReader,
        train: Sequence[TokenizedBatch],
        dev: Sequence[TokenizedBatch],
        run_dir: str | Path,
        config: Optional[Config] = None,
        resume: Optional[LoadedCheckpoint] = None,
    ) -> None:
        if not train:
            raise DataError("no training examples")
        self.model = model
        self.train = list(train)
        self.dev = list(dev)
        self.config = config or Config.from_env()
        self.layout = scaffold_run(model.config, run_dir)
        optim = model.config.optim
        self.schedule = LinearSchedule(max(1, optim.steps), optim.warmup_fraction)
        self.optimizer = Adam(model.parameters(), optim.learning_rate, self.schedule)
        self.state = RunState()
        self.resumed = resume is not None
        if resume is not None:
            resume.restore_optimizer(self.optimizer)
            self.state = resume.state
        self.state.zero_recall_examples = sum(1 for b in self.train if b.zero_recall)
        self._orders: Dict[int, np.ndarray] = {}

    def _example(self, position: int) -> int:
        m = len(self.train)
        epoch = position // m
        order = self._orders.get(epoch)
        if order is None:
            order = np.random.default_rng([self.model.config.optim.seed, epoch]).permutation(m)
            self._orders = {epoch: order}
        return int(order[position % m])

    def _dump(self) -> None:
        self.layout.metrics.write_text(self.state.metrics_csv(), encoding="utf-8")
        if self.config.tracing_enabled:
            self.layout.trace.write_text(self.state.to_trace_jsonl(), encoding="utf-8")

    def _abort(self, reason: str, data: Dict[str, object]) -> None:
        self.state.add_trace("abort", {"reason": reason, **data})
        logger.error("training aborted: %s", reason)
        self._dump()

    def train_step(self, step: int) -> tuple[Optional[float], int]:
        """Accumulate gradients over ``batch_size * grad_accum`` examples and apply one update."""
        optim = self.model.config.optim
        per_step = optim.batch_size * optim.grad_accum
        losses: List[float] = []
        skipped = 0
        for k in range(per_step):
            idx = self._example(step * per_step + k)
            batch = self.train[idx]
            try:
                with Tape():
                    result = self.model.loss(batch)
                    if result.skipped:
                        skipped += 1
                        continue
                    scaled = result.loss * (1.0 / per_step)
                backward(scaled)
            except NumericError as e:
                self._abort("non-finite loss", {"step": step, "example": idx, "question": batch.question})
                raise NumericError(f"step {step}, example {idx} ({batch.question!r}): {e}") from e
            losses.append(float(result.loss.data))
        if skipped:
            self.state.add_trace("skip", {"step": step, "count": skipped})
        norm = clip_grad_norm(self.optimizer.params, optim.max_grad_norm)
        logger.debug("step %d grad norm %.4f", step, norm)
        self.optimizer.step(schedule_position=step + 0.5)
        self.state.skipped_examples += skipped
        return (float(np.mean(losses)) if losses else None), skipped

    def save(self) -> None:
        """Checkpoint parameters, moments and state, then flush metrics and trace."""
        try:
            save_checkpoint(self.layout.checkpoint, self.model, self.optimizer, self.state)
        except OSError as e:
            self._abort("checkpoint write failed", {"error": str(e)})
            raise
        self.state.add_trace("checkpoint", {"step": self.state.step, "path": str(self.layout.checkpoint)})
        self._dump()

    def run(self) -> RunResult:
        """Train up to ``optim.steps``, checkpointing every ``eval_interval`` steps and at the end."""
        optim = self.model.config.optim
        start = self.state.step
        if self.resumed:
            self.state.add_trace("resume", {"from_step": start, "steps": optim.steps})
            logger.info("resuming at step %d of %d", start, optim.steps)
        else:
            self.state.add_trace("start", {"from_step": start, "steps": optim.steps, "train": len(self.train), "dev": len(self.dev)})
        loss: Optional[float] = None
        bar = tqdm(range(start, optim.steps), desc="train", disable=not self.config.progress, initial=start, total=optim.steps)
        for step in bar:
            lr = self.optimizer.current_rate(step + 0.5)
            loss, skipped = self.train_step(step)
            self.state.step = step + 1
            is_eval = self.state.step % optim.eval_interval == 0 or self.state.step == optim.steps
            dev_em = evaluate(self.model, self.dev, optim.eval_limit).em if is_eval and self.dev else None
            if dev_em is not None:
                self.state.add_trace("eval", {"step": self.state.step, "dev_em": dev_em})
                logger.info("step %d dev EM %.4f", self.state.step, dev_em)
            self.state.add_metrics(MetricsRow(self.state.step, loss if loss is not None else 0.0, lr, dev_em, skipped))
            if loss is not None:
                bar.set_postfix(loss=f"{loss:.4f}")
            if is_eval and self.state.step < optim.steps:
                self.save()
        self.save()
        self.state.add_trace("done", {"step": self.state.step, "best_dev_em": self.state.best_dev_em})
        self._dump()
        final_em = next((r.dev_em for r in reversed(self.state.metrics) if r.dev_em is not None), None)
        return RunResult(steps=self.state.step, final_loss=loss, dev_em=final_em, state=self.state)


@dataclass
class PreparedData:
    vocab: Vocab
    train: List[TokenizedBatch]
    dev: List[TokenizedBatch]
    skipped_lines: int = 0


def prepare_data(config: RunConfig, vocab: Optional[Vocab] = None) -> PreparedData:
    """Load or generate both splits and tokenize them against one vocabulary."""
    train_src, dev_src = sources_from_config(config)
    if vocab is None:
        vocab = train_src.vocab(config.fusion, config.data.min_freq)
    train = [tokenize_record(r, vocab, config.fusion) for r in train_src.records()]
    dev = [tokenize_record(r, vocab, config.fusion) for r in dev_src.records()]
    skipped = len(getattr(train_src, "skipped", [])) + (len(getattr(dev_src, "skipped", [])) if dev_src is not train_src else 0)
    logger.info("prepared %d train / %d dev examples, vocabulary %d", len(train), len(dev), len(vocab))
    return PreparedData(vocab, train, dev, skipped)


def run_training(
    config: RunConfig,
    run_dir: str | Path,
    env: Optional[Config] = None,
    resume: Optional[LoadedCheckpoint] = None,
) -> tuple[FiEReader, RunResult, EvalReport]:
    """Train from scratch (or resume), then write dev predictions and the report into ``run_dir``."""
    if resume is not None:
        model = resume.model
        model.config = config
        data = prepare_data(config, model.vocab)
    else:
        data = prepare_data(config)
        model = FiEReader.initialize(config, data.vocab)
    runner = TrainingRunner(model, data.train, data.dev, run_dir, env, resume)
    result = runner.run()
    report = evaluate(model, data.dev, config.optim.eval_limit)
    write_eval(report, runner.layout)
    return model, result, report
