"""Dataset records, vocabulary, tokenization and the synthetic cross-passage task."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..spec import FusionConfig, RunConfig, SyntheticTaskSpec
from .errors import DataError, SpecError, VocabularyError
from .metrics import normalize_answer


logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
SPECIALS = (PAD, UNK, CLS, SEP)


@dataclass
class Passage:
    title: str
    text: str


@dataclass
class DatasetRecord:
    question: str
    answers: List[str]
    passages: List[Passage]

    @staticmethod
    def from_dict(d: Dict[str, object]) -> "DatasetRecord":
        question = d.get("question")
        if not isinstance(question, str) or not question.strip():
            raise DataError("missing or empty 'question'")
        answers = d.get("answers", [])
        if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
            raise DataError("'answers' must be a list of strings")
        raw_passages = d.get("passages")
        if not isinstance(raw_passages, list):
            raise DataError("'passages' must be a list of objects")
        passages: List[Passage] = []
        for p in raw_passages:
            if not isinstance(p, dict):
                raise DataError("each passage must be an object with title and text")
            passages.append(Passage(title=str(p.get("title", "") or ""), text=str(p.get("text", "") or "")))
        return DatasetRecord(question=question, answers=list(answers), passages=passages)

    def to_dict(self) -> Dict[str, object]:
        return {
            "question": self.question,
            "answers": list(self.answers),
            "passages": [{"title": p.title, "text": p.text} for p in self.passages],
        }


@dataclass
class LoadReport:
    records: List[DatasetRecord] = field(default_factory=list)
    skipped: List[Tuple[int, str]] = field(default_factory=list)


def load_jsonl_report(path: str | Path, *, strict: bool = False, require_answers: bool = False) -> LoadReport:
    """Parse a JSON Lines dataset, keeping line-numbered reasons for every skipped line."""
    p = Path(path)
    try:
        lines = p.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read dataset {p}: {e}") from e
    report = LoadReport()
    for line_no, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            if not isinstance(obj, dict):
                raise DataError("line is not a JSON object")
            if require_answers and not obj.get("answers"):
                raise DataError("missing 'answers'")
            report.records.append(DatasetRecord.from_dict(obj))
        except (json.JSONDecodeError, DataError) as e:
            if strict:
                raise DataError(f"{p}:{line_no}: {e}") from e
            logger.warning("skipping %s:%d: %s", p, line_no, e)
            report.skipped.append((line_no, str(e)))
    if not report.records:
        raise DataError(f"no valid records in {p}")
    return report


def load_jsonl(path: str | Path, *, strict: bool = False, require_answers: bool = False) -> List[DatasetRecord]:
    return load_jsonl_report(path, strict=strict, require_answers=require_answers).records


def write_jsonl(path: str | Path, records: Iterable[DatasetRecord]) -> int:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with p.open("w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------


def tokenize(text: str) -> List[str]:
    return text.lower().split()


@dataclass
class Vocab:
    id_to_token: List[str]
    num_global_slots: int = 0
    token_to_id: Dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[UNK]

    @property
    def cls_id(self) -> int:
        return self.token_to_id[CLS]

    @property
    def sep_id(self) -> int:
        return self.token_to_id[SEP]

    def global_ids(self, count: int) -> np.ndarray:
        if count > self.num_global_slots:
            raise VocabularyError(f"{count} global slots requested, vocabulary reserves {self.num_global_slots}")
        return np.array([self.token_to_id[f"[G{i}]"] for i in range(count)], dtype=np.int64)

    def encode(self, tokens: Sequence[str]) -> List[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    @staticmethod
    def build(words: Iterable[str], num_global_slots: int) -> "Vocab":
        globals_ = [f"[G{i}]" for i in range(num_global_slots)]
        seen = set(SPECIALS) | set(globals_)
        ordered = list(SPECIALS) + globals_
        for w in words:
            if w not in seen:
                seen.add(w)
                ordered.append(w)
        return Vocab(id_to_token=ordered, num_global_slots=num_global_slots)

    def to_dict(self) -> Dict[str, object]:
        return {"tokens": self.id_to_token, "num_global_slots": self.num_global_slots}

    @staticmethod
    def from_dict(d: Dict[str, object]) -> "Vocab":
        tokens = d.get("tokens")
        if not isinstance(tokens, list):
            raise VocabularyError("vocabulary file lacks a token list")
        return Vocab(id_to_token=[str(t) for t in tokens], num_global_slots=int(d.get("num_global_slots", 0)))  # type: ignore[arg-type]


def build_vocab(records: Sequence[DatasetRecord], num_global_slots: int, min_freq: int = 2) -> Vocab:
    counts: Counter = Counter()
    for rec in records:
        counts.update(tokenize(rec.question))
        for p in rec.passages:
            counts.update(tokenize(p.title))
            counts.update(tokenize(p.text))
    words = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
    return Vocab.build(words, num_global_slots)


@dataclass
class TokenizedBatch:
    """One question with its N passages laid out as ``[CLS] q [SEP] (title [SEP]) text``."""

    question: str
    answers: List[str]
    query_ids: np.ndarray
    passage_ids: np.ndarray
    attention_mask: np.ndarray
    global_slot_ids: np.ndarray
    context_start: np.ndarray
    context_end: np.ndarray
    passage_tokens: List[List[str]]
    gold_spans: List[Tuple[int, int, int]] = field(default_factory=list)

    @property
    def num_passages(self) -> int:
        return int(self.passage_ids.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.passage_ids.shape[1])

    @property
    def num_global(self) -> int:
        return int(self.global_slot_ids.shape[0])

    @property
    def query_positions(self) -> np.ndarray:
        return np.arange(1, 1 + len(self.query_ids))

    @property
    def zero_recall(self) -> bool:
        return not self.gold_spans

    def span_text(self, passage: int, start: int, end: int) -> str:
        return " ".join(self.passage_tokens[passage][start : end + 1])

    def permuted(self, order: Sequence[int]) -> "TokenizedBatch":
        """Same example with passages reordered; ``order[k]`` is the old index placed at k."""
        order = list(order)
        inverse = {old: new for new, old in enumerate(order)}
        return TokenizedBatch(
            question=self.question,
            answers=list(self.answers),
            query_ids=self.query_ids.copy(),
            passage_ids=self.passage_ids[order].copy(),
            attention_mask=self.attention_mask[order].copy(),
            global_slot_ids=self.global_slot_ids.copy(),
            context_start=self.context_start[order].copy(),
            context_end=self.context_end[order].copy(),
            passage_tokens=[list(self.passage_tokens[i]) for i in order],
            gold_spans=sorted((inverse[j], st, en) for j, st, en in self.gold_spans),
        )


def locate_answer(context: Sequence[str], answer: str) -> List[Tuple[int, int]]:
    """Token spans (inclusive) of ``context`` whose normalized text equals the answer.

    First match plus all later non-overlapping repeats.
    """
    target = normalize_answer(answer).split()
    if not target:
        return []
    norm = [normalize_answer(t) for t in context]
    hits: List[Tuple[int, int]] = []
    i = 0
    width = len(target)
    while i + width <= len(norm):
        if norm[i : i + width] == target:
            hits.append((i, i + width - 1))
            i += width
        else:
            i += 1
    return hits


def tokenize_record(record: DatasetRecord, vocab: Vocab, fusion: FusionConfig) -> TokenizedBatch:
    n, s = fusion.num_passages, fusion.passage_seq_len
    g = fusion.effective_global_tokens
    q_tokens = tokenize(record.question)[: max(0, s - 3)]
    q_ids = vocab.encode(q_tokens)

    passage_ids = np.full((n, s), vocab.pad_id, dtype=np.int64)
    mask = np.zeros((n, s), dtype=bool)
    ctx_start = np.zeros(n, dtype=np.int64)
    ctx_end = np.zeros(n, dtype=np.int64)
    surfaces: List[List[str]] = []
    gold: List[Tuple[int, int, int]] = []

    prefix_tokens = [CLS] + q_tokens + [SEP]
    passages = [p for p in record.passages if tokenize(p.title) or tokenize(p.text)]
    if len(passages) < len(record.passages):
        logger.warning("dropped %d empty passage(s) for %r", len(record.passages) - len(passages), record.question)
    prefix_ids = [vocab.cls_id] + q_ids + [vocab.sep_id]
    for j in range(n):
        tokens = list(prefix_tokens)
        ids = list(prefix_ids)
        context: List[str] = []
        if j < len(passages):
            passage = passages[j]
            title = tokenize(passage.title)
            if title:
                tokens += title + [SEP]
                ids += vocab.encode(title) + [vocab.sep_id]
            context = tokenize(passage.text)
        start = min(len(ids), s)
        budget = max(0, s - start)
        if len(context) > budget:
            context = context[:budget]
        tokens += context
        ids += vocab.encode(context)
        tokens, ids = tokens[:s], ids[:s]
        passage_ids[j, : len(ids)] = ids
        mask[j, : len(ids)] = True
        ctx_start[j] = start
        ctx_end[j] = start + len(context)
        surface = [t if t not in SPECIALS else "" for t in tokens] + [""] * (s - len(tokens))
        surfaces.append(surface)
        for answer in record.answers:
            for st, en in locate_answer(context, answer):
                gold.append((j, start + st, start + en))

    batch = TokenizedBatch(
        question=record.question,
        answers=list(record.answers),
        query_ids=np.array(q_ids, dtype=np.int64),
        passage_ids=passage_ids,
        attention_mask=mask,
        global_slot_ids=vocab.global_ids(g) if g else np.zeros(0, dtype=np.int64),
        context_start=ctx_start,
        context_end=ctx_end,
        passage_tokens=surfaces,
        gold_spans=sorted(set(gold)),
    )
    if record.answers and batch.zero_recall:
        logger.debug("zero-recall record: %r", record.question)
    return batch


def build_vocab_and_tokenize(
    records: Sequence[DatasetRecord],
    fusion: FusionConfig,
    vocab: Optional[Vocab] = None,
    min_freq: int = 2,
) -> Tuple[Vocab, List[TokenizedBatch]]:
    if vocab is None:
        vocab = build_vocab(records, fusion.num_global_tokens, min_freq=min_freq)
    return vocab, [tokenize_record(r, vocab, fusion) for r in records]


# ---------------------------------------------------------------------------
# Synthetic cross-passage task
# ---------------------------------------------------------------------------

QUESTION_WORDS = ("what", "follows")


@dataclass
class SyntheticLexicon:
    keys: List[str]
    answer_words: List[str]
    filler: List[str]

    @staticmethod
    def from_spec(spec: SyntheticTaskSpec) -> "SyntheticLexicon":
        num_keys = max(2, spec.vocab_size // 10)
        rest = spec.vocab_size - num_keys
        num_answer = rest // 2
        num_filler = rest - num_answer
        if num_answer < 1 or num_filler < 1:
            raise SpecError(f"vocab_size {spec.vocab_size} too small for keys, answers and filler")
        return SyntheticLexicon(
            keys=[f"k{i}" for i in range(num_keys)],
            answer_words=[f"a{i}" for i in range(num_answer)],
            filler=[f"f{i}" for i in range(num_filler)],
        )

    @property
    def words(self) -> List[str]:
        return list(QUESTION_WORDS) + self.keys + self.answer_words + self.filler


def vocab_from_spec(spec: SyntheticTaskSpec, num_global_slots: int) -> Vocab:
    return Vocab.build(SyntheticLexicon.from_spec(spec).words, num_global_slots)


def _check_feasible(spec: SyntheticTaskSpec, lex: SyntheticLexicon) -> None:
    if spec.num_plants + spec.num_distractors > spec.num_passages:
        raise SpecError(
            f"{spec.num_plants} plants + {spec.num_distractors} distractors exceed {spec.num_passages} passages"
        )
    if spec.passage_len < spec.answer_len + 1:
        raise SpecError(f"passage_len {spec.passage_len} cannot hold a key plus a {spec.answer_len}-token answer")
    if len(lex.answer_words) ** spec.answer_len < 1 + spec.num_distractors:
        raise SpecError("not enough distinct answer strings for the requested distractors")
    if not spec.requires_aggregation and spec.num_distractors and len(lex.keys) < 2:
        raise SpecError("distractor keys need at least two key tokens")


def _split_seed(spec: SyntheticTaskSpec, split: str) -> np.random.Generator:
    index = {"train": 0, "dev": 1, "test": 2}.get(split)
    if index is None:
        raise SpecError(f"unknown split {split!r}")
    return np.random.default_rng([spec.seed, index])


def generate_synthetic(spec: SyntheticTaskSpec, split: str = "train", count: Optional[int] = None) -> Iterator[DatasetRecord]:
    """Yield records where a question key precedes the true answer in ``num_plants`` passages.

    Distractor strings are planted once each in other passages. Under
    ``requires_aggregation`` they follow the question's own key, so every
    plant looks the same locally and only the number of occurrences across
    passages singles out the answer; otherwise they follow a different key.
    """
    lex = SyntheticLexicon.from_spec(spec)
    _check_feasible(spec, lex)
    rng = _split_seed(spec, split)
    total = count if count is not None else (spec.num_train if split == "train" else spec.num_dev)
    width = spec.answer_len
    for _ in range(total):
        key = lex.keys[int(rng.integers(len(lex.keys)))]
        strings: List[Tuple[str, ...]] = []
        while len(strings) < 1 + spec.num_distractors:
            cand = tuple(lex.answer_words[int(i)] for i in rng.integers(len(lex.answer_words), size=width))
            if cand not in strings:
                strings.append(cand)
        gold, distractors = strings[0], strings[1:]
        order = [int(i) for i in rng.permutation(spec.num_passages)]
        plants: Dict[int, Tuple[str, Tuple[str, ...]]] = {}
        for j in order[: spec.num_plants]:
            plants[j] = (key, gold)
        for j, d in zip(order[spec.num_plants : spec.num_plants + spec.num_distractors], distractors):
            if spec.requires_aggregation:
                plants[j] = (key, d)
            else:
                others = [k for k in lex.keys if k != key]
                plants[j] = (others[int(rng.integers(len(others)))], d)
        passages: List[Passage] = []
        for j in range(spec.num_passages):
            words = [lex.filler[int(i)] for i in rng.integers(len(lex.filler), size=spec.passage_len)]
            if j in plants:
                plant_key, answer = plants[j]
                pos = int(rng.integers(0, spec.passage_len - width))
                words[pos : pos + width + 1] = [plant_key, *answer]
            passages.append(Passage(title="", text=" ".join(words)))
        yield DatasetRecord(question=f"{QUESTION_WORDS[0]} {QUESTION_WORDS[1]} {key}", answers=[" ".join(gold)], passages=passages)


def frequency_oracle_predict(record: DatasetRecord, answer_len: int) -> str:
    """Most frequent ``answer_len``-gram following the question's key token; ties go to first seen."""
    key = tokenize(record.question)[-1]
    counts: Counter = Counter()
    for p in record.passages:
        words = tokenize(p.text)
        for i, w in enumerate(words[:-answer_len] if answer_len else []):
            if w == key:
                counts[" ".join(words[i + 1 : i + 1 + answer_len])] += 1
    if not counts:
        return ""
    return counts.most_common(1)[0][0]


# ---------------------------------------------------------------------------
# Record sources
# ---------------------------------------------------------------------------


@dataclass
class RecordSource:
    def records(self) -> List[DatasetRecord]:  # pragma: no cover - interface
        raise NotImplementedError

    def vocab(self, fusion: FusionConfig, min_freq: int) -> Vocab:
        return build_vocab(self.records(), fusion.num_global_tokens, min_freq=min_freq)


@dataclass
class JsonlSource(RecordSource):
    path: str
    strict: bool = False
    require_answers: bool = True
    skipped: List[Tuple[int, str]] = field(default_factory=list)
    _cache: Optional[List[DatasetRecord]] = field(default=None, init=False, repr=False)

    def records(self) -> List[DatasetRecord]:
        if self._cache is None:
            report = load_jsonl_report(self.path, strict=self.strict, require_answers=self.require_answers)
            self.skipped = report.skipped
            self._cache = report.records
        return self._cache


@dataclass
class SyntheticSource(RecordSource):
    spec: SyntheticTaskSpec
    split: str = "train"
    _cache: Optional[List[DatasetRecord]] = field(default=None, init=False, repr=False)

    def records(self) -> List[DatasetRecord]:
        if self._cache is None:
            self._cache = list(generate_synthetic(self.spec, self.split))
        return self._cache

    def vocab(self, fusion: FusionConfig, min_freq: int) -> Vocab:
        return vocab_from_spec(self.spec, fusion.num_global_tokens)


def sources_from_config(config: RunConfig) -> Tuple[RecordSource, RecordSource]:
    """Train and dev sources: JSONL paths win over the synthetic block."""
    data = config.data
    if data.train_path:
        train: RecordSource = JsonlSource(data.train_path, strict=data.strict)
        dev: RecordSource = JsonlSource(data.dev_path, strict=data.strict) if data.dev_path else train
        return train, dev
    if config.synthetic is not None:
        return SyntheticSource(config.synthetic, "train"), SyntheticSource(config.synthetic, "dev")
    raise DataError("config names neither data.train_path nor a synthetic block")


def random_batch(
    fusion: FusionConfig,
    vocab_size: int,
    rng: np.random.Generator,
    query_len: int = 1,
    full: bool = False,
) -> TokenizedBatch:
    """Random ids in the standard layout, for instrumentation and property checks.

    Ids 0-3 are the specials and the next G ids the global slots; context
    lengths vary per passage unless ``full``.
    """
    n, s = fusion.num_passages, fusion.passage_seq_len
    g = fusion.num_global_tokens
    first_word = len(SPECIALS) + g
    if vocab_size <= first_word:
        raise VocabularyError(f"vocab_size {vocab_size} leaves no room for words after {first_word} reserved ids")
    q = min(query_len, max(0, s - 2))
    query = rng.integers(first_word, vocab_size, size=q)
    ids = np.zeros((n, s), dtype=np.int64)
    mask = np.zeros((n, s), dtype=bool)
    start = min(q + 2, s)
    ends = np.full(n, s, dtype=np.int64) if full else rng.integers(start, s + 1, size=n)
    for j in range(n):
        length = int(ends[j])
        ids[j, 0] = 2
        ids[j, 1 : 1 + q] = query
        if q + 1 < s:
            ids[j, q + 1] = 3
        ids[j, start:length] = rng.integers(first_word, vocab_size, size=length - start)
        mask[j, : max(length, min(start, s))] = True
    surfaces = [[f"w{int(t)}" for t in row] for row in ids]
    return TokenizedBatch(
        question=" ".join(f"w{int(t)}" for t in query),
        answers=[],
        query_ids=query.astype(np.int64),
        passage_ids=ids,
        attention_mask=mask,
        global_slot_ids=np.arange(len(SPECIALS), len(SPECIALS) + g, dtype=np.int64),
        context_start=np.full(n, start, dtype=np.int64),
        context_end=ends.astype(np.int64),
        passage_tokens=surfaces,
    )
