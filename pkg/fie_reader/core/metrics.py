from __future__ import annotations

import re
import string
from typing import Iterable, List, Sequence

from .errors import ContractError


_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_WS_RE = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Lower-case, strip punctuation, collapse whitespace."""
    lowered = text.lower().translate(_PUNCT_TABLE)
    return _WS_RE.sub(" ", lowered).strip()


def exact_match(prediction: str, golds: Iterable[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def evaluate_em(predictions: Sequence[str], gold_answers: Sequence[Sequence[str]]) -> float:
    if len(predictions) != len(gold_answers):
        raise ContractError(f"{len(predictions)} predictions for {len(gold_answers)} gold answer lists")
    if not predictions:
        return 0.0
    scores: List[int] = [exact_match(p, g) for p, g in zip(predictions, gold_answers)]
    return sum(scores) / len(scores)
