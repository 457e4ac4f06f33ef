"""
Метрики ответа: exact match, token F1 и бинарная точность с SQuAD-нормализацией
"""

import re
import string
from collections import Counter
from typing import Callable, Dict, List, Optional, Sequence, Union

from .exceptions import PreconditionError

_ARTICLES = re.compile(r'\b(a|an|the)\b')
_PUNCTUATION = str.maketrans('', '', string.punctuation)


def normalize_answer(text: str) -> str:
    """Нижний регистр, без пунктуации и артиклей a/an/the, пробелы схлопнуты"""
    text = text.lower()
    text = text.translate(_PUNCTUATION)
    text = _ARTICLES.sub(' ', text)
    return ' '.join(text.split())


def _require_gold(gold_answers: Sequence[str]):
    if not gold_answers:
        raise PreconditionError("Gold answer set must not be empty")


def exact_match(prediction: str, gold_answers: Sequence[str]) -> float:
    _require_gold(gold_answers)
    normalized = normalize_answer(prediction)
    return 1.0 if any(normalized == normalize_answer(gold) for gold in gold_answers) else 0.0


def _f1_pair(prediction: str, gold: str) -> float:
    prediction_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not prediction_tokens or not gold_tokens:
        return 1.0 if prediction_tokens == gold_tokens else 0.0

    overlap = sum((Counter(prediction_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(prediction_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, gold_answers: Sequence[str]) -> float:
    """Максимум по gold-вариантам"""
    _require_gold(gold_answers)
    return max(_f1_pair(prediction, gold) for gold in gold_answers)


def binary_label(text: str) -> Optional[str]:
    tokens = normalize_answer(text).split()
    if tokens and tokens[0] in ('yes', 'no'):
        return tokens[0]
    return None


def binary_accuracy(prediction: str, gold: Union[str, Sequence[str]]) -> float:
    gold_answers: List[str] = [gold] if isinstance(gold, str) else list(gold)
    _require_gold(gold_answers)
    predicted = binary_label(prediction)
    if predicted is None:
        return 0.0
    return 1.0 if any(binary_label(answer) == predicted for answer in gold_answers) else 0.0


METRICS: Dict[str, Callable[[str, Sequence[str]], float]] = {
    'em': exact_match,
    'f1': token_f1,
    'accuracy': binary_accuracy,
}


def score(metric: str, prediction: str, gold_answers: Sequence[str]) -> float:
    if metric not in METRICS:
        raise PreconditionError(f"Unknown metric: {metric}")
    return METRICS[metric](prediction, gold_answers)


def failure_threshold(metric: str) -> float:
    """Запрос считается проваленным, если метрика ниже порога"""
    return 0.5 if metric == 'f1' else 1.0
