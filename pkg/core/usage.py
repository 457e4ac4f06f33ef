"""
Журнал использования шаблонов: какие TID упомянуты в трассе рассуждения,
предсказание и метрика по каждому запросу
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

from .exceptions import CorpusFormatError
from .store import template_sort_key

logger = logging.getLogger(__name__)

TEMPLATE_MENTION = re.compile(r'TEMPLATE_ID:\s*(TID_\d+)')

FLAG_UNKNOWN_TEMPLATE = 'unknown_template'
FLAG_ANSWER_FALLBACK = 'answer_fallback'
FLAG_ERROR = 'error'


def detect_used_templates(raw_trace: str) -> Set[str]:
    """Все различные TID_<n>, перед которыми стоит 'TEMPLATE_ID:'"""
    return set(TEMPLATE_MENTION.findall(raw_trace or ''))


def unknown_templates(template_ids: Iterable[str], known_ids: Iterable[str]) -> List[str]:
    known = set(known_ids)
    return sorted((tid for tid in template_ids if tid not in known), key=template_sort_key)


@dataclass(frozen=True)
class UsageRecord:
    query_id: str
    used_template_ids: FrozenSet[str]
    prediction: str
    gold_answers: Tuple[str, ...]
    metric_value: float
    raw_trace: str
    flags: Tuple[str, ...] = ()
    unknown_template_ids: Tuple[str, ...] = ()

    @property
    def failed(self) -> bool:
        return FLAG_ERROR in self.flags

    def to_dict(self) -> Dict[str, Any]:
        return {
            'query_id': self.query_id,
            'used_template_ids': sorted(self.used_template_ids, key=template_sort_key),
            'prediction': self.prediction,
            'gold_answers': list(self.gold_answers),
            'metric_value': self.metric_value,
            'raw_trace': self.raw_trace,
            'flags': list(self.flags),
            'unknown_template_ids': list(self.unknown_template_ids),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'UsageRecord':
        return cls(
            query_id=str(payload['query_id']),
            used_template_ids=frozenset(payload.get('used_template_ids', [])),
            prediction=payload.get('prediction', ''),
            gold_answers=tuple(payload.get('gold_answers', [])),
            metric_value=float(payload.get('metric_value', 0.0)),
            raw_trace=payload.get('raw_trace', ''),
            flags=tuple(payload.get('flags', [])),
            unknown_template_ids=tuple(payload.get('unknown_template_ids', [])),
        )


def build_usage_record(query_id: str, raw_trace: str, prediction: str, gold_answers: Iterable[str],
                       metric_value: float, known_ids: Optional[Iterable[str]] = None,
                       flags: Iterable[str] = ()) -> UsageRecord:
    used = detect_used_templates(raw_trace)
    flags = list(flags)
    unknown: List[str] = []
    if known_ids is not None:
        unknown = unknown_templates(used, known_ids)
        if unknown:
            flags.append(FLAG_UNKNOWN_TEMPLATE)
            logger.debug(f"Query {query_id}: trace mentions ids absent from the store: {unknown}")
    return UsageRecord(
        query_id=query_id,
        used_template_ids=frozenset(used),
        prediction=prediction,
        gold_answers=tuple(gold_answers),
        metric_value=metric_value,
        raw_trace=raw_trace,
        flags=tuple(flags),
        unknown_template_ids=tuple(unknown),
    )


def write_usage_log(records: Iterable[UsageRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(record.to_dict(), ensure_ascii=False) for record in records]
    path.write_text(''.join(line + '\n' for line in lines), encoding='utf-8')
    return path


def read_usage_log(path) -> List[UsageRecord]:
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise CorpusFormatError(f"Cannot read usage log {path}: {e}") from e

    records = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(UsageRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError) as e:
            raise CorpusFormatError(f"{path}:{line_number}: bad usage record: {e}") from e
    return records
