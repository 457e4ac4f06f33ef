"""
Хранилище шаблонов рассуждений
Доменные типы, алгебра решений KEEP/FIX/ADD/DISCARD и снимки по итерациям
"""

import copy
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .exceptions import DecisionError, StoreParseError, UnknownTemplateError
from .validators import ValidationManager

logger = logging.getLogger(__name__)

TEMPLATE_ID_PATTERN = re.compile(r'^TID_(\d+)$')

PROVENANCE_CONSTRUCTED = 'constructed'


class Decision(str, Enum):
    """Решение по шаблону после текстовой обратной связи"""
    KEEP = "KEEP"
    FIX = "FIX"
    ADD = "ADD"
    DISCARD = "DISCARD"


@dataclass(frozen=True)
class TemplateExample:
    example_problem: str
    solution_steps: Tuple[str, ...]
    final_answer: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'example_problem': self.example_problem,
            'solution_steps': list(self.solution_steps),
            'final_answer': self.final_answer,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'TemplateExample':
        return cls(
            example_problem=payload['example_problem'],
            solution_steps=tuple(payload['solution_steps']),
            final_answer=payload['final_answer'],
        )


@dataclass(frozen=True)
class ThoughtTemplate:
    """Переиспользуемый шаблон рассуждения"""
    template_id: str
    template_name: str
    description: str
    reason_flow: Tuple[str, ...]
    example: TemplateExample

    def to_dict(self) -> Dict[str, Any]:
        # Порядок ключей совпадает со SCHEMA промпта редактирования
        return {
            'template_id': self.template_id,
            'template_name': self.template_name,
            'description': self.description,
            'reason_flow': list(self.reason_flow),
            'example': self.example.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any], template_id: Optional[str] = None) -> 'ThoughtTemplate':
        return cls(
            template_id=template_id if template_id is not None else payload['template_id'],
            template_name=payload['template_name'],
            description=payload['description'],
            reason_flow=tuple(payload['reason_flow']),
            example=TemplateExample.from_dict(payload['example']),
        )

    def with_id(self, template_id: str) -> 'ThoughtTemplate':
        return ThoughtTemplate(
            template_id=template_id,
            template_name=self.template_name,
            description=self.description,
            reason_flow=self.reason_flow,
            example=self.example,
        )


@dataclass(frozen=True)
class ScoreRecord:
    """Агрегированная оценка шаблона по запросам, где он реально использовался"""
    template_id: str
    usage_count: int = 0
    score_sum: float = 0.0

    @property
    def score_mean(self) -> Optional[float]:
        if self.usage_count == 0:
            return None
        return self.score_sum / self.usage_count

    def to_dict(self) -> Dict[str, Any]:
        payload = {
            'template_id': self.template_id,
            'usage_count': self.usage_count,
            'score_sum': self.score_sum,
        }
        if self.usage_count > 0:
            payload['score_mean'] = self.score_mean
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'ScoreRecord':
        return cls(payload['template_id'], int(payload['usage_count']), float(payload['score_sum']))


def template_number(template_id: str) -> Optional[int]:
    match = TEMPLATE_ID_PATTERN.match(template_id)
    return int(match.group(1)) if match else None


def template_sort_key(template_id: str) -> Tuple[int, str]:
    """TID_2 < TID_10; нестандартные id идут последними"""
    number = template_number(template_id)
    return (number if number is not None else 10 ** 12, template_id)


@dataclass
class TemplateStore:
    """Снимок набора шаблонов на итерации"""
    iteration: int = 0
    templates: List[ThoughtTemplate] = field(default_factory=list)
    provenance: Dict[str, str] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def template_ids(self) -> List[str]:
        return [template.template_id for template in self.templates]

    def get(self, template_id: str) -> ThoughtTemplate:
        for template in self.templates:
            if template.template_id == template_id:
                return template
        raise UnknownTemplateError(template_id)

    def __contains__(self, template_id: str) -> bool:
        return any(template.template_id == template_id for template in self.templates)

    def copy(self) -> 'TemplateStore':
        return TemplateStore(
            iteration=self.iteration,
            templates=list(self.templates),
            provenance=dict(self.provenance),
            metadata=copy.deepcopy(self.metadata),
        )

    def next_iteration(self) -> 'TemplateStore':
        successor = self.copy()
        successor.iteration = self.iteration + 1
        return successor

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iteration': self.iteration,
            'templates': [template.to_dict() for template in self.templates],
            'provenance': dict(self.provenance),
            'metadata': copy.deepcopy(self.metadata),
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'TemplateStore':
        validation = ValidationManager()
        result = validation.validate_payload(payload, 'store')
        if not result['is_valid']:
            field_name = validation.first_field(result)
            raise StoreParseError(f"Invalid store file: {result['errors'][0]}", field=field_name)

        ids_result = validation.validate_store_ids([t['template_id'] for t in payload['templates']])
        if not ids_result['is_valid']:
            raise StoreParseError(ids_result['errors'][0], field=validation.first_field(ids_result))

        return cls(
            iteration=payload['iteration'],
            templates=[ThoughtTemplate.from_dict(t) for t in payload['templates']],
            provenance=dict(payload['provenance']),
            metadata=copy.deepcopy(payload.get('metadata', {})),
        )


def assign_template_id(store: TemplateStore) -> str:
    """
    Новый id вида TID_<n>: n = 1 + максимальный номер среди текущих шаблонов
    и всех когда-либо выданных (номера удаленных шаблонов не переиспользуются)
    """
    numbers = [template_number(template_id) for template_id in store.template_ids]
    highest = max([n for n in numbers if n is not None], default=0)
    highest = max(highest, int(store.metadata.get('id_high_water', 0)))
    return f"TID_{highest + 1}"


def add_template(store: TemplateStore, template: ThoughtTemplate, origin: str = PROVENANCE_CONSTRUCTED) -> ThoughtTemplate:
    """Добавляет шаблон под свежим id (мутирует store, используется при сборке)"""
    template_id = assign_template_id(store)
    stored = template.with_id(template_id)
    store.templates.append(stored)
    store.provenance[template_id] = origin
    store.metadata['id_high_water'] = template_number(template_id)
    return stored


def apply_decision(store: TemplateStore, template_id: str, decision: Decision,
                   revised: Optional[ThoughtTemplate] = None) -> TemplateStore:
    """
    Применяет решение к шаблону и возвращает новый снимок
    (исходный store не изменяется)
    """
    decision = Decision(decision)
    if template_id not in store:
        raise UnknownTemplateError(template_id)
    if decision in (Decision.FIX, Decision.ADD) and revised is None:
        raise DecisionError(f"{decision.value} requires a revised template for {template_id}")
    if decision in (Decision.KEEP, Decision.DISCARD) and revised is not None:
        raise DecisionError(f"{decision.value} must not carry a revised template for {template_id}")

    updated = store.copy()

    if decision == Decision.KEEP:
        return updated

    if decision == Decision.DISCARD:
        updated.templates = [t for t in updated.templates if t.template_id != template_id]
        updated.provenance.pop(template_id, None)
        discarded = updated.metadata.setdefault('discarded', [])
        discarded.append(template_id)
        number = template_number(template_id)
        if number is not None:
            updated.metadata['id_high_water'] = max(int(updated.metadata.get('id_high_water', 0)), number)
        logger.info(f"Template {template_id} discarded")
        return updated

    if decision == Decision.FIX:
        replacement = revised.with_id(template_id)
        updated.templates = [replacement if t.template_id == template_id else t for t in updated.templates]
        updated.provenance[template_id] = f"fixed-from:{template_id}"
        return updated

    # ADD: оригинал остается, ревизия добавляется под новым id
    added = add_template(updated, revised, origin=f"added-from:{template_id}")
    logger.info(f"Template {added.template_id} added from {template_id}")
    return updated


def canonical_json(store: TemplateStore) -> str:
    """Стабильная сериализация снимка (байт в байт между прогонами)"""
    return json.dumps(store.to_dict(), ensure_ascii=False, indent=2, sort_keys=False) + '\n'


def store_digest(store: TemplateStore) -> str:
    return hashlib.sha256(canonical_json(store).encode('utf-8')).hexdigest()


def snapshot_path(directory, iteration: int) -> Path:
    return Path(directory) / f"store.iter{iteration}.json"


def snapshot(store: TemplateStore, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(store), encoding='utf-8')
    logger.info(f"Snapshot of iteration {store.iteration} written to {path} ({len(store)} templates)")
    return path


def load(path) -> TemplateStore:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise StoreParseError(f"Store file {path} is not valid JSON: {e}") from e
    return TemplateStore.from_dict(payload)
