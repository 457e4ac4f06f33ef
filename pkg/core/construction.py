"""
Построение начального набора шаблонов из обучающих троек (вопрос, решение, ответ)
"""

import json
import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .exceptions import (
    AuthMissingError,
    ContaminationError,
    CorpusFormatError,
    GatewayError,
    PayloadParseError,
    PreconditionError,
)
from .llm_gateway import CompletionRequest, LLMGateway
from .prompts import render_construction_prompt
from .store import TemplateStore, ThoughtTemplate, add_template
from .validators import ValidationManager

logger = logging.getLogger(__name__)

HOLISTIC_KEYS = ('template_name', 'description', 'reason_flow', 'example')


@dataclass(frozen=True)
class TrainingTriple:
    query_id: str
    problem: str
    solution: Optional[Tuple[str, ...]]
    answer: str

    def __post_init__(self):
        if not self.problem or not self.answer:
            raise PreconditionError(f"Triple {self.query_id}: problem and answer must be non-empty")

    def source_case(self) -> Dict[str, Any]:
        return {
            'problem': self.problem,
            'solution': list(self.solution) if self.solution else None,
            'answer': self.answer,
        }


def load_triples(path) -> List[TrainingTriple]:
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise CorpusFormatError(f"Cannot read triples file {path}: {e}") from e

    validation = ValidationManager()
    triples = []
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"{path}:{line_number}: invalid JSON: {e}") from e
        result = validation.validate_payload(payload, 'triple')
        if not result['is_valid']:
            raise CorpusFormatError(f"{path}:{line_number}: {result['errors'][0]}")
        triples.append(TrainingTriple(
            query_id=str(payload['query_id']),
            problem=payload['problem'],
            solution=tuple(payload['solution']) if payload.get('solution') else None,
            answer=payload['answer'],
        ))
    return triples


def sample_triples(triples: Sequence[TrainingTriple], n: int, seed: int) -> List[TrainingTriple]:
    """Детерминированная выборка n троек; порядок файла сохраняется"""
    if n >= len(triples):
        return list(triples)
    chosen = sorted(random.Random(seed).sample(range(len(triples)), n))
    return [triples[index] for index in chosen]


@dataclass
class ConstructionDraft:
    """Результат одного вызова конструктора до назначения id"""
    query_id: str
    templates: List[ThoughtTemplate] = field(default_factory=list)
    holistic: Optional[Dict[str, Any]] = None
    skips: List[Dict[str, Any]] = field(default_factory=list)
    backend_failure: Optional[GatewayError] = None


class TemplateConstructor:
    """Конструктор шаблонов поверх шлюза"""

    def __init__(self, gateway: LLMGateway, backend_id: str, compositional: bool = True):
        self.gateway = gateway
        self.backend_id = backend_id
        self.compositional = compositional
        self.validation = ValidationManager()

        self.stats = {
            'triples': 0,
            'templates': 0,
            'skips': 0,
            'backend_failures': 0,
        }

    def _template_from_entry(self, entry: Any) -> Tuple[Optional[ThoughtTemplate], Optional[str]]:
        result = self.validation.validate_payload(entry, 'sub_template')
        if not result['is_valid']:
            return None, result['errors'][0]
        return ThoughtTemplate.from_dict(entry, template_id=''), None

    def draft_templates(self, triple: TrainingTriple) -> ConstructionDraft:
        draft = ConstructionDraft(query_id=triple.query_id)
        prompt = render_construction_prompt(triple.problem, triple.solution, triple.answer)
        request = CompletionRequest.for_role('constructor', prompt, self.backend_id)

        try:
            payload = self.gateway.complete_json(request, 'construction')
        except PayloadParseError as e:
            draft.skips.append({'query_id': triple.query_id, 'reason': f"unparseable output: {e}"})
            return draft
        except AuthMissingError:
            raise
        except GatewayError as e:
            draft.skips.append({'query_id': triple.query_id, 'reason': f"backend failure: {e}"})
            draft.backend_failure = e
            return draft

        holistic_payload = {key: payload[key] for key in HOLISTIC_KEYS if key in payload}
        holistic, holistic_error = self._template_from_entry(holistic_payload)
        if holistic is not None:
            draft.holistic = holistic_payload

        if not self.compositional:
            if holistic is None:
                draft.skips.append({'query_id': triple.query_id, 'reason': f"holistic template invalid: {holistic_error}"})
            else:
                draft.templates.append(holistic)
            return draft

        entries = payload['sub_templates']
        if not entries:
            draft.skips.append({'query_id': triple.query_id, 'reason': 'no sub_templates in output'})
            return draft

        for index, entry in enumerate(entries):
            template, error = self._template_from_entry(entry)
            if template is None:
                draft.skips.append({'query_id': triple.query_id, 'reason': f"sub_templates[{index}] invalid: {error}"})
                continue
            draft.templates.append(template)
        return draft

    def _absorb(self, store: TemplateStore, triple: TrainingTriple, draft: ConstructionDraft) -> List[ThoughtTemplate]:
        """Назначение id и запись происхождения; вызывается строго в порядке троек"""
        self.stats['triples'] += 1
        for skip in draft.skips:
            logger.warning(f"Construction skip for {skip['query_id']}: {skip['reason']}")
        self.stats['skips'] += len(draft.skips)
        if draft.backend_failure is not None:
            self.stats['backend_failures'] += 1

        metadata = store.metadata
        metadata.setdefault('construction_skips', []).extend(draft.skips)
        if draft.holistic is not None:
            metadata.setdefault('holistic_templates', {})[triple.query_id] = draft.holistic

        stored = []
        for template in draft.templates:
            added = add_template(store, template)
            metadata.setdefault('source_queries', {})[added.template_id] = triple.query_id
            stored.append(added)
        if stored:
            metadata.setdefault('source_cases', {})[triple.query_id] = triple.source_case()

        self.stats['templates'] += len(stored)
        return stored

    def construct_from_triple(self, triple: TrainingTriple, store: TemplateStore) -> List[ThoughtTemplate]:
        """Шаблоны одной тройки, добавленные в store под свежими id"""
        return self._absorb(store, triple, self.draft_templates(triple))

    def build_initial_set(self, triples: Sequence[TrainingTriple], test_query_ids: Iterable[str] = (),
                          oracle: bool = False, abort_ratio: float = 0.5) -> TemplateStore:
        if not triples:
            raise PreconditionError("No training triples to build templates from")

        overlap = {triple.query_id for triple in triples} & set(test_query_ids)
        if overlap and not oracle:
            raise ContaminationError(overlap)

        config = self.gateway.config_for(self.backend_id)
        with ThreadPoolExecutor(max_workers=config.parallelism) as executor:
            drafts = list(executor.map(self.draft_templates, triples))

        failures = [draft.backend_failure for draft in drafts if draft.backend_failure is not None]
        if failures and len(failures) / len(triples) > abort_ratio:
            logger.error(f"Construction aborted: backend failed on {len(failures)} of {len(triples)} triples")
            raise failures[-1]

        store = TemplateStore(iteration=0, metadata={
            'id_high_water': 0,
            'template_source': self.backend_id,
            'compositional': self.compositional,
            'oracle': bool(oracle),
            'num_triples': len(triples),
            'source_queries': {},
            'source_cases': {},
            'holistic_templates': {},
            'construction_skips': [],
        })
        for triple, draft in zip(triples, drafts):
            self._absorb(store, triple, draft)

        logger.info(
            f"Initial template set built: {len(store)} templates from {len(triples)} triples, "
            f"{self.stats['skips']} skip records"
        )
        return store
