"""
Инференс и оценка: сборка промпта (запрос + шаблоны + документы), разбор финального ответа,
прогон по набору данных и запись каталога прогона
"""

import ast
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from django.conf import settings
from django.utils import timezone

from .corpus import (
    DatasetManifest,
    Document,
    PackedContext,
    QueryItem,
    TokenCounter,
    estimate_tokens,
    format_context,
    pack,
)
from .exceptions import EngineError, EvaluationAbortedError, PreconditionError
from .llm_gateway import CompletionRequest, LLMGateway
from .metrics import score as metric_score
from .retrieval import RetrievalIndex
from .store import TemplateStore, ThoughtTemplate, store_digest
from .usage import FLAG_ANSWER_FALLBACK, FLAG_ERROR, UsageRecord, build_usage_record, write_usage_log

logger = logging.getLogger(__name__)

FINAL_ANSWER_MARKER = 'Final Answer:'
OUTPUT_CONTRACT = 'Final Answer: [answers]'
STEP_BY_STEP = "Let's think step by step."

_QUOTES = '\'"‘’“”`'
_STRAIGHT_QUOTES = str.maketrans({'‘': "'", '’': "'", '“': '"', '”': '"'})


class BaselineMode(str, Enum):
    NAIVE = 'naive'
    COT = 'cot'
    CIC = 'cic'
    CIC_COT = 'cic_cot'
    TOTAL = 'total'

    @property
    def uses_templates(self) -> bool:
        return self == BaselineMode.TOTAL

    @property
    def uses_context(self) -> bool:
        return self in (BaselineMode.CIC, BaselineMode.CIC_COT, BaselineMode.TOTAL)

    @property
    def step_by_step(self) -> bool:
        return self in (BaselineMode.COT, BaselineMode.CIC_COT)


@dataclass(frozen=True)
class InferenceRequest:
    query_id: str
    question: str
    mode: BaselineMode
    snapshot_iteration: Optional[int] = None
    context_doc_ids: Optional[Tuple[str, ...]] = None


TOTAL_INSTRUCTIONS = (
    "You are given a set of reusable thought templates and a collection of documents. "
    "Answer the question by selecting the templates that fit it and applying them step by step.\n"
    "For every step write a line \"Step <n> | TEMPLATE_TITLE: <template name>\", then a line "
    "\"TEMPLATE_ID: <id of the applied template>\", then the reasoning for that step, "
    "citing the documents you rely on by their TITLE and ID.\n"
    "Finish with a single line in the form shown below, listing every answer in quotes."
)

CONTEXT_INSTRUCTIONS = (
    "You are given a collection of documents. Answer the question using the documents.\n"
    "Finish with a single line in the form shown below, listing every answer in quotes."
)

QUESTION_INSTRUCTIONS = (
    "Answer the question.\n"
    "Finish with a single line in the form shown below, listing every answer in quotes."
)


def serialize_template(template: ThoughtTemplate) -> str:
    """Блок шаблона в промпте; ключ TEMPLATE_ID используется при разборе трасс"""
    reason_flow = '\n'.join(f"{n}. {step}" for n, step in enumerate(template.reason_flow, start=1))
    solution = '\n'.join(f"{n}. {step}" for n, step in enumerate(template.example.solution_steps, start=1))
    return (
        f"TEMPLATE_ID: {template.template_id}\n"
        f"TEMPLATE_NAME: {template.template_name}\n"
        f"DESCRIPTION: {template.description}\n"
        f"REASON_FLOW:\n{reason_flow}\n"
        f"EXAMPLE:\n"
        f"Problem: {template.example.example_problem}\n"
        f"Solution Steps:\n{solution}\n"
        f"Answer: {template.example.final_answer}"
    )


def build_inference_prompt(request: InferenceRequest, templates: Optional[Sequence[ThoughtTemplate]],
                           context: Optional[PackedContext]) -> str:
    mode = BaselineMode(request.mode)
    if mode.uses_templates and templates is None:
        raise PreconditionError(f"Mode {mode.value} requires a template snapshot")
    if not mode.uses_templates and templates is not None:
        raise PreconditionError(f"Mode {mode.value} must not carry templates")
    if not mode.uses_context and context is not None:
        raise PreconditionError(f"Mode {mode.value} must not carry a document context")

    if mode.uses_templates:
        instructions = TOTAL_INSTRUCTIONS
    elif mode.uses_context:
        instructions = CONTEXT_INSTRUCTIONS
    else:
        instructions = QUESTION_INSTRUCTIONS

    sections = [instructions]
    if mode.uses_templates:
        blocks = '\n\n'.join(serialize_template(template) for template in templates)
        sections.append(f"### Thought Templates\n{blocks}")
    if context is not None:
        sections.append(f"### Documents\n{format_context(context)}")
    sections.append(f"### Question\n{request.question}")
    sections.append(OUTPUT_CONTRACT)
    if mode.step_by_step:
        sections.append(STEP_BY_STEP)
    return '\n\n'.join(sections)


def format_final_answer(answers: Sequence[str]) -> str:
    return f"{FINAL_ANSWER_MARKER} {list(answers)!r}"


def _split_answer_list(inner: str) -> List[str]:
    answers = []
    for part in inner.split(','):
        part = part.strip().strip(_QUOTES).strip()
        if part:
            answers.append(part)
    return answers


def _parse_answer_payload(payload: str) -> List[str]:
    payload = payload.strip()
    if payload.startswith('['):
        end = payload.rfind(']')
        bracketed = payload[:end + 1] if end != -1 else payload + ']'
        try:
            value = ast.literal_eval(bracketed.translate(_STRAIGHT_QUOTES))
        except (ValueError, SyntaxError):
            value = None
        if isinstance(value, (list, tuple)):
            return [str(item) for item in value]
        return _split_answer_list(bracketed[1:-1])
    cleaned = payload.strip(_QUOTES).strip()
    return [cleaned] if cleaned else []


def answer_from_trace(raw_trace: str) -> Tuple[List[str], bool]:
    """(ответы, признак fallback); fallback берет последнюю непустую строку как есть"""
    lines = (raw_trace or '').splitlines()
    for line in reversed(lines):
        stripped = line.strip()
        if stripped.startswith(FINAL_ANSWER_MARKER):
            return _parse_answer_payload(stripped[len(FINAL_ANSWER_MARKER):]), False

    for line in reversed(lines):
        if line.strip():
            return [line.strip()], True
    return [''], True


def parse_final_answer(raw_trace: str) -> List[str]:
    return answer_from_trace(raw_trace)[0]


@dataclass(frozen=True)
class EvalRow:
    query_id: str
    prediction: str
    answers: Tuple[str, ...]
    metric_value: float
    flags: Tuple[str, ...] = ()
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        payload = {
            'query_id': self.query_id,
            'prediction': self.prediction,
            'answers': list(self.answers),
            'metric_value': self.metric_value,
            'flags': list(self.flags),
        }
        if self.error is not None:
            payload['error'] = self.error
        return payload


@dataclass
class EvalResult:
    rows: List[EvalRow]
    aggregate: float
    metadata: Dict[str, Any]
    usage_records: List[UsageRecord] = field(default_factory=list)
    prompt_samples: List[Tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'aggregate': self.aggregate,
            'rows': [row.to_dict() for row in self.rows],
            'metadata': self.metadata,
        }


def mean_metric(rows: Sequence[EvalRow]) -> float:
    if not rows:
        return 0.0
    return sum(row.metric_value for row in rows) / len(rows)


@dataclass
class _QueryOutcome:
    row: EvalRow
    record: Optional[UsageRecord]
    prompt: Optional[str]


class Evaluator:
    """Прогон набора запросов через модель-ответчик с выбранным режимом"""

    def __init__(self, gateway: LLMGateway, answerer_backend_id: str, token_budget: Optional[int] = None,
                 token_counter: Optional[TokenCounter] = None, prompt_samples: Optional[int] = None,
                 abort_ratio: Optional[float] = None):
        self.gateway = gateway
        self.answerer_backend_id = answerer_backend_id
        self.token_budget = token_budget or settings.ENGINE_TOKEN_BUDGET
        self.token_counter = token_counter
        self.prompt_samples = settings.ENGINE_PROMPT_SAMPLES if prompt_samples is None else prompt_samples
        self.abort_ratio = settings.ENGINE_FAILURE_ABORT_RATIO if abort_ratio is None else abort_ratio

        self.stats = {
            'runs': 0,
            'queries': 0,
            'failures': 0,
            'answer_fallbacks': 0,
        }

    # --- контекст ---

    def _document_budget(self, request: InferenceRequest, templates) -> int:
        """Бюджет документов: токены, оставшиеся после инструкций и шаблонов"""
        config = self.gateway.config_for(self.answerer_backend_id)
        skeleton = build_inference_prompt(request, templates, PackedContext((), 0, self.token_budget))
        overhead = estimate_tokens(skeleton, self.token_counter)
        output_reserve = settings.ENGINE_MAX_OUTPUT_TOKENS['answerer']
        budget = min(self.token_budget, config.context_limit - overhead - output_reserve)
        if budget <= 0:
            raise PreconditionError(
                f"No room for documents: prompt overhead ~{overhead} tokens, limit {config.context_limit}"
            )
        return budget

    def _candidate_documents(self, manifest: DatasetManifest, query: QueryItem, k: Optional[int],
                             shared_index: Optional[RetrievalIndex]) -> List[Document]:
        if k is None:
            return manifest.documents_for(query)
        if query.doc_allowlist is not None:
            allowed = set(query.doc_allowlist)
            scoped = [doc for doc in manifest.retrieval_documents() if doc.doc_id in allowed]
            return RetrievalIndex(scoped).retrieve_text(query.question, k)
        return shared_index.retrieve_text(query.question, k)

    # --- один запрос ---

    def answer_query(self, manifest: DatasetManifest, query: QueryItem, mode: BaselineMode,
                     store: Optional[TemplateStore], k: Optional[int] = None,
                     shared_index: Optional[RetrievalIndex] = None) -> _QueryOutcome:
        templates = list(store.templates) if mode.uses_templates else None
        prompt = None
        try:
            request = InferenceRequest(
                query_id=query.query_id,
                question=query.question,
                mode=mode,
                snapshot_iteration=store.iteration if store is not None else None,
            )
            context = None
            if mode.uses_context:
                candidates = self._candidate_documents(manifest, query, k, shared_index)
                context = pack(candidates, self._document_budget(request, templates), self.token_counter)

            prompt = build_inference_prompt(request, templates, context)
            raw_trace = self.gateway.complete(
                CompletionRequest.for_role('answerer', prompt, self.answerer_backend_id)
            )
        except EngineError as e:
            logger.warning(f"Query {query.query_id} failed: {e}")
            row = EvalRow(query.query_id, '', (), 0.0, flags=(FLAG_ERROR,), error=str(e))
            record = None
            if mode.uses_templates:
                record = build_usage_record(query.query_id, '', '', query.gold_answers, 0.0, flags=[FLAG_ERROR])
            return _QueryOutcome(row, record, prompt)

        answers, fallback = answer_from_trace(raw_trace)
        prediction = ', '.join(answers)
        value = metric_score(manifest.metric, prediction, query.gold_answers)
        flags = (FLAG_ANSWER_FALLBACK,) if fallback else ()

        record = None
        if mode.uses_templates:
            record = build_usage_record(
                query.query_id, raw_trace, prediction, query.gold_answers, value,
                known_ids=store.template_ids, flags=flags,
            )
        return _QueryOutcome(EvalRow(query.query_id, prediction, tuple(answers), value, flags), record, prompt)

    # --- набор данных ---

    def evaluate_dataset(self, manifest: DatasetManifest, snapshot: Optional[TemplateStore],
                         mode, k: Optional[int] = None,
                         extra_metadata: Optional[Dict[str, Any]] = None) -> EvalResult:
        mode = BaselineMode(mode)
        if mode.uses_templates and snapshot is None:
            raise PreconditionError("Mode total requires a template snapshot")
        if k is not None and k < 1:
            raise PreconditionError(f"k must be at least 1, got {k}")
        if k is not None and not mode.uses_context:
            raise PreconditionError(f"Mode {mode.value} takes no documents, k is meaningless")

        store = snapshot if mode.uses_templates else None
        shared_index = None
        if mode.uses_context:
            # Корпус загружается до запуска потоков
            manifest.documents()
            if k is not None:
                shared_index = RetrievalIndex(manifest.retrieval_documents())

        config = self.gateway.config_for(self.answerer_backend_id)
        with ThreadPoolExecutor(max_workers=config.parallelism) as executor:
            outcomes = list(executor.map(
                lambda query: self.answer_query(manifest, query, mode, store, k, shared_index),
                manifest.queries,
            ))

        rows = [outcome.row for outcome in outcomes]
        failed = sum(1 for row in rows if FLAG_ERROR in row.flags)
        fallbacks = sum(1 for row in rows if FLAG_ANSWER_FALLBACK in row.flags)

        self.stats['runs'] += 1
        self.stats['queries'] += len(rows)
        self.stats['failures'] += failed
        self.stats['answer_fallbacks'] += fallbacks

        if rows and failed / len(rows) > self.abort_ratio:
            logger.error(f"Evaluation aborted: {failed} of {len(rows)} queries failed")
            raise EvaluationAbortedError(failed, len(rows))

        aggregate = mean_metric(rows)
        metadata = {
            'mode': mode.value,
            'metric': manifest.metric,
            'manifest': str(manifest.path),
            'answerer': self.answerer_backend_id,
            'backend': config.describe(),
            'snapshot_iteration': snapshot.iteration if store is not None else None,
            'snapshot_digest': store_digest(snapshot) if store is not None else None,
            'template_count': len(snapshot) if store is not None else 0,
            'k': k,
            'token_budget': self.token_budget,
            'context_source': ('retrieval' if k is not None else 'pack') if mode.uses_context else 'none',
            'query_count': len(rows),
            'failed_queries': failed,
            'answer_fallbacks': fallbacks,
            'max_output_tokens': settings.ENGINE_MAX_OUTPUT_TOKENS['answerer'],
            'telemetry': self.gateway.telemetry(),
            'created_at': timezone.now().isoformat(),
        }
        if extra_metadata:
            metadata.update(extra_metadata)

        logger.info(
            f"Evaluated {len(rows)} queries in {mode.value} mode: {manifest.metric}={aggregate:.4f}, "
            f"{failed} failed, {fallbacks} without a Final Answer line"
        )

        samples = [
            (outcome.row.query_id, outcome.prompt)
            for outcome in outcomes if outcome.prompt is not None
        ][:self.prompt_samples]

        return EvalResult(
            rows=rows,
            aggregate=aggregate,
            metadata=metadata,
            usage_records=[outcome.record for outcome in outcomes if outcome.record is not None],
            prompt_samples=samples,
        )


def dump_json(payload: Any) -> str:
    return json.dumps(payload, ensure_ascii=False, indent=2) + '\n'


def write_run(result: EvalResult, run_dir) -> Path:
    """runs/<run_id>/{eval.json, usage.jsonl, prompt_samples/}"""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / 'eval.json').write_text(dump_json(result.to_dict()), encoding='utf-8')
    write_usage_log(result.usage_records, run_dir / 'usage.jsonl')

    samples_dir = run_dir / 'prompt_samples'
    samples_dir.mkdir(exist_ok=True)
    for index, (query_id, prompt) in enumerate(result.prompt_samples):
        safe_id = ''.join(ch if ch.isalnum() or ch in '-_' else '_' for ch in query_id)
        (samples_dir / f"{index:03d}_{safe_id}.txt").write_text(prompt, encoding='utf-8')

    logger.info(f"Run written to {run_dir}")
    return run_dir
