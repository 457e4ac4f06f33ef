"""
Стратегия обновления шаблонов
Оценка шаблонов по журналу использования, выбор слабых, текстовая обратная связь
с решением KEEP/FIX/ADD/DISCARD, применение правок и итерации с ранней остановкой
"""

import json
import logging
import math
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from django.conf import settings

from .corpus import DatasetManifest
from .exceptions import (
    EvaluationAbortedError,
    GatewayError,
    IterationAbortedError,
    PayloadParseError,
    PreconditionError,
)
from .inference import BaselineMode, EvalResult, Evaluator, dump_json
from .llm_gateway import CompletionRequest, LLMGateway
from .metrics import failure_threshold
from .prompts import FailedCase, SourceCase, render_edit_prompt, render_feedback_prompt
from .store import (
    Decision,
    ScoreRecord,
    TemplateStore,
    ThoughtTemplate,
    apply_decision,
    snapshot,
    snapshot_path,
    store_digest,
    template_sort_key,
)
from .usage import UsageRecord, write_usage_log

logger = logging.getLogger(__name__)

DECISION_TOKEN = re.compile(r'\*\*(FIX|DISCARD|ADD|KEEP)\*\*')

DECISION_REPROMPT = (
    "\n\nYour previous output did not end with exactly one of **FIX**, **DISCARD**, **ADD** or **KEEP** "
    "on its final line."
)

MAX_FAILED_CASES = 3


class Aggregation(str, Enum):
    MEAN = 'mean'
    SUM = 'sum'


# --- оценка и отбор ---

def score_templates(usage_records: Sequence[UsageRecord], store: TemplateStore) -> List[ScoreRecord]:
    """Оценка только по запросам, где шаблон действительно использовался; порядок как в store"""
    counts = {template_id: 0 for template_id in store.template_ids}
    sums = {template_id: 0.0 for template_id in store.template_ids}
    for record in usage_records:
        for template_id in record.used_template_ids:
            if template_id in counts:
                counts[template_id] += 1
                sums[template_id] += record.metric_value
    return [ScoreRecord(template_id, counts[template_id], sums[template_id]) for template_id in store.template_ids]


def select_low_performers(score_table: Sequence[ScoreRecord], tau: float, min_usage: Optional[int] = None,
                          aggregation=Aggregation.MEAN) -> List[str]:
    if not math.isfinite(tau):
        raise PreconditionError(f"tau must be finite, got {tau}")
    min_usage = settings.ENGINE_MIN_USAGE if min_usage is None else min_usage
    aggregation = Aggregation(aggregation)

    selected = []
    for record in score_table:
        if record.usage_count == 0 or record.usage_count < min_usage:
            continue
        value = record.score_mean if aggregation == Aggregation.MEAN else record.score_sum
        if value < tau:
            selected.append(record.template_id)
    return selected


def failed_records_for(template_id: str, usage_records: Sequence[UsageRecord], metric: str,
                       limit: int = MAX_FAILED_CASES) -> List[UsageRecord]:
    """Худшие провалы шаблона: метрика ниже порога (для F1 0.5, иначе 1.0), затем < 1.0"""
    used = [record for record in usage_records if template_id in record.used_template_ids]
    failed = [record for record in used if record.metric_value < failure_threshold(metric)]
    if not failed:
        failed = [record for record in used if record.metric_value < 1.0]
    failed.sort(key=lambda record: (record.metric_value, record.query_id))
    return failed[:limit]


# --- отчеты ---

@dataclass
class RefinementOutcome:
    template_id: str
    decision: Decision
    revised: Optional[ThoughtTemplate] = None
    feedback_text: str = ''
    skipped: Optional[str] = None


@dataclass
class IterationReport:
    iteration: int
    decision_counts: Dict[str, int]
    score_table: List[ScoreRecord]
    aggregate_metric: float
    refined_template_ids: List[str]
    tau: float = 0.0
    aggregation: str = Aggregation.MEAN.value
    validation_metric: Optional[float] = None
    skipped: List[Dict[str, str]] = field(default_factory=list)
    decisions: List[Dict[str, Any]] = field(default_factory=list)
    discarded_scores: List[ScoreRecord] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iteration': self.iteration,
            'decision_counts': dict(self.decision_counts),
            'aggregate_metric': self.aggregate_metric,
            'validation_metric': self.validation_metric,
            'tau': self.tau,
            'aggregation': self.aggregation,
            'refined_template_ids': list(self.refined_template_ids),
            'decisions': list(self.decisions),
            'skipped': list(self.skipped),
            'score_table': [record.to_dict() for record in self.score_table],
            'discarded_scores': [record.to_dict() for record in self.discarded_scores],
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'IterationReport':
        return cls(
            iteration=payload['iteration'],
            decision_counts=dict(payload['decision_counts']),
            score_table=[ScoreRecord.from_dict(r) for r in payload.get('score_table', [])],
            aggregate_metric=payload['aggregate_metric'],
            refined_template_ids=list(payload.get('refined_template_ids', [])),
            tau=payload.get('tau', 0.0),
            aggregation=payload.get('aggregation', Aggregation.MEAN.value),
            validation_metric=payload.get('validation_metric'),
            skipped=list(payload.get('skipped', [])),
            decisions=list(payload.get('decisions', [])),
            discarded_scores=[ScoreRecord.from_dict(r) for r in payload.get('discarded_scores', [])],
        )


def empty_decision_counts() -> Dict[str, int]:
    return {decision.value: 0 for decision in (Decision.KEEP, Decision.ADD, Decision.FIX, Decision.DISCARD)}


def report_path(directory, iteration: int) -> Path:
    return Path(directory) / f"report.iter{iteration}.json"


def usage_log_path(directory, iteration: int) -> Path:
    return Path(directory) / f"usage.iter{iteration}.jsonl"


@dataclass
class OptimizerConfig:
    answerer: str
    feedback: str
    updater: str
    tau: float = 0.5
    min_usage: int = 2
    aggregation: str = Aggregation.MEAN.value
    k: Optional[int] = None
    max_reprompts: int = 2


@dataclass
class OptimizationResult:
    final_store: TemplateStore
    reports: List[IterationReport]
    best_iteration: int
    baseline_validation: float
    stopped_early: bool = False


@dataclass
class TauSelection:
    tau: float
    validation_scores: Dict[float, float]


class TemplateOptimizer:
    """Цикл обновления шаблонов"""

    def __init__(self, gateway: LLMGateway, evaluator: Evaluator, config: OptimizerConfig):
        self.gateway = gateway
        self.evaluator = evaluator
        self.config = config

        self.stats = {
            'iterations': 0,
            'refinements': 0,
            'decision_fallbacks': 0,
            'revision_downgrades': 0,
        }
        self._lock = threading.Lock()

    def _count(self, key: str, delta: int = 1):
        # refine-воркеры обновляют счетчики параллельно
        with self._lock:
            self.stats[key] += delta

    # --- решение по шаблону ---

    @staticmethod
    def parse_decision(feedback_text: str) -> Optional[Decision]:
        """Ровно одно из **FIX**/**DISCARD**/**ADD**/**KEEP** на последней непустой строке"""
        lines = [line.strip() for line in (feedback_text or '').splitlines() if line.strip()]
        if not lines:
            return None
        final_line = lines[-1]
        found = set(DECISION_TOKEN.findall(final_line))
        if len(found) == 1:
            return Decision(found.pop())
        bare = final_line.strip('*` .').upper()
        if not found and bare in Decision.__members__:
            return Decision(bare)
        return None

    def _request_feedback(self, prompt: str) -> Tuple[str, Optional[Decision]]:
        request = CompletionRequest.for_role('feedback', prompt, self.config.feedback)
        feedback_text = ''
        for attempt in range(self.config.max_reprompts + 1):
            feedback_text = self.gateway.complete(request)
            decision = self.parse_decision(feedback_text)
            if decision is not None:
                return feedback_text, decision
            request = request.with_prompt(prompt + DECISION_REPROMPT)
        return feedback_text, None

    def refine_template(self, template: ThoughtTemplate, failed_records: Sequence[UsageRecord],
                        source_triple: SourceCase, questions: Optional[Dict[str, str]] = None,
                        metric: str = 'f1') -> Tuple[Decision, Optional[ThoughtTemplate], str]:
        if not failed_records:
            raise PreconditionError(f"No failed cases for {template.template_id}")

        outcome = self._refine(template, failed_records, source_triple, questions or {}, metric)
        return outcome.decision, outcome.revised, outcome.feedback_text

    def _refine(self, template: ThoughtTemplate, failed_records: Sequence[UsageRecord],
                source_case: SourceCase, questions: Dict[str, str], metric: str) -> RefinementOutcome:
        cases = [
            FailedCase(
                query=questions.get(record.query_id, record.query_id),
                trace=record.raw_trace,
                gold_answers=record.gold_answers,
                prediction=record.prediction,
                metric_value=record.metric_value,
                metric=metric,
            )
            for record in failed_records
        ]
        self._count('refinements')

        feedback_text, decision = self._request_feedback(render_feedback_prompt(template, cases, source_case))
        if decision is None:
            self._count('decision_fallbacks')
            logger.warning(f"{template.template_id}: no decision on the final feedback line, keeping template")
            return RefinementOutcome(template.template_id, Decision.KEEP, None, feedback_text,
                                     skipped='unparseable decision')

        if decision not in (Decision.FIX, Decision.ADD):
            return RefinementOutcome(template.template_id, decision, None, feedback_text)

        edit_prompt = render_edit_prompt(template, cases, source_case, feedback_text)
        request = CompletionRequest.for_role('updater', edit_prompt, self.config.updater)
        try:
            payload = self.gateway.complete_json(request, 'sub_template', max_reprompts=self.config.max_reprompts)
        except PayloadParseError as e:
            self._count('revision_downgrades')
            logger.warning(f"{template.template_id}: {decision.value} downgraded to KEEP, revision unusable: {e}")
            return RefinementOutcome(template.template_id, Decision.KEEP, None, feedback_text,
                                     skipped=f"unparseable revision: {e}")

        revised = ThoughtTemplate.from_dict(payload, template_id=template.template_id)
        return RefinementOutcome(template.template_id, decision, revised, feedback_text)

    def source_case_for(self, store: TemplateStore, template_id: str,
                        failed_records: Sequence[UsageRecord], questions: Dict[str, str]) -> SourceCase:
        """Исходная тройка шаблона; для добавленных шаблонов ее заменяет худший провал"""
        query_id = store.metadata.get('source_queries', {}).get(template_id)
        source = store.metadata.get('source_cases', {}).get(query_id) if query_id else None
        if source:
            return SourceCase(
                problem=source['problem'],
                solution=tuple(source['solution']) if source.get('solution') else None,
                answer=source['answer'],
            )
        worst = failed_records[0]
        return SourceCase(
            problem=questions.get(worst.query_id, worst.query_id),
            solution=None,
            answer=', '.join(worst.gold_answers),
        )

    def _refine_selected(self, store: TemplateStore, template_id: str, records: Sequence[UsageRecord],
                         questions: Dict[str, str], metric: str) -> RefinementOutcome:
        failed = failed_records_for(template_id, records, metric)
        if not failed:
            return RefinementOutcome(template_id, Decision.KEEP, skipped='no failed cases')
        source_case = self.source_case_for(store, template_id, failed, questions)
        try:
            return self._refine(store.get(template_id), failed, source_case, questions, metric)
        except GatewayError as e:
            logger.warning(f"{template_id}: refinement failed on the backend, keeping template: {e}")
            return RefinementOutcome(template_id, Decision.KEEP, skipped=f"backend failure: {e}")

    # --- итерация ---

    def evaluate_training(self, store: TemplateStore, manifest: DatasetManifest) -> EvalResult:
        try:
            return self.evaluator.evaluate_dataset(manifest, store, BaselineMode.TOTAL, k=self.config.k)
        except EvaluationAbortedError as e:
            raise IterationAbortedError(
                f"Iteration on snapshot {store.iteration} aborted, snapshot kept: {e}"
            ) from e

    def run_iteration(self, store: TemplateStore, train_manifest: DatasetManifest,
                      training_result: Optional[EvalResult] = None,
                      tau: Optional[float] = None) -> Tuple[TemplateStore, IterationReport, List[UsageRecord]]:
        tau = self.config.tau if tau is None else tau
        result = training_result or self.evaluate_training(store, train_manifest)
        records = result.usage_records
        questions = {query.query_id: query.question for query in train_manifest.queries}

        score_table = score_templates(records, store)
        selected = select_low_performers(score_table, tau, self.config.min_usage, self.config.aggregation)

        parallelism = self.gateway.config_for(self.config.feedback).parallelism
        with ThreadPoolExecutor(max_workers=parallelism) as executor:
            outcomes = list(executor.map(
                lambda template_id: self._refine_selected(store, template_id, records, questions, train_manifest.metric),
                selected,
            ))

        updated = store.next_iteration()
        counts = empty_decision_counts()
        decisions = []
        skipped = []
        for outcome in sorted(outcomes, key=lambda o: template_sort_key(o.template_id)):
            before = set(updated.template_ids)
            updated = apply_decision(updated, outcome.template_id, outcome.decision, outcome.revised)
            counts[outcome.decision.value] += 1

            entry = {'template_id': outcome.template_id, 'decision': outcome.decision.value}
            if outcome.decision == Decision.ADD:
                entry['added_template_id'] = next(iter(set(updated.template_ids) - before))
            decisions.append(entry)
            if outcome.skipped:
                skipped.append({'template_id': outcome.template_id, 'reason': outcome.skipped})

        if selected:
            updated.metadata['updated_by'] = {'feedback': self.config.feedback, 'updater': self.config.updater}

        discarded = {entry['template_id'] for entry in decisions if entry['decision'] == Decision.DISCARD.value}
        report = IterationReport(
            iteration=updated.iteration,
            decision_counts=counts,
            score_table=score_table,
            aggregate_metric=result.aggregate,
            refined_template_ids=sorted(selected, key=template_sort_key),
            tau=tau,
            aggregation=Aggregation(self.config.aggregation).value,
            skipped=skipped,
            decisions=decisions,
            discarded_scores=[record for record in score_table if record.template_id in discarded],
        )

        self.stats['iterations'] += 1
        logger.info(
            f"Iteration {updated.iteration}: {len(selected)} templates refined "
            f"(KEEP {counts['KEEP']}, ADD {counts['ADD']}, FIX {counts['FIX']}, DISCARD {counts['DISCARD']}), "
            f"training {train_manifest.metric}={result.aggregate:.4f}, {len(updated)} templates"
        )
        return updated, report, records

    def validation_score(self, store: TemplateStore, manifest: DatasetManifest) -> float:
        return self.evaluate_training(store, manifest).aggregate

    @staticmethod
    def same_queries(first: DatasetManifest, second: DatasetManifest) -> bool:
        if first is second:
            return True
        return (first.path, first.query_ids, first.metric, first.corpus_path) == \
            (second.path, second.query_ids, second.metric, second.corpus_path)

    def run_optimization(self, store: TemplateStore, train_manifest: DatasetManifest,
                         validation_manifest: Optional[DatasetManifest] = None,
                         max_iterations: Optional[int] = None, early_stop: bool = False,
                         epsilon: Optional[float] = None, out_dir=None) -> OptimizationResult:
        max_iterations = settings.ENGINE_MAX_ITERATIONS if max_iterations is None else max_iterations
        epsilon = settings.ENGINE_EARLY_STOP_EPSILON if epsilon is None else epsilon
        if max_iterations < 1:
            raise PreconditionError(f"max_iterations must be at least 1, got {max_iterations}")

        validation_manifest = validation_manifest or train_manifest
        shared = self.same_queries(train_manifest, validation_manifest)
        validation = self.evaluate_training(store, validation_manifest)
        baseline = validation.aggregate
        # (digest снимка, результат): валидация снимка служит его обучающей оценкой
        carried = (store_digest(store), validation) if shared else None
        if out_dir is not None:
            snapshot(store, snapshot_path(out_dir, store.iteration))

        best_store, best_score = store, baseline
        current = store
        reports: List[IterationReport] = []
        stopped_early = False

        for _ in range(max_iterations):
            training = carried[1] if carried and carried[0] == store_digest(current) else None
            updated, report, records = self.run_iteration(current, train_manifest, training_result=training)
            validation = self.evaluate_training(updated, validation_manifest)
            report.validation_metric = validation.aggregate
            carried = (store_digest(updated), validation) if shared else None
            reports.append(report)

            if out_dir is not None:
                write_usage_log(records, usage_log_path(out_dir, current.iteration))
                snapshot(updated, snapshot_path(out_dir, updated.iteration))
                report_path(out_dir, updated.iteration).write_text(dump_json(report.to_dict()), encoding='utf-8')

            improved = report.validation_metric > best_score + epsilon
            if report.validation_metric > best_score:
                best_store, best_score = updated, report.validation_metric
            current = updated

            if early_stop and not improved:
                stopped_early = True
                logger.info(
                    f"Early stop after iteration {updated.iteration}: validation {report.validation_metric:.4f}, "
                    f"best {best_score:.4f} at iteration {best_store.iteration}"
                )
                break

        final_store = best_store if early_stop else current
        return OptimizationResult(
            final_store=final_store,
            reports=reports,
            best_iteration=best_store.iteration,
            baseline_validation=baseline,
            stopped_early=stopped_early,
        )

    def select_tau(self, store: TemplateStore, train_manifest: DatasetManifest,
                   validation_manifest: DatasetManifest, grid: Optional[Sequence[float]] = None) -> TauSelection:
        """Перебор сетки tau по валидационной метрике после одной итерации; при равенстве меньший tau"""
        grid = sorted(set(settings.ENGINE_TAU_GRID if grid is None else grid))
        if not grid:
            raise PreconditionError("tau grid is empty")

        training = self.evaluate_training(store, train_manifest)
        scores: Dict[float, float] = {}
        for tau in grid:
            updated, _, _ = self.run_iteration(store, train_manifest, training_result=training, tau=tau)
            scores[tau] = self.validation_score(updated, validation_manifest)

        best_tau = max(grid, key=lambda tau: (scores[tau], -tau))
        logger.info(f"tau selected on validation: {best_tau} ({json.dumps({str(t): s for t, s in scores.items()})})")
        return TauSelection(tau=best_tau, validation_scores=scores)
