import json
import random
import tempfile
from pathlib import Path
from unittest import mock

from django.test import SimpleTestCase

from core.exceptions import IterationAbortedError, PreconditionError
from core.inference import EvalResult, Evaluator
from core.optimizer import (
    IterationReport,
    OptimizerConfig,
    TemplateOptimizer,
    failed_records_for,
    report_path,
    score_templates,
    select_low_performers,
    usage_log_path,
)
from core.prompts import SourceCase
from core.store import Decision, ScoreRecord, load, snapshot_path
from core.usage import build_usage_record

from .support import REVISED_TEMPLATE, make_manifest, make_store, make_template, mock_gateway, rule, template_payload, trace

Q1 = ('q1', 'Where did the painter of Crucifixion die?', ['Venice'])
Q4 = ('q4', 'Which river reaches Lake Michigan at Green Bay?', ['Fox River'])

SOURCE = SourceCase('In what city did Lloyd Lonergan die?', None, 'New York')


def usage(query_id, value, *template_ids, prediction='Ancona', gold=('Venice',)):
    return build_usage_record(query_id, trace(prediction, *template_ids), prediction, gold, value)


def optimizer_for(rules, default=None, **config):
    gateway = mock_gateway(rules=rules, default=default)
    options = {'answerer': 'mock', 'feedback': 'mock', 'updater': 'mock', **config}
    return TemplateOptimizer(gateway, Evaluator(gateway, 'mock'), OptimizerConfig(**options))


class ScoreTemplatesTests(SimpleTestCase):

    def test_matches_brute_force(self):
        rng = random.Random(2)
        store = make_store(8)
        records = []
        for number in range(60):
            used = rng.sample(store.template_ids + ['TID_40'], rng.randint(0, 4))
            records.append(usage(f'q{number}', rng.choice([0.0, 0.25, 0.5, 1.0]), *used))

        table = score_templates(records, store)
        self.assertEqual([r.template_id for r in table], store.template_ids)
        for record in table:
            values = [u.metric_value for u in records if record.template_id in u.used_template_ids]
            self.assertEqual(record.usage_count, len(values))
            self.assertAlmostEqual(record.score_sum, sum(values))

    def test_unused_template_has_no_mean(self):
        table = score_templates([usage('q1', 1.0, 'TID_1')], make_store(2))
        self.assertIsNone(table[1].score_mean)


class SelectLowPerformersTests(SimpleTestCase):

    def setUp(self):
        self.table = [
            ScoreRecord('TID_1', 3, 0.6),
            ScoreRecord('TID_2', 1, 0.0),
            ScoreRecord('TID_3', 0, 0.0),
            ScoreRecord('TID_4', 4, 3.2),
            ScoreRecord('TID_5', 2, 1.0),
        ]

    def test_mean_below_tau(self):
        self.assertEqual(select_low_performers(self.table, 0.5, min_usage=2), ['TID_1'])

    def test_strictly_below(self):
        self.assertNotIn('TID_5', select_low_performers(self.table, 0.5, min_usage=2))
        self.assertIn('TID_5', select_low_performers(self.table, 0.51, min_usage=2))

    def test_unused_never_selected(self):
        self.assertEqual(select_low_performers(self.table, 0.5, min_usage=0), ['TID_1', 'TID_2'])

    def test_sum_aggregation(self):
        self.assertEqual(select_low_performers(self.table, 1.1, min_usage=2, aggregation='sum'), ['TID_1', 'TID_5'])

    def test_tau_must_be_finite(self):
        with self.assertRaises(PreconditionError):
            select_low_performers(self.table, float('nan'))


class FailedRecordsTests(SimpleTestCase):

    def test_worst_below_threshold_first(self):
        records = [usage('q1', 0.4, 'TID_1'), usage('q2', 0.0, 'TID_1'), usage('q3', 0.6, 'TID_1'), usage('q4', 0.0, 'TID_2')]
        self.assertEqual([r.query_id for r in failed_records_for('TID_1', records, 'f1')], ['q2', 'q1'])

    def test_imperfect_cases_when_none_fail(self):
        records = [usage('q1', 0.6, 'TID_1'), usage('q2', 1.0, 'TID_1')]
        self.assertEqual([r.query_id for r in failed_records_for('TID_1', records, 'f1')], ['q1'])

    def test_limit(self):
        records = [usage(f'q{n}', 0.0, 'TID_1') for n in range(5)]
        self.assertEqual(len(failed_records_for('TID_1', records, 'em')), 3)


class ParseDecisionTests(SimpleTestCase):

    def test_final_line_token(self):
        self.assertEqual(TemplateOptimizer.parse_decision('- stops early\n**FIX**'), Decision.FIX)
        self.assertEqual(TemplateOptimizer.parse_decision('analysis\n**DISCARD**\n\n'), Decision.DISCARD)

    def test_bare_word(self):
        self.assertEqual(TemplateOptimizer.parse_decision('analysis\nKEEP'), Decision.KEEP)

    def test_ambiguous_or_missing(self):
        self.assertIsNone(TemplateOptimizer.parse_decision('**FIX** or **KEEP**'))
        self.assertIsNone(TemplateOptimizer.parse_decision('**ADD**\nthat is my answer'))
        self.assertIsNone(TemplateOptimizer.parse_decision(''))


class RefineTemplateTests(SimpleTestCase):

    def setUp(self):
        self.failed = [usage('q1', 0.0, 'TID_58')]

    def test_fix_returns_revision_with_same_id(self):
        optimizer = optimizer_for([
            rule(response='- resolve the city\n**FIX**', role='feedback'),
            rule(response=json.dumps(REVISED_TEMPLATE), role='updater'),
        ])
        decision, revised, text = optimizer.refine_template(make_template(), self.failed, SOURCE)
        self.assertEqual(decision, Decision.FIX)
        self.assertEqual(revised.template_id, 'TID_58')
        self.assertEqual(revised.template_name, 'Biographical Location Lookup (Revised)')
        self.assertTrue(text.endswith('**FIX**'))

    def test_discard_has_no_revision(self):
        optimizer = optimizer_for([rule(response='**DISCARD**', role='feedback')])
        decision, revised, _ = optimizer.refine_template(make_template(), self.failed, SOURCE)
        self.assertEqual((decision, revised), (Decision.DISCARD, None))

    def test_unparseable_decision_keeps(self):
        optimizer = optimizer_for([rule(response='I am not sure.', role='feedback')])
        decision, revised, _ = optimizer.refine_template(make_template(), self.failed, SOURCE)
        self.assertEqual((decision, revised), (Decision.KEEP, None))
        self.assertEqual(optimizer.stats['decision_fallbacks'], 1)

    def test_unusable_revision_downgrades_to_keep(self):
        optimizer = optimizer_for([
            rule(response='**ADD**', role='feedback'),
            rule(response='Sorry, no JSON today.', role='updater'),
        ])
        decision, revised, _ = optimizer.refine_template(make_template(), self.failed, SOURCE)
        self.assertEqual((decision, revised), (Decision.KEEP, None))
        self.assertEqual(optimizer.stats['revision_downgrades'], 1)

    def test_needs_failed_cases(self):
        with self.assertRaises(PreconditionError):
            optimizer_for([]).refine_template(make_template(), [], SOURCE)


class RunIterationTests(SimpleTestCase):

    def test_fourteen_selected_six_untouched(self):
        store = make_store(20)
        records = []
        for number in range(1, 21):
            value = 0.0 if number <= 14 else 1.0
            records += [usage(f'q{number}a', value, f'TID_{number}'), usage(f'q{number}b', value, f'TID_{number}')]

        rules = [
            rule(f'"template_id": "TID_{number}"', response='- revise\n**FIX**' if number <= 10 else '**KEEP**',
                 role='feedback')
            for number in range(1, 15)
        ]
        rules.append(rule(response=json.dumps(REVISED_TEMPLATE), role='updater'))
        optimizer = optimizer_for(rules)

        training = EvalResult(rows=[], aggregate=0.3, metadata={}, usage_records=records)
        updated, report, _ = optimizer.run_iteration(store, make_manifest([Q1]), training_result=training)

        self.assertEqual(report.decision_counts, {'KEEP': 4, 'ADD': 0, 'FIX': 10, 'DISCARD': 0})
        self.assertEqual(report.refined_template_ids, [f'TID_{n}' for n in range(1, 15)])
        self.assertEqual(report.iteration, 1)
        self.assertEqual(len(updated), 20)
        for number in range(1, 11):
            self.assertEqual(updated.provenance[f'TID_{number}'], f'fixed-from:TID_{number}')
        for number in range(11, 21):
            template_id = f'TID_{number}'
            self.assertEqual(json.dumps(updated.get(template_id).to_dict()), json.dumps(store.get(template_id).to_dict()))
        self.assertEqual(updated.metadata['updated_by'], {'feedback': 'mock', 'updater': 'mock'})

    def test_add_gets_fresh_id(self):
        store = make_store(2)
        records = [usage('q1', 0.0, 'TID_1'), usage('q2', 0.0, 'TID_1')]
        optimizer = optimizer_for([
            rule(response='**ADD**', role='feedback'),
            rule(response=json.dumps(template_payload('Cross-check Step')), role='updater'),
        ])
        training = EvalResult(rows=[], aggregate=0.0, metadata={}, usage_records=records)
        updated, report, _ = optimizer.run_iteration(store, make_manifest([Q1]), training_result=training)

        self.assertEqual(updated.template_ids, ['TID_1', 'TID_2', 'TID_3'])
        self.assertEqual(updated.provenance['TID_3'], 'added-from:TID_1')
        self.assertEqual(report.decisions, [{'template_id': 'TID_1', 'decision': 'ADD', 'added_template_id': 'TID_3'}])

    def test_discard_keeps_score_in_report(self):
        records = [usage('q1', 0.0, 'TID_2'), usage('q2', 0.0, 'TID_2')]
        optimizer = optimizer_for([rule(response='**DISCARD**', role='feedback')])
        training = EvalResult(rows=[], aggregate=0.0, metadata={}, usage_records=records)
        updated, report, _ = optimizer.run_iteration(make_store(2), make_manifest([Q1]), training_result=training)

        self.assertEqual(updated.template_ids, ['TID_1'])
        self.assertEqual(report.discarded_scores, [ScoreRecord('TID_2', 2, 0.0)])

    def test_counters_with_parallel_refinement(self):
        records = []
        for number in range(1, 41):
            records += [usage(f'q{number}a', 0.0, f'TID_{number}'), usage(f'q{number}b', 0.0, f'TID_{number}')]
        gateway = mock_gateway(rules=[rule(response='the template looks fine', role='feedback')], parallelism=8)
        optimizer = TemplateOptimizer(
            gateway, Evaluator(gateway, 'mock'), OptimizerConfig(answerer='mock', feedback='mock', updater='mock'),
        )
        training = EvalResult(rows=[], aggregate=0.0, metadata={}, usage_records=records)
        _, report, _ = optimizer.run_iteration(make_store(40), make_manifest([Q1]), training_result=training)

        self.assertEqual(report.decision_counts['KEEP'], 40)
        self.assertEqual(optimizer.stats['refinements'], 40)
        self.assertEqual(optimizer.stats['decision_fallbacks'], 40)

    def test_aborted_evaluation(self):
        with self.assertRaises(IterationAbortedError):
            optimizer_for([]).run_iteration(make_store(2), make_manifest([Q1, Q4]))


class ConvergenceTests(SimpleTestCase):
    """Ревизия TID_2 помечена REPAIRED, и после нее ответчик отвечает верно"""

    def setUp(self):
        self.rules = [
            rule(Q4[1], 'REPAIRED', response=trace('Fox River', 'TID_2'), role='answerer'),
            rule(Q4[1], response=trace('Lake Michigan', 'TID_2'), role='answerer'),
            rule(Q1[1], response=trace('Venice', 'TID_1'), role='answerer'),
            rule(response='- the river step is missing\n**FIX**', role='feedback'),
            rule(response=json.dumps(template_payload('Strategy 2 REPAIRED')), role='updater'),
        ]
        self.manifest = make_manifest([Q1, Q4])

    def test_iterations_improve_then_plateau(self):
        optimizer = optimizer_for(self.rules, min_usage=1)
        result = optimizer.run_optimization(make_store(2), self.manifest, max_iterations=2)

        self.assertEqual(result.baseline_validation, 0.5)
        self.assertEqual([r.aggregate_metric for r in result.reports], [0.5, 1.0])
        self.assertEqual([r.validation_metric for r in result.reports], [1.0, 1.0])
        self.assertEqual(result.reports[0].decision_counts['FIX'], 1)
        self.assertEqual(result.reports[1].refined_template_ids, [])
        self.assertEqual(result.final_store.iteration, 2)
        self.assertFalse(result.stopped_early)

    def test_early_stop_returns_best_snapshot(self):
        optimizer = optimizer_for(self.rules, min_usage=1)
        result = optimizer.run_optimization(make_store(2), self.manifest, max_iterations=3, early_stop=True)

        self.assertTrue(result.stopped_early)
        self.assertEqual(len(result.reports), 2)
        self.assertEqual(result.best_iteration, 1)
        self.assertEqual(result.final_store.iteration, 1)
        self.assertEqual(result.final_store.get('TID_2').template_name, 'Strategy 2 REPAIRED')

    def test_validation_run_reused_for_next_training(self):
        optimizer = optimizer_for(self.rules, min_usage=1)
        evaluate = optimizer.evaluator.evaluate_dataset
        with mock.patch.object(optimizer.evaluator, 'evaluate_dataset', wraps=evaluate) as spy:
            result = optimizer.run_optimization(make_store(2), self.manifest, max_iterations=2)

        self.assertEqual(spy.call_count, 3)
        self.assertEqual([r.aggregate_metric for r in result.reports], [0.5, 1.0])

    def test_separate_validation_manifest_is_evaluated_apart(self):
        optimizer = optimizer_for(self.rules, min_usage=1)
        evaluate = optimizer.evaluator.evaluate_dataset
        with mock.patch.object(optimizer.evaluator, 'evaluate_dataset', wraps=evaluate) as spy:
            result = optimizer.run_optimization(make_store(2), self.manifest, make_manifest([Q4]), max_iterations=2)

        self.assertEqual(spy.call_count, 5)
        self.assertEqual([r.validation_metric for r in result.reports], [1.0, 1.0])

    def test_select_tau_prefers_smaller_on_ties(self):
        optimizer = optimizer_for(self.rules, min_usage=1)
        selection = optimizer.select_tau(make_store(2), self.manifest, self.manifest, grid=[0.7, 0.3, 0.5, 0.4, 0.6])
        self.assertEqual(selection.tau, 0.3)
        self.assertEqual(set(selection.validation_scores.values()), {1.0})

    def test_files_written(self):
        optimizer = optimizer_for(self.rules, min_usage=1)
        with tempfile.TemporaryDirectory() as directory:
            out = Path(directory)
            optimizer.run_optimization(make_store(2), self.manifest, max_iterations=2, out_dir=out)

            for iteration in (0, 1, 2):
                self.assertEqual(load(snapshot_path(out, iteration)).iteration, iteration)
            self.assertTrue(usage_log_path(out, 0).exists())
            self.assertTrue(usage_log_path(out, 1).exists())
            report = IterationReport.from_dict(json.loads(report_path(out, 1).read_text(encoding='utf-8')))
            self.assertEqual(report.decision_counts['FIX'], 1)
            self.assertEqual(report.score_table[1], ScoreRecord('TID_2', 1, 0.0))
