from django.core.management.base import CommandError

from core.corpus import load_manifest
from core.exceptions import ConfigError
from core.inference import Evaluator, dump_json
from core.management.engine_command import EXIT_CONFIG, EngineCommand
from core.optimizer import OptimizerConfig, TemplateOptimizer
from core.store import load, snapshot_path


def parse_tau(value):
    if value is None or value == 'auto':
        return value
    try:
        return float(value)
    except ValueError:
        raise CommandError(f"--tau expects a number or 'auto', got {value!r}", returncode=EXIT_CONFIG)


class Command(EngineCommand):
    help = 'Итеративное обновление шаблонов (KEEP/FIX/ADD/DISCARD) с отчетом по итерациям'

    required_settings = ('manifest',)

    def add_engine_arguments(self, parser):
        parser.add_argument('--manifest', help='Манифест обучающих запросов')
        parser.add_argument('--validation-manifest', help='Манифест валидации (выбор tau и ранняя остановка)')
        parser.add_argument('--snapshot', help='Исходный снимок (по умолчанию <out>/store.iter0.json)')
        parser.add_argument('--tau', help="Порог оценки или 'auto' для подбора на валидации")
        parser.add_argument('--iterations', type=int, help='Максимум итераций')
        parser.add_argument('--early-stop', action='store_true', default=None, help='Остановка на плато валидации')
        parser.add_argument('--min-usage', type=int, help='Минимум использований для отбора')
        parser.add_argument('--aggregation', choices=['mean', 'sum'], help='Агрегирование оценки')
        parser.add_argument('--k', type=int, help='Документы через BM25 top-k вместо упаковки корпуса')

    def overrides(self, options):
        return {
            'manifest': options.get('manifest'),
            'validation_manifest': options.get('validation_manifest'),
            'snapshot': options.get('snapshot'),
            'tau': parse_tau(options.get('tau')),
            'max_iterations': options.get('iterations'),
            'early_stop': options.get('early_stop'),
            'min_usage': options.get('min_usage'),
            'aggregation': options.get('aggregation'),
            'k': options.get('k'),
        }

    def run(self, config, options):
        source = config.snapshot or snapshot_path(config.out, 0)
        if not source.exists():
            raise ConfigError(f"Snapshot not found: {source}", key='snapshot')
        store = load(source)

        train_manifest = load_manifest(config.manifest)
        validation_manifest = load_manifest(config.validation_manifest) if config.validation_manifest else None

        gateway = config.build_gateway()
        evaluator = Evaluator(
            gateway, config.role_backend('answerer'),
            token_budget=config.token_budget, token_counter=gateway.token_counter,
        )
        optimizer = TemplateOptimizer(gateway, evaluator, OptimizerConfig(
            answerer=config.role_backend('answerer'),
            feedback=config.role_backend('feedback'),
            updater=config.role_backend('updater'),
            tau=0.0 if config.tau == 'auto' else config.tau,
            min_usage=config.min_usage,
            aggregation=config.aggregation,
            k=config.k,
        ))

        tau_scores = None
        if config.tau == 'auto':
            if validation_manifest is None:
                raise ConfigError("tau 'auto' needs a validation manifest", key='validation_manifest')
            selection = optimizer.select_tau(store, train_manifest, validation_manifest, config.tau_grid)
            optimizer.config.tau = selection.tau
            tau_scores = {str(tau): score for tau, score in selection.validation_scores.items()}
            self.stdout.write(f"🎯 tau = {selection.tau} (подобран на валидации)")

        result = optimizer.run_optimization(
            store,
            train_manifest,
            validation_manifest,
            max_iterations=config.max_iterations,
            early_stop=config.early_stop,
            epsilon=config.epsilon,
            out_dir=config.out,
        )

        rows = [
            (
                report.iteration,
                report.decision_counts['KEEP'],
                report.decision_counts['ADD'],
                report.decision_counts['FIX'],
                report.decision_counts['DISCARD'],
                f"{report.aggregate_metric:.4f}",
                f"{report.validation_metric:.4f}",
            )
            for report in result.reports
        ]
        self.table(('Iter', 'KEEP', 'ADD', 'FIX', 'DISCARD', 'Train', 'Valid'), rows)

        summary = {
            'tau': optimizer.config.tau,
            'tau_validation_scores': tau_scores,
            'baseline_validation': result.baseline_validation,
            'best_iteration': result.best_iteration,
            'final_iteration': result.final_store.iteration,
            'final_snapshot': snapshot_path(config.out, result.final_store.iteration).name,
            'stopped_early': result.stopped_early,
            'iterations': [report.iteration for report in result.reports],
            'config': config.describe(),
        }
        config.out.mkdir(parents=True, exist_ok=True)
        (config.out / 'optimization.json').write_text(dump_json(summary), encoding='utf-8')

        self.stdout.write(self.style.SUCCESS(
            f"✅ Итог: снимок итерации {result.final_store.iteration} ({len(result.final_store)} шаблонов)"
        ))
