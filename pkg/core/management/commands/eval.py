from core.analytics import transfer_run_config
from core.corpus import load_manifest
from core.exceptions import ConfigError
from core.inference import BaselineMode, Evaluator, write_run
from core.management.engine_command import EngineCommand


class Command(EngineCommand):
    help = 'Оценка набора запросов в режиме naive/cot/cic/cic_cot/total, результат в runs/<run_id>/'

    required_settings = ('manifest',)

    def add_engine_arguments(self, parser):
        parser.add_argument('--manifest', help='Манифест оцениваемых запросов')
        parser.add_argument('--mode', choices=[mode.value for mode in BaselineMode], help='Режим промпта')
        parser.add_argument('--k', type=int, help='BM25 top-k вместо упаковки всего корпуса')
        parser.add_argument('--snapshot', help='Снимок шаблонов (режим total)')
        parser.add_argument('--answerer', help='Бэкенд модели-ответчика (перенос шаблонов)')
        parser.add_argument('--run-id', help='Имя каталога прогона')

    def overrides(self, options):
        return {
            'manifest': options.get('manifest'),
            'mode': options.get('mode'),
            'k': options.get('k'),
            'snapshot': options.get('snapshot'),
            'run_id': options.get('run_id'),
        }

    def run(self, config, options):
        mode = BaselineMode(config.mode)
        answerer = options.get('answerer') or config.role_backend('answerer')
        if answerer not in config.backends:
            raise ConfigError(f"Answerer backend {answerer} is not configured", key='answerer')
        manifest = load_manifest(config.manifest)

        store = None
        extra = {'run_id': config.resolved_run_id(), 'seed': config.seed}
        if mode.uses_templates:
            if config.snapshot is None:
                raise ConfigError('Mode total needs --snapshot', key='snapshot')
            transfer = transfer_run_config(config.snapshot, answerer, config.backends)
            store = transfer.store
            extra.update(transfer.metadata())
            if transfer.is_transfer:
                self.stdout.write(f"🔁 Перенос: шаблоны {transfer.template_source} → ответчик {answerer}")

        gateway = config.build_gateway()
        evaluator = Evaluator(gateway, answerer, token_budget=config.token_budget, token_counter=gateway.token_counter)
        result = evaluator.evaluate_dataset(manifest, store, mode, k=config.k, extra_metadata=extra)

        run_dir = write_run(result, config.out / config.resolved_run_id())
        self.stdout.write(self.style.SUCCESS(
            f"✅ {mode.value}: {manifest.metric} = {result.aggregate:.4f} "
            f"по {len(result.rows)} запросам, результаты в {run_dir}"
        ))
        if result.metadata['failed_queries']:
            self.stdout.write(self.style.WARNING(f"⚠️ Ошибок на запросах: {result.metadata['failed_queries']}"))
