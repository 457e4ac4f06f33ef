from core.construction import TemplateConstructor, load_triples, sample_triples
from core.corpus import load_manifest
from core.management.engine_command import EngineCommand
from core.store import snapshot, snapshot_path


class Command(EngineCommand):
    help = 'Построение начального набора шаблонов (store.iter0.json) из обучающих троек'

    required_settings = ('train_triples',)

    def add_engine_arguments(self, parser):
        parser.add_argument('--triples', help='JSONL с обучающими тройками')
        parser.add_argument('--manifest', help='Тестовый манифест для проверки пересечений')
        parser.add_argument('--num-triples', type=int, help='Сколько троек выбрать')
        parser.add_argument(
            '--oracle',
            action='store_true',
            default=None,
            help='Шаблоны из тестовых запросов (диагностический режим, снимок помечается oracle)',
        )
        parser.add_argument(
            '--holistic',
            action='store_true',
            help='Хранить целостный шаблон вместо подшаблонов',
        )

    def overrides(self, options):
        return {
            'train_triples': options.get('triples'),
            'test_manifest': options.get('manifest'),
            'num_triples': options.get('num_triples'),
            'oracle': options.get('oracle'),
            'compositional': False if options.get('holistic') else None,
        }

    def run(self, config, options):
        triples = sample_triples(load_triples(config.train_triples), config.num_triples, config.seed)

        test_manifest_path = config.test_manifest or config.manifest
        test_ids = load_manifest(test_manifest_path).query_ids if test_manifest_path else []

        gateway = config.build_gateway()
        constructor = TemplateConstructor(gateway, config.role_backend('constructor'), config.compositional)
        store = constructor.build_initial_set(triples, test_ids, oracle=config.oracle)
        store.metadata['seed'] = config.seed

        path = snapshot(store, snapshot_path(config.out, 0))

        self.stdout.write(self.style.SUCCESS(
            f"✅ {len(store)} шаблонов из {len(triples)} троек записаны в {path}"
        ))
        if constructor.stats['skips']:
            self.stdout.write(self.style.WARNING(f"⚠️ Пропусков при построении: {constructor.stats['skips']}"))
        if config.oracle:
            self.stdout.write(self.style.WARNING('⚠️ Снимок помечен oracle: только для диагностики'))
