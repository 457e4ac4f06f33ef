from core.analytics import (
    cooccurrence_lift,
    export_histogram_csv,
    export_lift_csv,
    export_lift_json,
    export_texts,
    subset_by_score,
    usage_histogram,
)
from core.corpus import load_manifest
from core.exceptions import ConfigError
from core.management.engine_command import EngineCommand
from core.optimizer import score_templates
from core.store import load, snapshot
from core.usage import read_usage_log


class Command(EngineCommand):
    help = 'Гистограмма использования, lift совместного использования и подмножества шаблонов по оценке'

    required_settings = ('usage_log',)

    def add_engine_arguments(self, parser):
        parser.add_argument('--usage-log', help='usage.jsonl прогона или итерации')
        parser.add_argument('--snapshot', help='Снимок шаблонов для подмножества и экспорта текстов')
        parser.add_argument('--manifest', help='Манифест для экспорта текстов запросов')
        parser.add_argument('--percentile', type=int, choices=[25, 50, 75, 100], help='Доля шаблонов')
        parser.add_argument('--direction', choices=['bottom', 'top'], help='Худшие или лучшие по оценке')

    def overrides(self, options):
        return {
            'usage_log': options.get('usage_log'),
            'snapshot': options.get('snapshot'),
            'manifest': options.get('manifest'),
            'percentile': options.get('percentile'),
            'direction': options.get('direction'),
        }

    def run(self, config, options):
        records = read_usage_log(config.usage_log)
        out = config.out

        histogram = usage_histogram(records)
        export_histogram_csv(histogram, out / 'histogram.csv')
        self.stdout.write(f"📊 Использовано шаблонов: {len(histogram)}, запросов: {len(records)}")

        if records:
            matrix = cooccurrence_lift(records)
            export_lift_csv(matrix, out / 'lift.csv')
            export_lift_json(matrix, out / 'lift.json')
            top = matrix.pairs().sort_values(['lift', 'support'], ascending=False, kind='stable').head(5)
            for row in top.itertuples():
                self.stdout.write(f"  {row.tid_a} + {row.tid_b}: lift {row.lift:.2f}, support {row.support}")

        if config.percentile is not None and config.snapshot is None:
            raise ConfigError('--percentile needs --snapshot', key='snapshot')

        if config.snapshot is not None:
            store = load(config.snapshot)
            manifest = load_manifest(config.manifest) if config.manifest else None
            export_texts(store, manifest, out / 'texts.jsonl')

            if config.percentile is not None:
                subset = subset_by_score(store, score_templates(records, store), config.percentile, config.direction)
                path = snapshot(subset, out / f"store.{config.direction}{config.percentile}.json")
                self.stdout.write(f"✂️ Подмножество {config.direction} {config.percentile}%: {len(subset)} шаблонов → {path}")

        self.stdout.write(self.style.SUCCESS(f"✅ Аналитика записана в {out}"))
