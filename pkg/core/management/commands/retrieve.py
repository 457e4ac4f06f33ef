import pandas as pd

from core.corpus import load_manifest
from core.exceptions import PreconditionError
from core.management.engine_command import EngineCommand, parse_int_list
from core.retrieval import RetrievalIndex, recall_sweep


class Command(EngineCommand):
    help = 'Recall@k поиска BM25 для списка k (recall.csv)'

    required_settings = ('manifest',)

    def add_engine_arguments(self, parser):
        parser.add_argument('--manifest', help='Манифест с gold_doc_ids у запросов')
        parser.add_argument('--k', help='Список k через запятую, например 1,3,5,10')

    def overrides(self, options):
        return {
            'manifest': options.get('manifest'),
            'k_list': parse_int_list(options.get('k')),
        }

    def run(self, config, options):
        manifest = load_manifest(config.manifest)
        judged = [(query.question, query.gold_doc_ids) for query in manifest.queries if query.gold_doc_ids]
        if not judged:
            raise PreconditionError(f"No query in {config.manifest} has gold_doc_ids")

        index = RetrievalIndex(manifest.retrieval_documents())
        rows = recall_sweep(index.index, judged, config.k_list)

        config.out.mkdir(parents=True, exist_ok=True)
        path = config.out / 'recall.csv'
        pd.DataFrame(rows, columns=['k', 'recall', 'queries']).to_csv(path, index=False, lineterminator='\n')

        self.table(('k', 'recall@k'), [(row['k'], f"{row['recall']:.4f}") for row in rows])
        self.stdout.write(self.style.SUCCESS(f"✅ {len(judged)} запросов, таблица в {path}"))
