import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from core.corpus import (
    Document,
    HeuristicTokenCounter,
    QueryItem,
    build_token_counter,
    estimate_tokens,
    format_context,
    format_document,
    ingest,
    load_manifest,
    pack,
    parse_document_header,
)
from core.exceptions import CorpusFormatError, DuplicateDocumentError, PackingError, PreconditionError

from .support import FIXTURES


class SizeTableCounter:
    """Размер документа берется из таблицы по doc_id из заголовка"""

    def __init__(self, sizes):
        self.sizes = sizes

    def count(self, text):
        _, doc_id = parse_document_header(text)
        return self.sizes[doc_id]


def sized_documents(sizes):
    documents = [Document(doc_id=f'd{index}', title=f'Doc {index}', body='text') for index in range(len(sizes))]
    counter = SizeTableCounter({doc.doc_id: size for doc, size in zip(documents, sizes)})
    return documents, counter


class IngestTests(SimpleTestCase):

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.addCleanup(self.directory.cleanup)

    def write(self, rows):
        path = Path(self.directory.name) / 'corpus.jsonl'
        path.write_text('\n'.join(json.dumps(row) for row in rows) + '\n', encoding='utf-8')
        return path

    def test_file_order_preserved(self):
        documents = ingest(FIXTURES / 'corpus.jsonl')
        self.assertEqual([doc.doc_id for doc in documents], ['d1', 'd2', 'd3', 'd4', 'd5', 'd6'])
        self.assertEqual(documents[1].title, 'Crucifixion (Titian)')

    def test_duplicate_doc_id(self):
        path = self.write([
            {'doc_id': 'd1', 'title': 'Titian', 'body': 'painter'},
            {'doc_id': 'd1', 'title': 'Titian again', 'body': 'painter'},
        ])
        with self.assertRaises(DuplicateDocumentError) as ctx:
            ingest(path)
        self.assertEqual(ctx.exception.doc_id, 'd1')

    def test_missing_body(self):
        path = self.write([{'doc_id': 'd1', 'title': 'Titian'}])
        with self.assertRaises(CorpusFormatError):
            ingest(path)

    def test_integer_ids_become_strings(self):
        documents = ingest(self.write([{'doc_id': 7, 'title': 'Tucson', 'body': 'city'}]))
        self.assertEqual(documents[0].doc_id, '7')


class EstimateTokensTests(SimpleTestCase):

    def test_empty_text(self):
        self.assertEqual(estimate_tokens(''), 0)

    def test_bytes_over_four(self):
        self.assertEqual(estimate_tokens('a' * 400), 100)
        self.assertEqual(HeuristicTokenCounter().count('a' * 401), 101)

    def test_counts_utf8_bytes(self):
        self.assertEqual(estimate_tokens('é' * 4), 2)

    def test_heuristic_without_tokenizer(self):
        self.assertIsNone(build_token_counter(''))


class PackTests(SimpleTestCase):

    def test_third_document_does_not_fit(self):
        documents, counter = sized_documents([50_000, 50_000, 50_000])
        packed = pack(documents, 128_000, counter)
        self.assertEqual(packed.doc_ids, ['d0', 'd1'])
        self.assertEqual(packed.estimated_tokens, 100_000)

    def test_first_document_over_budget(self):
        documents, counter = sized_documents([200, 10])
        with self.assertRaises(PackingError):
            pack(documents, 100, counter)

    def test_budget_must_be_positive(self):
        documents, counter = sized_documents([1])
        with self.assertRaises(PreconditionError):
            pack(documents, 0, counter)

    def test_empty_corpus(self):
        self.assertEqual(pack([], 10).documents, ())

    def test_later_small_document_is_not_used(self):
        documents, counter = sized_documents([60, 60, 5])
        self.assertEqual(pack(documents, 100, counter).doc_ids, ['d0'])

    @hypothesis_settings(max_examples=1_000, deadline=None)
    @given(st.lists(st.integers(min_value=1, max_value=500), min_size=1, max_size=30), st.integers(1, 3000))
    def test_maximal_prefix(self, sizes, budget):
        documents, counter = sized_documents(sizes)
        if sizes[0] > budget:
            with self.assertRaises(PackingError):
                pack(documents, budget, counter)
            return

        packed = pack(documents, budget, counter)
        count = len(packed.documents)
        self.assertEqual(list(packed.documents), documents[:count])
        self.assertLessEqual(sum(sizes[:count]), budget)
        self.assertEqual(packed.estimated_tokens, sum(sizes[:count]))
        if count < len(sizes):
            self.assertGreater(sum(sizes[:count + 1]), budget)


class DocumentFormatTests(SimpleTestCase):

    def test_layout(self):
        doc = Document('d1', 'Titian', 'Titian was a Venetian painter.')
        self.assertEqual(format_document(doc), 'TITLE: Titian | ID: d1\nTitian was a Venetian painter.')

    def test_header_round_trip(self):
        doc = Document('d2', 'Crucifixion (Titian)', 'oil painting')
        self.assertEqual(parse_document_header(format_document(doc)), ('Crucifixion (Titian)', 'd2'))

    def test_context_separator(self):
        documents, _ = sized_documents([1, 1])
        text = format_context(pack(documents, 1_000))
        self.assertEqual(text, 'TITLE: Doc 0 | ID: d0\ntext\n\nTITLE: Doc 1 | ID: d1\ntext')

    def test_header_required(self):
        with self.assertRaises(CorpusFormatError):
            parse_document_header('Titian was a painter')


class ManifestTests(SimpleTestCase):

    def test_load(self):
        manifest = load_manifest(FIXTURES / 'train_manifest.json')
        self.assertEqual(manifest.query_ids, ['q1', 'q2', 'q3', 'q4'])
        self.assertEqual(manifest.metric, 'f1')
        self.assertEqual(manifest.corpus_path, FIXTURES / 'corpus.jsonl')
        self.assertEqual(manifest.queries[1].gold_doc_ids, ('d2', 'd1', 'd3'))
        self.assertEqual(len(manifest.documents()), 6)
        self.assertIs(manifest.retrieval_documents(), manifest.documents())

    def test_allowlist_keeps_corpus_order(self):
        manifest = load_manifest(FIXTURES / 'train_manifest.json')
        query = QueryItem('q9', 'Where did Titian die?', ('Venice',), doc_allowlist=('d3', 'd1'))
        self.assertEqual([doc.doc_id for doc in manifest.documents_for(query)], ['d1', 'd3'])

    def test_unknown_metric(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / 'manifest.json'
            path.write_text(json.dumps({'corpus_path': 'c.jsonl', 'metric': 'bleu', 'queries': []}), encoding='utf-8')
            with self.assertRaises(CorpusFormatError):
                load_manifest(path)
