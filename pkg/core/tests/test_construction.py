import json

from django.test import SimpleTestCase

from core.construction import TemplateConstructor, TrainingTriple, load_triples, sample_triples
from core.exceptions import ContaminationError, GatewayError, PreconditionError
from core.store import canonical_json

from .support import (
    FIXTURES,
    construction_response,
    mock_gateway,
    rule,
    scenario_gateway,
    template_payload,
)

THREE_TEMPLATES = [
    template_payload('Work-to-Creator Attribution'),
    template_payload('Biographical Location Lookup'),
    template_payload('Historical Event Specification'),
]


def triples(count):
    return [
        TrainingTriple(f'train-{index}', f'Training question number {index}?', None, f'answer {index}')
        for index in range(count)
    ]


def constructor_for(response, compositional=True):
    gateway = mock_gateway(rules=[rule(response=response, role='constructor')])
    return TemplateConstructor(gateway, 'mock', compositional=compositional)


class TriplesTests(SimpleTestCase):

    def test_load(self):
        loaded = load_triples(FIXTURES / 'triples.jsonl')
        self.assertEqual([t.query_id for t in loaded], ['train-1', 'train-2', 'train-3'])
        self.assertEqual(len(loaded[0].solution), 3)
        self.assertIsNone(loaded[2].solution)

    def test_sample_is_seeded_and_ordered(self):
        pool = triples(20)
        first = sample_triples(pool, 5, seed=3)
        self.assertEqual(first, sample_triples(pool, 5, seed=3))
        self.assertEqual(len(first), 5)
        positions = [pool.index(t) for t in first]
        self.assertEqual(positions, sorted(positions))

    def test_sample_larger_than_pool(self):
        self.assertEqual(sample_triples(triples(3), 50, seed=1), triples(3))

    def test_empty_answer_rejected(self):
        with self.assertRaises(PreconditionError):
            TrainingTriple('t', 'Who painted Crucifixion?', None, '')


class BuildInitialSetTests(SimpleTestCase):

    def test_fixture_triples(self):
        constructor = TemplateConstructor(scenario_gateway(), 'mock')
        store = constructor.build_initial_set(load_triples(FIXTURES / 'triples.jsonl'))

        self.assertEqual(store.template_ids, ['TID_1', 'TID_2', 'TID_3', 'TID_4', 'TID_5'])
        self.assertEqual(store.get('TID_4').template_name, 'Administrative Territory Identification')
        self.assertEqual(store.metadata['source_queries']['TID_3'], 'train-1')
        self.assertEqual(store.metadata['source_queries']['TID_5'], 'train-2')
        self.assertEqual(set(store.provenance.values()), {'constructed'})
        self.assertEqual(store.iteration, 0)
        self.assertEqual(constructor.stats['skips'], 1)
        self.assertEqual(store.metadata['construction_skips'][0]['query_id'], 'train-3')
        self.assertNotIn('train-3', store.metadata['source_cases'])

    def test_empty_sub_templates_is_a_skip(self):
        constructor = constructor_for(json.dumps({'sub_templates': []}))
        store = constructor.build_initial_set(triples(1))
        self.assertEqual(len(store), 0)
        self.assertEqual(store.metadata['construction_skips'][0]['reason'], 'no sub_templates in output')

    def test_invalid_entries_skipped_individually(self):
        broken = template_payload('Broken')
        del broken['reason_flow']
        constructor = constructor_for(construction_response([broken, template_payload('Ordinal City Ranking')]))
        store = constructor.build_initial_set(triples(1))

        self.assertEqual(store.template_ids, ['TID_1'])
        self.assertEqual(store.get('TID_1').template_name, 'Ordinal City Ranking')
        self.assertIn('sub_templates[0]', store.metadata['construction_skips'][0]['reason'])

    def test_holistic_mode(self):
        constructor = TemplateConstructor(scenario_gateway(), 'mock', compositional=False)
        store = constructor.build_initial_set(load_triples(FIXTURES / 'triples.jsonl'))

        self.assertEqual(len(store), 2)
        self.assertEqual({t.template_name for t in store.templates}, {'Multi-hop Entity Chain'})
        self.assertFalse(store.metadata['compositional'])

    def test_fifty_triples_three_templates_each(self):
        constructor = constructor_for(construction_response(THREE_TEMPLATES))
        store = constructor.build_initial_set(triples(50))

        self.assertEqual(len(store), 150)
        self.assertEqual(store.template_ids[-1], 'TID_150')
        self.assertEqual(store.metadata['source_queries']['TID_1'], 'train-0')
        self.assertEqual(store.metadata['source_queries']['TID_150'], 'train-49')
        self.assertEqual(constructor.stats['templates'], 150)

    def test_deterministic(self):
        first = TemplateConstructor(scenario_gateway(), 'mock').build_initial_set(load_triples(FIXTURES / 'triples.jsonl'))
        second = TemplateConstructor(scenario_gateway(), 'mock').build_initial_set(load_triples(FIXTURES / 'triples.jsonl'))
        self.assertEqual(canonical_json(first), canonical_json(second))

    def test_contamination(self):
        constructor = constructor_for(construction_response(THREE_TEMPLATES))
        with self.assertRaises(ContaminationError) as ctx:
            constructor.build_initial_set(triples(3), test_query_ids=['train-1', 'q9'])
        self.assertEqual(ctx.exception.query_ids, ['train-1'])

    def test_oracle_is_watermarked(self):
        constructor = constructor_for(construction_response(THREE_TEMPLATES))
        store = constructor.build_initial_set(triples(2), test_query_ids=['train-1'], oracle=True)
        self.assertTrue(store.metadata['oracle'])
        self.assertEqual(len(store), 6)

    def test_backend_failures_abort(self):
        constructor = TemplateConstructor(mock_gateway(), 'mock')
        with self.assertRaises(GatewayError):
            constructor.build_initial_set(triples(3))

    def test_no_triples(self):
        with self.assertRaises(PreconditionError):
            constructor_for('{}').build_initial_set([])
