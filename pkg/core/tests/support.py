"""
Общие построители для тестов: шаблоны, хранилища, шлюзы со скриптовым mock-бэкендом
и рабочий каталог для сквозных прогонов management-команд
"""

import json
from pathlib import Path

from core.corpus import DatasetManifest, QueryItem
from core.llm_gateway import BackendConfig, LLMGateway, MockBackend, MockRule
from core.store import TemplateExample, TemplateStore, ThoughtTemplate, add_template

FIXTURES = Path(__file__).resolve().parent / 'fixtures'


def make_template(template_id='TID_58', name='Biographical Location Lookup',
                  description='Finding the location associated with a life event of a person.',
                  reason_flow=('Identify the person in question',
                               'Determine which life event is asked about',
                               'Extract the location of that event'),
                  problem='In what city did Lloyd Lonergan die?',
                  solution=('Identify the person: Lloyd Lonergan', 'Find records of his death'),
                  answer='New York'):
    return ThoughtTemplate(
        template_id=template_id,
        template_name=name,
        description=description,
        reason_flow=tuple(reason_flow),
        example=TemplateExample(problem, tuple(solution), answer),
    )


def template_payload(name, description='A reusable reasoning step.', answer='Tucson'):
    """Шаблон в виде JSON-объекта, как его возвращает модель"""
    return {
        'template_name': name,
        'description': description,
        'reason_flow': [f'Apply {name.lower()}', 'Check the supporting document'],
        'example': {
            'example_problem': f'Worked example for {name.lower()}',
            'solution_steps': ['Read the question', 'Resolve the entity'],
            'final_answer': answer,
        },
    }


def make_store(count, iteration=0):
    store = TemplateStore(iteration=iteration, metadata={'id_high_water': 0})
    for number in range(1, count + 1):
        add_template(store, make_template(template_id='', name=f'Strategy {number}'))
    return store


def rule(*match, response, role=None):
    return MockRule(match=tuple(match), response=response, role=role)


def mock_config(backend_id='mock', **overrides):
    return BackendConfig(backend_id=backend_id, kind='mock', script='in-process', **overrides)


def mock_gateway(rules=(), default=None, responses=None, backend_id='mock', **config_overrides):
    backend = MockBackend(responses=responses, rules=rules, default=default)
    return LLMGateway(
        {backend_id: mock_config(backend_id, **config_overrides)},
        backends={backend_id: backend},
        sleep=lambda delay: None,
    )


def trace(answer, *template_ids):
    steps = [
        f"Step {number} | TEMPLATE_TITLE: Strategy\nTEMPLATE_ID: {template_id}"
        for number, template_id in enumerate(template_ids, start=1)
    ]
    return '\n'.join(steps + [f"Final Answer: [{answer!r}]"])


def make_manifest(queries, metric='f1', corpus='corpus.jsonl'):
    """Манифест в памяти поверх фикстурного корпуса"""
    items = [
        QueryItem(query_id=query_id, question=question, gold_answers=tuple(golds))
        for query_id, question, golds in queries
    ]
    return DatasetManifest(
        path=FIXTURES / 'train_manifest.json',
        queries=items,
        corpus_path=FIXTURES / corpus,
        metric=metric,
    )


# --- сквозной сценарий для management-команд ---

FIRST_TRIPLE_TEMPLATES = [
    template_payload('Work-to-Creator Attribution', answer='Lloyd Lonergan'),
    template_payload('Biographical Location Lookup', answer='New York'),
    template_payload('Historical Event Specification', answer='crucifixion'),
]

SECOND_TRIPLE_TEMPLATES = [
    template_payload('Administrative Territory Identification', answer='Arizona'),
    template_payload('Ordinal City Ranking', answer='Tucson'),
]

REVISED_TEMPLATE = template_payload(
    'Biographical Location Lookup (Revised)',
    description='Resolve the city of the life event before answering.',
    answer='New York',
)

FEEDBACK_TEXT = (
    "- The template stops before resolving the city named in the documents.\n"
    "- Add a step that checks the document for the location.\n"
    "**FIX**"
)


def construction_response(sub_templates):
    holistic = template_payload('Multi-hop Entity Chain')
    return json.dumps({**holistic, 'sub_templates': sub_templates})


def scenario_script():
    """
    Скрипт mock-бэкенда: train-1 и train-2 дают 3 + 2 шаблона, train-3 пропускается
    (ответ без JSON), q3 и q4 проваливаются через TID_2, обратная связь по TID_2 требует FIX
    """
    return {
        'rules': [
            {
                'role': 'constructor',
                'match': ['With the Mounted Police and where did he die?'],
                'response': '```json\n' + construction_response(FIRST_TRIPLE_TEMPLATES) + '\n```',
            },
            {
                'role': 'constructor',
                'match': ['second largest in the state where Yuma'],
                'response': 'Here is the template: ' + construction_response(SECOND_TRIPLE_TEMPLATES),
            },
            {
                'role': 'answerer',
                'match': ['Where did the painter of Crucifixion die?'],
                'response': trace('Venice', 'TID_1', 'TID_3'),
            },
            {
                'role': 'answerer',
                'match': ["Why did Roncalli leave the place where Crucifixion's creator died?"],
                'response': trace('for the conclave in Rome', 'TID_1', 'TID_2', 'TID_3'),
            },
            {
                'role': 'answerer',
                'match': ['How long are the city council terms'],
                'response': trace('Phoenix', 'TID_2', 'TID_4'),
            },
            {
                'role': 'answerer',
                'match': ['Which river reaches Lake Michigan'],
                'response': trace('Lake Michigan', 'TID_2', 'TID_5'),
            },
            {
                'role': 'feedback',
                'match': ['"template_id": "TID_2"'],
                'response': FEEDBACK_TEXT,
            },
            {
                'role': 'updater',
                'match': [],
                'response': json.dumps(REVISED_TEMPLATE),
            },
        ],
        'default': 'Final Answer: []',
    }


def scenario_gateway():
    backend = MockBackend.from_dict(scenario_script())
    return LLMGateway({'mock': mock_config()}, backends={'mock': backend}, sleep=lambda delay: None)


def write_workspace(directory, **extra):
    """Скрипт mock-бэкенда и engine.toml в directory; возвращает путь конфигурации"""
    directory = Path(directory)
    script = directory / 'mock_script.json'
    script.write_text(json.dumps(scenario_script(), indent=2), encoding='utf-8')

    lines = [
        f'manifest = "{(FIXTURES / "train_manifest.json").as_posix()}"',
        f'train_triples = "{(FIXTURES / "triples.jsonl").as_posix()}"',
        'num_triples = 3',
        'seed = 7',
        'max_iterations = 2',
    ]
    for key, value in extra.items():
        lines.append(f'{key} = {json.dumps(value)}')
    lines += [
        '',
        '[roles]',
        'constructor = "mock"',
        'answerer = "mock"',
        'feedback = "mock"',
        'updater = "mock"',
        '',
        '[backends.mock]',
        'kind = "mock"',
        'script = "mock_script.json"',
        'parallelism = 2',
    ]
    config = directory / 'engine.toml'
    config.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return config
