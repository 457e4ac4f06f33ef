"""
Система валидации данных движка
Схемы шаблонов, снимков хранилища, корпусов, манифестов и обучающих троек
"""

import logging
from typing import Any, Dict, List, Optional, Tuple

from jsonschema import Draft202012Validator

logger = logging.getLogger(__name__)


NON_EMPTY_STRING = {'type': 'string', 'minLength': 1}

STEP_LIST = {
    'type': 'array',
    'minItems': 1,
    'items': NON_EMPTY_STRING,
}

EXAMPLE_SCHEMA = {
    'type': 'object',
    'required': ['example_problem', 'solution_steps', 'final_answer'],
    'properties': {
        'example_problem': NON_EMPTY_STRING,
        'solution_steps': STEP_LIST,
        'final_answer': NON_EMPTY_STRING,
    },
}

# Ключи совпадают со SCHEMA из промпта редактирования шаблона
TEMPLATE_SCHEMA = {
    'type': 'object',
    'required': ['template_id', 'template_name', 'description', 'reason_flow', 'example'],
    'properties': {
        'template_id': {'type': 'string', 'pattern': r'^TID_[0-9]+$'},
        'template_name': {'type': 'string'},
        'description': {'type': 'string'},
        'reason_flow': STEP_LIST,
        'example': EXAMPLE_SCHEMA,
    },
}

# Подшаблон из ответа конструктора и ревизия из ответа редактора: id назначает хранилище
SUB_TEMPLATE_SCHEMA = {
    'type': 'object',
    'required': ['template_name', 'description', 'reason_flow', 'example'],
    'properties': {
        'template_id': {'type': 'string'},
        'template_name': {'type': 'string'},
        'description': {'type': 'string'},
        'reason_flow': STEP_LIST,
        'example': EXAMPLE_SCHEMA,
    },
}

CONSTRUCTION_SCHEMA = {
    'type': 'object',
    'required': ['sub_templates'],
    'properties': {
        'sub_templates': {'type': 'array'},
    },
}

STORE_SCHEMA = {
    'type': 'object',
    'required': ['iteration', 'templates', 'provenance'],
    'properties': {
        'iteration': {'type': 'integer', 'minimum': 0},
        'templates': {'type': 'array', 'items': TEMPLATE_SCHEMA},
        'provenance': {
            'type': 'object',
            'additionalProperties': {
                'type': 'string',
                'pattern': r'^(constructed|fixed-from:.+|added-from:.+)$',
            },
        },
        'metadata': {'type': 'object'},
    },
}

DOCUMENT_SCHEMA = {
    'type': 'object',
    'required': ['doc_id', 'title', 'body'],
    'properties': {
        'doc_id': {'type': ['string', 'integer']},
        'title': {'type': 'string'},
        'body': NON_EMPTY_STRING,
        'source': {'type': ['string', 'null']},
    },
}

MANIFEST_SCHEMA = {
    'type': 'object',
    'required': ['queries', 'corpus_path', 'metric'],
    'properties': {
        'corpus_path': NON_EMPTY_STRING,
        'retrieval_corpus_path': NON_EMPTY_STRING,
        'metric': {'enum': ['f1', 'em', 'accuracy']},
        'queries': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['query_id', 'question', 'gold_answers'],
                'properties': {
                    'query_id': {'type': ['string', 'integer']},
                    'question': NON_EMPTY_STRING,
                    'gold_answers': {'type': 'array', 'minItems': 1, 'items': {'type': 'string'}},
                    'doc_allowlist': {'type': 'array', 'items': {'type': ['string', 'integer']}},
                    'gold_doc_ids': {'type': 'array', 'items': {'type': ['string', 'integer']}},
                    'solution': {'type': 'array', 'items': {'type': 'string'}},
                },
            },
        },
    },
}

TRIPLE_SCHEMA = {
    'type': 'object',
    'required': ['query_id', 'problem', 'answer'],
    'properties': {
        'query_id': {'type': ['string', 'integer']},
        'problem': NON_EMPTY_STRING,
        'solution': {'type': ['array', 'null'], 'items': {'type': 'string'}},
        'answer': NON_EMPTY_STRING,
    },
}

BACKEND_SCHEMA = {
    'type': 'object',
    'properties': {
        'kind': {'enum': ['openai', 'mock']},
        'endpoint': {'type': 'string'},
        'model': {'type': 'string'},
        'auth_env': {'type': 'string'},
        'timeout': {'type': 'number', 'exclusiveMinimum': 0},
        'max_retries': {'type': 'integer', 'minimum': 0},
        'parallelism': {'type': 'integer', 'minimum': 1},
        'context_limit': {'type': 'integer', 'minimum': 1},
        'script': {'type': 'string'},
    },
    'additionalProperties': False,
}

RUN_CONFIG_SCHEMA = {
    'type': 'object',
    'properties': {
        'manifest': NON_EMPTY_STRING,
        'train_triples': NON_EMPTY_STRING,
        'test_manifest': NON_EMPTY_STRING,
        'validation_manifest': NON_EMPTY_STRING,
        'out': NON_EMPTY_STRING,
        'seed': {'type': 'integer'},
        'token_budget': {'type': 'integer', 'minimum': 1},
        'k': {'type': 'integer', 'minimum': 1},
        'k_list': {'type': 'array', 'minItems': 1, 'items': {'type': 'integer', 'minimum': 1}},
        'mode': {'enum': ['naive', 'cot', 'cic', 'cic_cot', 'total']},
        'tau': {'anyOf': [{'type': 'number'}, {'const': 'auto'}]},
        'tau_grid': {'type': 'array', 'minItems': 1, 'items': {'type': 'number'}},
        'min_usage': {'type': 'integer', 'minimum': 0},
        'aggregation': {'enum': ['mean', 'sum']},
        'max_iterations': {'type': 'integer', 'minimum': 1},
        'early_stop': {'type': 'boolean'},
        'epsilon': {'type': 'number', 'minimum': 0},
        'num_triples': {'type': 'integer', 'minimum': 1},
        'compositional': {'type': 'boolean'},
        'oracle': {'type': 'boolean'},
        'snapshot': NON_EMPTY_STRING,
        'usage_log': NON_EMPTY_STRING,
        'percentile': {'enum': [25, 50, 75, 100]},
        'direction': {'enum': ['bottom', 'top']},
        'run_id': {'type': 'string', 'pattern': r'^[A-Za-z0-9_.-]+$'},
        'roles': {
            'type': 'object',
            'properties': {
                role: NON_EMPTY_STRING for role in ('constructor', 'answerer', 'feedback', 'updater')
            },
            'additionalProperties': False,
        },
        'backends': {'type': 'object', 'additionalProperties': BACKEND_SCHEMA},
    },
    'additionalProperties': False,
}

SCHEMAS = {
    'template': TEMPLATE_SCHEMA,
    'sub_template': SUB_TEMPLATE_SCHEMA,
    'construction': CONSTRUCTION_SCHEMA,
    'store': STORE_SCHEMA,
    'document': DOCUMENT_SCHEMA,
    'manifest': MANIFEST_SCHEMA,
    'triple': TRIPLE_SCHEMA,
    'run_config': RUN_CONFIG_SCHEMA,
}


class SchemaValidator:
    """Валидация JSON-объектов по именованной схеме"""

    _validators: Dict[str, Draft202012Validator] = {
        name: Draft202012Validator(schema) for name, schema in SCHEMAS.items()
    }

    @staticmethod
    def error_field(error) -> str:
        """Путь к полю с ошибкой в виде templates[0].reason_flow"""
        parts = []
        for element in error.absolute_path:
            if isinstance(element, int):
                parts.append(f"[{element}]")
            else:
                parts.append(f".{element}" if parts else str(element))

        # Для required jsonschema указывает на родителя, а не на пропущенный ключ
        if error.validator == 'required' and isinstance(error.instance, dict):
            missing = [key for key in error.validator_value if key not in error.instance]
            if missing:
                parts.append(f".{missing[0]}" if parts else missing[0])

        return ''.join(parts) or '<root>'

    @classmethod
    def validate(cls, payload: Any, schema_name: str) -> Tuple[bool, List[Tuple[str, str]]]:
        """Возвращает (is_valid, [(field, message), ...])"""
        validator = cls._validators[schema_name]
        errors = sorted(validator.iter_errors(payload), key=lambda e: list(map(str, e.absolute_path)))
        return not errors, [(cls.error_field(e), e.message) for e in errors]


class TitleValidator:
    """Заголовки документов не должны содержать разделитель формата '|'"""

    SEPARATOR = '|'

    @classmethod
    def validate_title(cls, title: str) -> Tuple[bool, str]:
        if cls.SEPARATOR in title:
            return False, f"Title contains the reserved separator '{cls.SEPARATOR}': {title!r}"
        return True, "OK"


class ValidationManager:
    """Главный менеджер валидации"""

    def __init__(self):
        self.schema_validator = SchemaValidator()
        self.title_validator = TitleValidator()

    def validate_payload(self, payload: Any, schema_name: str) -> Dict[str, Any]:
        """
        Валидация объекта по схеме
        Возвращает результат в виде словаря с полями is_valid, errors, fields, data
        """
        result = {
            'is_valid': True,
            'errors': [],
            'fields': [],
            'warnings': [],
            'data': payload,
        }

        is_valid, problems = self.schema_validator.validate(payload, schema_name)
        if not is_valid:
            result['is_valid'] = False
            for field, message in problems:
                result['fields'].append(field)
                result['errors'].append(f"{field}: {message}")
            logger.debug(f"Validation failed for {schema_name}: {result['errors']}")

        return result

    def validate_document(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        result = self.validate_payload(payload, 'document')
        if result['is_valid']:
            title_valid, title_error = self.title_validator.validate_title(str(payload['title']))
            if not title_valid:
                result['is_valid'] = False
                result['fields'].append('title')
                result['errors'].append(f"title: {title_error}")
        return result

    def validate_store_ids(self, template_ids: List[str]) -> Dict[str, Any]:
        """Проверка уникальности template_id в снимке"""
        result = {'is_valid': True, 'errors': [], 'fields': [], 'warnings': [], 'data': template_ids}
        seen = set()
        for index, template_id in enumerate(template_ids):
            if template_id in seen:
                result['is_valid'] = False
                result['fields'].append(f"templates[{index}].template_id")
                result['errors'].append(f"templates[{index}].template_id: duplicate id {template_id}")
            seen.add(template_id)
        return result

    @staticmethod
    def first_field(result: Dict[str, Any]) -> Optional[str]:
        return result['fields'][0] if result['fields'] else None
