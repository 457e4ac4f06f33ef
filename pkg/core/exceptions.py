"""
Исключения движка шаблонов рассуждений
"""
from typing import Optional


class EngineError(Exception):
    """Базовое исключение движка"""


class PreconditionError(EngineError):
    """Нарушено предусловие операции"""


class ConfigError(EngineError):
    """Ошибка конфигурации прогона (путь, ключ, роль)"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


# --- хранилище шаблонов ---

class StoreError(EngineError):
    """Ошибка хранилища шаблонов"""


class UnknownTemplateError(StoreError):
    def __init__(self, template_id: str):
        super().__init__(f"Unknown template id: {template_id}")
        self.template_id = template_id


class DecisionError(StoreError):
    """Решение несовместимо с переданной ревизией"""


class StoreParseError(StoreError):
    """Файл хранилища не соответствует схеме"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


# --- шлюз моделей ---

class GatewayError(EngineError):
    """Ошибка обращения к языковой модели"""


class TransportError(GatewayError):
    """Временная ошибка транспорта; шлюз повторяет запрос"""


class ContextLimitError(GatewayError):
    def __init__(self, estimated_tokens: int, limit: int):
        super().__init__(f"Prompt of ~{estimated_tokens} tokens exceeds context limit {limit}")
        self.estimated_tokens = estimated_tokens
        self.limit = limit


class AuthMissingError(GatewayError):
    def __init__(self, env_name: str):
        super().__init__(f"Credentials variable {env_name} is not set")
        self.env_name = env_name


class BackendNotConfiguredError(GatewayError):
    def __init__(self, backend_id: str):
        super().__init__(f"Backend not configured: {backend_id}")
        self.backend_id = backend_id


class MockScriptMissError(GatewayError):
    """Скрипт mock-бэкенда не содержит ответа на промпт"""


class PayloadParseError(GatewayError):
    """Ответ модели не содержит корректного JSON-объекта"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


# --- корпус и поиск ---

class CorpusError(EngineError):
    """Ошибка корпуса документов"""


class CorpusFormatError(CorpusError):
    pass


class DuplicateDocumentError(CorpusError):
    def __init__(self, doc_id: str):
        super().__init__(f"Duplicate doc_id: {doc_id}")
        self.doc_id = doc_id


class PackingError(CorpusError):
    """Первый документ не помещается в бюджет"""


class RetrievalError(EngineError):
    pass


# --- построение, оптимизация, оценка ---

class ContaminationError(EngineError):
    """Обучающие тройки пересекаются с тестовой выборкой"""

    def __init__(self, query_ids):
        ids = ', '.join(sorted(query_ids))
        super().__init__(f"Training triples overlap the test split: {ids}")
        self.query_ids = sorted(query_ids)


class EvaluationAbortedError(EngineError):
    def __init__(self, failed: int, total: int):
        super().__init__(f"Evaluation aborted: {failed} of {total} queries failed")
        self.failed = failed
        self.total = total


class IterationAbortedError(EngineError):
    """Итерация прервана, предыдущий снимок остается в силе"""


class AnalyticsError(EngineError):
    pass
