"""
Шлюз к языковым моделям
Единый интерфейс completion для OpenAI-совместимых endpoint'ов и детерминированного mock-бэкенда,
ограничение параллелизма, повторы с экспоненциальной задержкой и разбор JSON из ответов модели
"""

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import openai
from django.conf import settings

from .corpus import TokenCounter, estimate_tokens
from .exceptions import (
    AuthMissingError,
    BackendNotConfiguredError,
    ConfigError,
    ContextLimitError,
    GatewayError,
    MockScriptMissError,
    PayloadParseError,
    PreconditionError,
    TransportError,
)
from .validators import ValidationManager

logger = logging.getLogger(__name__)

ROLES = ('constructor', 'answerer', 'feedback', 'updater')

BACKEND_KINDS = ('openai', 'mock')

REPROMPT_SUFFIX = "\n\nYour previous output was not valid JSON."

_FENCE_PATTERN = re.compile(r'```(?:json|JSON)?\s*\n?(.*?)```', re.DOTALL)


@dataclass(frozen=True)
class CompletionRequest:
    role: str
    prompt: str
    max_output_tokens: int
    temperature: float
    backend_id: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise PreconditionError(f"Unknown role: {self.role}")
        if not self.prompt:
            raise PreconditionError("Prompt must not be empty")
        if self.max_output_tokens < 1:
            raise PreconditionError(f"max_output_tokens must be positive, got {self.max_output_tokens}")
        if self.temperature < 0:
            raise PreconditionError(f"temperature must be non-negative, got {self.temperature}")

    @classmethod
    def for_role(cls, role: str, prompt: str, backend_id: str) -> 'CompletionRequest':
        """Запрос с параметрами роли по умолчанию из settings"""
        return cls(
            role=role,
            prompt=prompt,
            max_output_tokens=settings.ENGINE_MAX_OUTPUT_TOKENS[role],
            temperature=settings.ENGINE_ROLE_TEMPERATURES[role],
            backend_id=backend_id,
        )

    def with_prompt(self, prompt: str) -> 'CompletionRequest':
        return CompletionRequest(self.role, prompt, self.max_output_tokens, self.temperature, self.backend_id)


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    kind: str = 'openai'
    endpoint: str = ''
    model: str = ''
    auth_env: str = 'OPENAI_API_KEY'
    timeout: float = 120.0
    max_retries: int = 3
    parallelism: int = 4
    context_limit: int = 128_000
    script: Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"Backend {self.backend_id}: unknown kind {self.kind!r}", key=f"backends.{self.backend_id}.kind")
        if self.parallelism < 1:
            raise ConfigError(f"Backend {self.backend_id}: parallelism must be >= 1", key=f"backends.{self.backend_id}.parallelism")
        if self.max_retries < 0:
            raise ConfigError(f"Backend {self.backend_id}: max_retries must be >= 0", key=f"backends.{self.backend_id}.max_retries")
        if self.kind == 'mock' and not self.script:
            raise ConfigError(f"Backend {self.backend_id}: mock backend needs a script", key=f"backends.{self.backend_id}.script")

    @classmethod
    def from_dict(cls, backend_id: str, payload: Dict[str, Any]) -> 'BackendConfig':
        known = {'kind', 'endpoint', 'model', 'auth_env', 'timeout', 'max_retries', 'parallelism', 'context_limit', 'script'}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"Backend {backend_id}: unknown keys {sorted(unknown)}", key=f"backends.{backend_id}")
        defaults = default_backend_config(backend_id)
        return cls(
            backend_id=backend_id,
            kind=payload.get('kind', defaults.kind),
            endpoint=payload.get('endpoint', defaults.endpoint),
            model=payload.get('model', defaults.model),
            auth_env=payload.get('auth_env', defaults.auth_env),
            timeout=float(payload.get('timeout', defaults.timeout)),
            max_retries=int(payload.get('max_retries', defaults.max_retries)),
            parallelism=int(payload.get('parallelism', defaults.parallelism)),
            context_limit=int(payload.get('context_limit', defaults.context_limit)),
            script=payload.get('script'),
        )

    def describe(self) -> Dict[str, Any]:
        """Идентичность бэкенда для метаданных прогона (без секретов)"""
        return {
            'backend_id': self.backend_id,
            'kind': self.kind,
            'endpoint': self.endpoint,
            'model': self.model,
            'context_limit': self.context_limit,
        }


def default_backend_config(backend_id: str = 'openai') -> BackendConfig:
    return BackendConfig(
        backend_id=backend_id,
        kind='openai',
        endpoint=settings.OPENAI_BASE_URL,
        model=settings.OPENAI_MODEL,
        auth_env='OPENAI_API_KEY',
        timeout=settings.ENGINE_REQUEST_TIMEOUT,
        max_retries=settings.ENGINE_MAX_RETRIES,
        parallelism=settings.ENGINE_PARALLELISM,
        context_limit=settings.ENGINE_CONTEXT_LIMIT,
    )


class Backend:
    """Базовый бэкенд; временные сбои сообщаются через TransportError"""

    def complete(self, request: CompletionRequest) -> str:
        raise NotImplementedError


class OpenAICompatibleBackend(Backend):
    """Любой chat-completions endpoint через openai SDK; повторы выполняет шлюз"""

    RETRYABLE = (
        openai.APIConnectionError,
        openai.RateLimitError,
        openai.InternalServerError,
    )

    def __init__(self, config: BackendConfig, client=None):
        self.config = config
        self._client = client
        self._client_lock = threading.Lock()

    def _get_client(self):
        with self._client_lock:
            if self._client is None:
                api_key = os.getenv(self.config.auth_env)
                if not api_key:
                    raise AuthMissingError(self.config.auth_env)
                self._client = openai.OpenAI(
                    api_key=api_key,
                    base_url=self.config.endpoint or None,
                    timeout=self.config.timeout,
                    max_retries=0,
                )
            return self._client

    def complete(self, request: CompletionRequest) -> str:
        client = self._get_client()
        try:
            response = client.chat.completions.create(
                model=self.config.model,
                messages=[{'role': 'user', 'content': request.prompt}],
                max_tokens=request.max_output_tokens,
                temperature=request.temperature,
            )
        except self.RETRYABLE as e:
            raise TransportError(f"{self.config.backend_id}: {e}") from e
        except openai.OpenAIError as e:
            raise GatewayError(f"{self.config.backend_id}: {e}") from e

        if not response.choices:
            return ''
        return response.choices[0].message.content or ''


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode('utf-8')).hexdigest()


@dataclass(frozen=True)
class MockRule:
    """Ответ, если промпт содержит все подстроки match (и совпадает роль, если указана)"""
    match: Sequence[str]
    response: str
    role: Optional[str] = None

    def matches(self, request: CompletionRequest) -> bool:
        if self.role is not None and self.role != request.role:
            return False
        return all(fragment in request.prompt for fragment in self.match)


class MockBackend(Backend):
    """
    Детерминированный бэкенд по скрипту: сначала таблица SHA-256 промпта,
    затем правила по подстрокам в порядке файла, затем default
    """

    def __init__(self, responses: Optional[Dict[str, str]] = None,
                 rules: Optional[Sequence[MockRule]] = None, default: Optional[str] = None):
        self.responses = dict(responses or {})
        self.rules = tuple(rules or ())
        self.default = default

    def complete(self, request: CompletionRequest) -> str:
        digest = prompt_digest(request.prompt)
        if digest in self.responses:
            return self.responses[digest]
        for rule in self.rules:
            if rule.matches(request):
                return rule.response
        if self.default is not None:
            return self.default
        raise MockScriptMissError(f"No scripted response for {request.role} prompt {digest[:12]}")

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'MockBackend':
        rules = []
        for index, rule in enumerate(payload.get('rules', [])):
            match = rule.get('match', [])
            if isinstance(match, str):
                match = [match]
            if 'response' not in rule:
                raise ConfigError(f"Mock rule #{index} has no response", key=f"rules[{index}].response")
            rules.append(MockRule(match=tuple(match), response=rule['response'], role=rule.get('role')))
        return cls(responses=payload.get('responses', {}), rules=rules, default=payload.get('default'))

    @classmethod
    def from_script(cls, path) -> 'MockBackend':
        path = Path(path)
        try:
            payload = json.loads(path.read_text(encoding='utf-8'))
        except OSError as e:
            raise ConfigError(f"Cannot read mock script {path}: {e}", key='script') from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Mock script {path} is not valid JSON: {e}", key='script') from e
        return cls.from_dict(payload)


def build_backend(config: BackendConfig) -> Backend:
    if config.kind == 'mock':
        return MockBackend.from_script(config.script)
    return OpenAICompatibleBackend(config)


class LLMGateway:
    """Шлюз: проверка лимита контекста, семафор на бэкенд, повторы и телеметрия"""

    def __init__(self, configs: Dict[str, BackendConfig], backends: Optional[Dict[str, Backend]] = None,
                 token_counter: Optional[TokenCounter] = None,
                 sleep: Callable[[float], None] = time.sleep, backoff_base: float = 0.5):
        self.configs = dict(configs)
        backends = dict(backends or {})
        self.backends = {
            backend_id: backends.get(backend_id) or build_backend(config)
            for backend_id, config in self.configs.items()
        }
        self.token_counter = token_counter
        self.sleep = sleep
        self.backoff_base = backoff_base

        self._semaphores = {
            backend_id: threading.BoundedSemaphore(config.parallelism)
            for backend_id, config in self.configs.items()
        }
        self._lock = threading.Lock()
        self.stats = {backend_id: self._empty_stats() for backend_id in self.configs}

    @staticmethod
    def _empty_stats() -> Dict[str, int]:
        return {
            'requests': 0,
            'retries': 0,
            'failures': 0,
            'context_rejections': 0,
            'last_attempts': 0,
            'in_flight': 0,
            'peak_in_flight': 0,
        }

    def _count(self, backend_id: str, key: str, delta: int = 1):
        with self._lock:
            self.stats[backend_id][key] += delta
            if key == 'in_flight':
                stats = self.stats[backend_id]
                stats['peak_in_flight'] = max(stats['peak_in_flight'], stats['in_flight'])

    def config_for(self, backend_id: str) -> BackendConfig:
        if backend_id not in self.configs:
            raise BackendNotConfiguredError(backend_id)
        return self.configs[backend_id]

    def complete(self, request: CompletionRequest) -> str:
        config = self.config_for(request.backend_id)
        backend = self.backends[request.backend_id]

        estimated = estimate_tokens(request.prompt, self.token_counter)
        if estimated > config.context_limit:
            self._count(request.backend_id, 'context_rejections')
            logger.warning(
                f"{request.role} prompt rejected before sending: ~{estimated} tokens, "
                f"limit {config.context_limit} ({request.backend_id})"
            )
            raise ContextLimitError(estimated, config.context_limit)

        attempts = 0
        with self._semaphores[request.backend_id]:
            self._count(request.backend_id, 'in_flight')
            try:
                while True:
                    attempts += 1
                    try:
                        text = backend.complete(request)
                        break
                    except TransportError as e:
                        if attempts > config.max_retries:
                            self._count(request.backend_id, 'failures')
                            logger.error(f"{request.backend_id}: giving up after {attempts} attempts: {e}")
                            raise
                        self._count(request.backend_id, 'retries')
                        delay = self.backoff_base * (2 ** (attempts - 1))
                        logger.warning(f"{request.backend_id}: transient failure ({e}), retry {attempts} in {delay:.1f}s")
                        self.sleep(delay)
                    except GatewayError:
                        self._count(request.backend_id, 'failures')
                        raise
            finally:
                self._count(request.backend_id, 'in_flight', -1)

        with self._lock:
            self.stats[request.backend_id]['requests'] += 1
            self.stats[request.backend_id]['last_attempts'] = attempts
        return text

    def complete_json(self, request: CompletionRequest, schema_name: Optional[str] = None,
                      max_reprompts: Optional[int] = None) -> Dict[str, Any]:
        """
        Completion с разбором JSON; при неудаче до max_reprompts повторных запросов
        с припиской о невалидном JSON, затем PayloadParseError
        """
        max_reprompts = settings.ENGINE_MAX_REPROMPTS if max_reprompts is None else max_reprompts
        current = request
        last_error: Optional[PayloadParseError] = None

        for attempt in range(max_reprompts + 1):
            raw = self.complete(current)
            try:
                return parse_json_payload(raw, schema_name)
            except PayloadParseError as e:
                last_error = e
                logger.warning(f"{request.role} output is not valid JSON (attempt {attempt + 1}): {e}")
                current = request.with_prompt(request.prompt + REPROMPT_SUFFIX)

        raise last_error

    def telemetry(self) -> Dict[str, Dict[str, int]]:
        """Счетчики для метаданных прогона; in_flight и пик зависят от планировщика потоков"""
        volatile = ('in_flight', 'peak_in_flight')
        with self._lock:
            return {
                backend_id: {key: value for key, value in stats.items() if key not in volatile}
                for backend_id, stats in self.stats.items()
            }


def _balanced_object_end(text: str, start: int) -> Optional[int]:
    """Индекс закрывающей '}' для объекта, начинающегося в start (строки JSON учитываются)"""
    depth = 0
    in_string = False
    escaped = False
    for index in range(start, len(text)):
        char = text[index]
        if in_string:
            if escaped:
                escaped = False
            elif char == '\\':
                escaped = True
            elif char == '"':
                in_string = False
            continue
        if char == '"':
            in_string = True
        elif char == '{':
            depth += 1
        elif char == '}':
            depth -= 1
            if depth == 0:
                return index
    return None


def _first_object(text: str) -> Optional[Dict[str, Any]]:
    index = text.find('{')
    while index != -1:
        end = _balanced_object_end(text, index)
        if end is None:
            index = text.find('{', index + 1)
            continue
        try:
            value = json.loads(text[index:end + 1])
        except json.JSONDecodeError:
            index = text.find('{', index + 1)
            continue
        if isinstance(value, dict):
            return value
        index = text.find('{', end + 1)
    return None


def parse_json_payload(raw_text: str, schema_name: Optional[str] = None) -> Dict[str, Any]:
    """
    Первый сбалансированный JSON-объект верхнего уровня из ответа модели.
    Обертка ```json ... ``` и окружающий текст отбрасываются; при заданной схеме
    объект проверяется validators.ValidationManager
    """
    candidates: List[str] = [match.group(1) for match in _FENCE_PATTERN.finditer(raw_text or '')]
    candidates.append(raw_text or '')

    payload = None
    for candidate in candidates:
        payload = _first_object(candidate)
        if payload is not None:
            break

    if payload is None:
        raise PayloadParseError("No balanced JSON object found in model output")

    if schema_name is not None:
        validation = ValidationManager()
        result = validation.validate_payload(payload, schema_name)
        if not result['is_valid']:
            raise PayloadParseError(
                f"Model output fails {schema_name} schema: {result['errors'][0]}",
                field=validation.first_field(result),
            )
    return payload
