"""
Конфигурация прогона: TOML-файл + флаги командной строки поверх значений из settings
"""

import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from django.conf import settings

from .corpus import build_token_counter
from .exceptions import ConfigError
from .llm_gateway import ROLES, BackendConfig, LLMGateway, default_backend_config
from .validators import ValidationManager

logger = logging.getLogger(__name__)

PATH_KEYS = ('manifest', 'train_triples', 'test_manifest', 'validation_manifest', 'snapshot', 'usage_log')


@dataclass
class RunConfig:
    manifest: Optional[Path] = None
    train_triples: Optional[Path] = None
    test_manifest: Optional[Path] = None
    validation_manifest: Optional[Path] = None
    out: Path = Path('runs')
    seed: int = 0
    token_budget: int = field(default_factory=lambda: settings.ENGINE_TOKEN_BUDGET)
    k: Optional[int] = None
    k_list: List[int] = field(default_factory=lambda: [1, 3, 5, 10])
    mode: str = 'total'
    tau: Union[float, str] = field(default_factory=lambda: settings.ENGINE_DEFAULT_TAU)
    tau_grid: List[float] = field(default_factory=lambda: list(settings.ENGINE_TAU_GRID))
    min_usage: int = field(default_factory=lambda: settings.ENGINE_MIN_USAGE)
    aggregation: str = 'mean'
    max_iterations: int = field(default_factory=lambda: settings.ENGINE_MAX_ITERATIONS)
    early_stop: bool = False
    epsilon: float = field(default_factory=lambda: settings.ENGINE_EARLY_STOP_EPSILON)
    num_triples: int = field(default_factory=lambda: settings.ENGINE_NUM_TRIPLES)
    compositional: bool = True
    oracle: bool = False
    snapshot: Optional[Path] = None
    usage_log: Optional[Path] = None
    percentile: Optional[int] = None
    direction: str = 'bottom'
    run_id: Optional[str] = None
    roles: Dict[str, str] = field(default_factory=dict)
    backends: Dict[str, BackendConfig] = field(default_factory=dict)
    source: Optional[Path] = None

    @classmethod
    def from_sources(cls, config_path=None, overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """
        Порядок приоритета: флаги > файл конфигурации > settings.
        Относительные пути файла считаются от его каталога, пути флагов от текущего каталога
        """
        payload: Dict[str, Any] = {}
        base_dir = Path.cwd()
        source = None
        if config_path is not None:
            source = Path(config_path)
            if not source.exists():
                raise ConfigError(f"Config file not found: {source}", key='config')
            try:
                payload = tomllib.loads(source.read_text(encoding='utf-8'))
            except tomllib.TOMLDecodeError as e:
                raise ConfigError(f"Config file {source} is not valid TOML: {e}", key='config') from e
            base_dir = source.parent

        validation = ValidationManager()
        result = validation.validate_payload(payload, 'run_config')
        if not result['is_valid']:
            raise ConfigError(f"{source}: {result['errors'][0]}", key=validation.first_field(result))

        config = cls(source=source)
        for key, value in payload.items():
            if key in ('roles', 'backends'):
                continue
            setattr(config, key, cls._coerce(key, value, base_dir))

        for backend_id, backend_payload in payload.get('backends', {}).items():
            backend_payload = dict(backend_payload)
            if backend_payload.get('script'):
                backend_payload['script'] = str(base_dir / backend_payload['script'])
            config.backends[backend_id] = BackendConfig.from_dict(backend_id, backend_payload)
        config.roles.update(payload.get('roles', {}))

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if not hasattr(config, key) or key in ('roles', 'backends', 'source'):
                raise ConfigError(f"Unknown override: {key}", key=key)
            setattr(config, key, cls._coerce(key, value, Path.cwd()))

        config._apply_backend_defaults()
        return config

    @staticmethod
    def _coerce(key: str, value: Any, base_dir: Path) -> Any:
        if key in PATH_KEYS or key == 'out':
            path = Path(value)
            return path if path.is_absolute() else base_dir / path
        if key == 'tau' and value != 'auto':
            return float(value)
        if key == 'tau_grid':
            return [float(item) for item in value]
        if key == 'k_list':
            return [int(item) for item in value]
        return value

    def _apply_backend_defaults(self):
        if not self.backends:
            self.backends['openai'] = default_backend_config('openai')
        fallback = next(iter(self.backends))
        for role in ROLES:
            self.roles.setdefault(role, fallback)

    def role_backend(self, role: str) -> str:
        return self.roles[role]

    def validate(self, required: Sequence[str] = ()) -> 'RunConfig':
        """Все указанные пути существуют, обязательные заданы, роли ссылаются на бэкенды"""
        for key in required:
            if getattr(self, key) is None:
                raise ConfigError(f"Missing required setting: {key}", key=key)
        for key in PATH_KEYS:
            path = getattr(self, key)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"Path does not exist: {path}", key=key)
        for role, backend_id in self.roles.items():
            if backend_id not in self.backends:
                raise ConfigError(f"Role {role} refers to unknown backend {backend_id}", key=f"roles.{role}")
        for backend_id, backend in self.backends.items():
            if backend.kind == 'mock' and not Path(backend.script).exists():
                raise ConfigError(f"Mock script does not exist: {backend.script}", key=f"backends.{backend_id}.script")
        if self.tau != 'auto' and not isinstance(self.tau, float):
            raise ConfigError(f"tau must be a number or 'auto', got {self.tau!r}", key='tau')
        return self

    def build_gateway(self, **kwargs) -> LLMGateway:
        kwargs.setdefault('token_counter', build_token_counter(settings.ENGINE_TOKENIZER))
        return LLMGateway(self.backends, **kwargs)

    def stable_fields(self) -> Dict[str, Any]:
        payload = {
            'manifest': self.manifest,
            'mode': self.mode,
            'k': self.k,
            'token_budget': self.token_budget,
            'snapshot': self.snapshot,
            'seed': self.seed,
            'roles': dict(sorted(self.roles.items())),
            'backends': {bid: backend.describe() for bid, backend in sorted(self.backends.items())},
        }
        return json.loads(json.dumps(payload, default=str))

    def resolved_run_id(self) -> str:
        """Явный run_id или короткий хеш стабильных полей конфигурации"""
        if self.run_id:
            return self.run_id
        encoded = json.dumps(self.stable_fields(), sort_keys=True, separators=(',', ':')).encode('utf-8')
        return hashlib.sha256(encoded).hexdigest()[:12]

    def describe(self) -> Dict[str, Any]:
        """Конфигурация для записи в метаданные (пути строками, без секретов)"""
        return {
            **self.stable_fields(),
            'tau': self.tau,
            'min_usage': self.min_usage,
            'aggregation': self.aggregation,
            'max_iterations': self.max_iterations,
            'early_stop': self.early_stop,
            'epsilon': self.epsilon,
            'num_triples': self.num_triples,
            'compositional': self.compositional,
            'oracle': self.oracle,
            'max_output_tokens': dict(settings.ENGINE_MAX_OUTPUT_TOKENS),
            'temperatures': dict(settings.ENGINE_ROLE_TEMPERATURES),
        }
