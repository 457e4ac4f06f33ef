"""
Django settings for thought_engine project.

Проект без веб-интерфейса: Django используется как каркас для настроек,
management-команд и тестового раннера.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv('.env.local')

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-thought-engine-local-only')

DEBUG = os.getenv('DEBUG', 'True').lower() == 'true'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'core',  # Движок шаблонов рассуждений
]

# Движок работает с JSON/JSONL-артефактами, база данных не используется
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Logging
ENGINE_LOG_LEVEL = os.getenv('ENGINE_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'engine': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'engine',
        },
    },
    'loggers': {
        'core': {
            'handlers': ['console'],
            'level': ENGINE_LOG_LEVEL,
            'propagate': False,
        },
    },
}


def _env_int(name, default):
    try:
        return int(os.getenv(name, str(default)))
    except ValueError:
        return default


def _env_float(name, default):
    try:
        return float(os.getenv(name, str(default)))
    except ValueError:
        return default


# External Services Configuration
OPENAI_API_KEY = os.getenv('OPENAI_API_KEY', '')
OPENAI_BASE_URL = os.getenv('OPENAI_BASE_URL', 'https://api.openai.com/v1')
OPENAI_MODEL = os.getenv('OPENAI_MODEL', 'gpt-4.1')

# Бюджеты контекста (128k токенов, оценка bytes/4)
ENGINE_TOKEN_BUDGET = _env_int('ENGINE_TOKEN_BUDGET', 128_000)
ENGINE_CONTEXT_LIMIT = _env_int('ENGINE_CONTEXT_LIMIT', 128_000)
# Кодировка tiktoken для точного подсчета токенов, например cl100k_base
ENGINE_TOKENIZER = os.getenv('ENGINE_TOKENIZER', '')

# Шлюз моделей
ENGINE_REQUEST_TIMEOUT = _env_float('ENGINE_REQUEST_TIMEOUT', 120.0)
ENGINE_MAX_RETRIES = _env_int('ENGINE_MAX_RETRIES', 3)
ENGINE_PARALLELISM = _env_int('ENGINE_PARALLELISM', 4)
ENGINE_MAX_REPROMPTS = _env_int('ENGINE_MAX_REPROMPTS', 2)

ENGINE_ROLE_TEMPERATURES = {
    'constructor': _env_float('ENGINE_TEMPERATURE_CONSTRUCTOR', 0.3),
    'answerer': _env_float('ENGINE_TEMPERATURE_ANSWERER', 0.0),
    'feedback': _env_float('ENGINE_TEMPERATURE_FEEDBACK', 0.3),
    'updater': _env_float('ENGINE_TEMPERATURE_UPDATER', 0.0),
}

ENGINE_MAX_OUTPUT_TOKENS = {
    'constructor': _env_int('ENGINE_MAX_OUTPUT_TOKENS_CONSTRUCTOR', 4096),
    'answerer': _env_int('ENGINE_MAX_OUTPUT_TOKENS_ANSWERER', 2048),
    'feedback': _env_int('ENGINE_MAX_OUTPUT_TOKENS_FEEDBACK', 1024),
    'updater': _env_int('ENGINE_MAX_OUTPUT_TOKENS_UPDATER', 2048),
}

# BM25
ENGINE_RETRIEVAL_K1 = _env_float('ENGINE_RETRIEVAL_K1', 1.2)
ENGINE_RETRIEVAL_B = _env_float('ENGINE_RETRIEVAL_B', 0.75)

# Построение и обновление шаблонов
ENGINE_NUM_TRIPLES = _env_int('ENGINE_NUM_TRIPLES', 50)
ENGINE_DEFAULT_TAU = _env_float('ENGINE_DEFAULT_TAU', 0.5)
ENGINE_TAU_GRID = [
    float(value) for value in os.getenv('ENGINE_TAU_GRID', '0.3,0.4,0.5,0.6,0.7').split(',') if value.strip()
]
ENGINE_MIN_USAGE = _env_int('ENGINE_MIN_USAGE', 2)
ENGINE_MAX_ITERATIONS = _env_int('ENGINE_MAX_ITERATIONS', 3)
ENGINE_EARLY_STOP_EPSILON = _env_float('ENGINE_EARLY_STOP_EPSILON', 0.001)
ENGINE_FAILURE_ABORT_RATIO = _env_float('ENGINE_FAILURE_ABORT_RATIO', 0.5)

# Сколько промптов сохранять в prompt_samples/ для каждого прогона
ENGINE_PROMPT_SAMPLES = _env_int('ENGINE_PROMPT_SAMPLES', 3)
