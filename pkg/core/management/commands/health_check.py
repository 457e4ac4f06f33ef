import os

from core.construction import load_triples
from core.corpus import load_manifest
from core.exceptions import EngineError
from core.llm_gateway import CompletionRequest
from core.management.engine_command import EngineCommand
from core.store import load
from core.usage import read_usage_log


class Command(EngineCommand):
    help = 'Проверка конфигурации движка: пути, бэкенды, ключи доступа'

    def add_engine_arguments(self, parser):
        parser.add_argument(
            '--ping',
            action='store_true',
            help='Короткий тестовый запрос к каждому бэкенду',
        )

    def describe_path(self, key, path):
        """Читает файл так же, как команды движка; возвращает краткое описание содержимого"""
        if key == 'train_triples':
            return f'{len(load_triples(path))} троек'
        if key == 'usage_log':
            return f'{len(read_usage_log(path))} записей использования'
        manifest = load_manifest(path)
        documents = manifest.documents()
        summary = f'{len(manifest.queries)} запросов, {len(documents)} документов, метрика {manifest.metric}'
        if manifest.retrieval_corpus_path is not None:
            summary += f', корпус поиска {len(manifest.retrieval_documents())} документов'
        return summary

    def run(self, config, options):
        self.stdout.write('🔍 Проверка конфигурации движка...\n')

        total_checks = 0
        passed_checks = 0
        missing_keys = []

        # 1. Файлы из конфигурации читаются и проходят проверку формата
        for key in ('manifest', 'train_triples', 'test_manifest', 'validation_manifest', 'usage_log'):
            path = getattr(config, key)
            if path is None:
                continue
            total_checks += 1
            try:
                self.stdout.write(f'✅ {key}: {path} ({self.describe_path(key, path)})')
                passed_checks += 1
            except EngineError as e:
                self.stdout.write(f'❌ {key}: {e}')

        # 2. Снимок шаблонов читается
        if config.snapshot is not None:
            total_checks += 1
            try:
                store = load(config.snapshot)
                self.stdout.write(f'✅ Снимок: итерация {store.iteration}, {len(store)} шаблонов')
                passed_checks += 1
            except EngineError as e:
                self.stdout.write(f'❌ Снимок: {e}')

        # 3. Бэкенды и ключи
        for backend_id, backend in sorted(config.backends.items()):
            total_checks += 1
            if backend.kind == 'mock':
                self.stdout.write(f'✅ {backend_id}: mock ({backend.script})')
                passed_checks += 1
            elif os.environ.get(backend.auth_env):
                self.stdout.write(f'✅ {backend_id}: {backend.model} @ {backend.endpoint or "api.openai.com"}')
                passed_checks += 1
            else:
                self.stdout.write(f'❌ {backend_id}: переменная {backend.auth_env} не задана')
                missing_keys.append(backend.auth_env)

        roles = ', '.join(f'{role}={backend_id}' for role, backend_id in sorted(config.roles.items()))
        self.stdout.write(f'👥 Роли: {roles}')

        # 4. Тестовый запрос
        if options['ping']:
            gateway = config.build_gateway()
            for backend_id in sorted(config.backends):
                total_checks += 1
                try:
                    request = CompletionRequest.for_role('answerer', 'Reply with OK.', backend_id)
                    gateway.complete(request)
                    self.stdout.write(f'✅ {backend_id}: отвечает на запросы')
                    passed_checks += 1
                except EngineError as e:
                    self.stdout.write(f'❌ {backend_id}: {e}')

        health_percentage = (passed_checks / total_checks) * 100 if total_checks else 100.0

        self.stdout.write('\n' + '=' * 50)
        self.stdout.write(f'🩺 КОНФИГУРАЦИЯ: {passed_checks}/{total_checks} ({health_percentage:.1f}%)')
        if passed_checks == total_checks:
            self.stdout.write(self.style.SUCCESS('🟢 Все проверки пройдены'))
        else:
            self.stdout.write(self.style.WARNING('🔴 Конфигурация требует внимания'))
        self.stdout.write('=' * 50)

        if passed_checks < total_checks:
            self.stdout.write('\n📋 РЕКОМЕНДАЦИИ:')
            for env_name in sorted(set(missing_keys)):
                self.stdout.write(f'• Задайте {env_name} в .env файле')
            self.stdout.write('• Подробности ошибок в логах (logger core)')
