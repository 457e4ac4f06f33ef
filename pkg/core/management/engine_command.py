"""
Общая основа management-команд движка: загрузка RunConfig и стабильные коды выхода
"""

import logging

from django.core.management.base import BaseCommand, CommandError

from core.exceptions import (
    ContaminationError,
    EngineError,
    EvaluationAbortedError,
    GatewayError,
    IterationAbortedError,
)
from core.run_config import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CONTAMINATION = 2
EXIT_BACKEND = 3


def parse_int_list(value):
    if value is None:
        return None
    try:
        return [int(item) for item in str(value).split(',') if item.strip()]
    except ValueError:
        raise CommandError(f"Expected a comma-separated list of integers, got {value!r}", returncode=EXIT_CONFIG)


class EngineCommand(BaseCommand):
    """Команда, работающая от RunConfig (--config, --out, --seed и собственные флаги)"""

    required_settings = ()

    def add_arguments(self, parser):
        parser.add_argument('--config', help='TOML-файл конфигурации прогона')
        parser.add_argument('--out', help='Каталог результатов')
        parser.add_argument('--seed', type=int, help='Seed для выборок движка')
        self.add_engine_arguments(parser)

    def add_engine_arguments(self, parser):
        pass

    def overrides(self, options):
        """Значения флагов, переопределяющие файл конфигурации"""
        return {}

    def run(self, config: RunConfig, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        overrides = {'out': options.get('out'), 'seed': options.get('seed')}
        overrides.update(self.overrides(options))
        try:
            config = RunConfig.from_sources(options.get('config'), overrides)
            config.validate(self.required_settings)
            self.run(config, options)
        except ContaminationError as e:
            raise CommandError(str(e), returncode=EXIT_CONTAMINATION)
        except (GatewayError, EvaluationAbortedError, IterationAbortedError) as e:
            logger.error(f"Backend failure: {e}")
            raise CommandError(str(e), returncode=EXIT_BACKEND)
        except EngineError as e:
            raise CommandError(str(e), returncode=EXIT_CONFIG)

    def table(self, header, rows):
        """Простая текстовая таблица для stdout"""
        widths = [len(str(cell)) for cell in header]
        for row in rows:
            widths = [max(width, len(str(cell))) for width, cell in zip(widths, row)]
        line = ' | '.join(str(cell).ljust(width) for cell, width in zip(header, widths))
        self.stdout.write(line)
        self.stdout.write('-' * len(line))
        for row in rows:
            self.stdout.write(' | '.join(str(cell).ljust(width) for cell, width in zip(row, widths)))
