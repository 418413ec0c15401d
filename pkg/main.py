"""
=============================================================================
main.py - Точка входа командной строки
=============================================================================

Подкоманды:
1. gen       - сгенерировать синтетические base/novel файлы эмбеддингов
2. train     - двухэтапное обучение (чекпоинт + лог)
3. eval      - оценка чекпоинта: mean +- ci95 по эпизодам
4. ablate    - сетка неопределённости по этапам и сравнение оценщиков
5. gradcheck - проверка градиентов конечными разностями

Один JSON-конфиг на запуск; --set ключ=значение переопределяет отдельные
ключи (флаг побеждает файл), итоговый конфиг сохраняется в директорию
результатов как effective_config.json.

Коды возврата: 0 успех, 1 использование, 2 конфиг, 3 данные, 4 численная
проверка.

Пример:
    python main.py gen --out storage/data
    python main.py train --config run.json --set train.stage2.uncertainty=true --threads 4
    python main.py eval --config run.json --checkpoint storage/runs/model.ckpt

=============================================================================
"""

import argparse
import sys
from typing import List, Optional

from config import EXIT_DATA, EXIT_USAGE
from errors import UafsError
from processing.console import safe_print
from processing.models import load_run_config
from processing.orchestrator import run_command
from processing.storage import output_dir

# Модуль метрик необязателен
try:
    import metrics
    METRICS_ENABLED = True
except ImportError:
    METRICS_ENABLED = False


class UsageExit(Exception):
    def __init__(self, message: str):
        super().__init__(message)


class CliParser(argparse.ArgumentParser):
    """argparse с кодом возврата 1 при ошибке использования"""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: ошибка: {message}\n")
        raise UsageExit(message)


COMMAND_HELP = {
    'gen': 'сгенерировать синтетические base/novel файлы эмбеддингов',
    'train': 'двухэтапное обучение головы и оценщика неопределённости',
    'eval': 'оценка чекпоинта на novel-эпизодах',
    'ablate': 'сетка неопределённости по этапам и сравнение оценщиков',
    'gradcheck': 'проверка градиентов конечными разностями',
}


def build_parser() -> CliParser:
    parser = CliParser(prog='uafs', description='Few-shot классификация с учётом неопределённости схожести')
    sub = parser.add_subparsers(dest='command', parser_class=CliParser, metavar='КОМАНДА')
    sub.required = True
    for name, help_text in COMMAND_HELP.items():
        cmd = sub.add_parser(name, help=help_text, description=help_text)
        cmd.add_argument('--config', help='JSON-конфиг запуска')
        cmd.add_argument('--set', dest='overrides', action='append', default=[], metavar='КЛЮЧ=ЗНАЧЕНИЕ',
                         help='переопределить ключ конфига, например train.seed=3')
        cmd.add_argument('--threads', type=int, help='число потоков (результат от него не зависит)')
        cmd.add_argument('--out', help='директория результатов')
        cmd.add_argument('--metrics-file', help='сохранить метрики Prometheus в файл')
        if name == 'eval':
            cmd.add_argument('--checkpoint', help='чекпоинт (по умолчанию <out>/model.ckpt)')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Разбирает аргументы и выполняет команду.

    Возвращает:
        int: код возврата
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageExit:
        return EXIT_USAGE

    overrides = list(args.overrides)
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    try:
        config = load_run_config(args.config, overrides)
        if args.out:
            config = config.model_copy(update={'output_dir': args.out})
        out = output_dir(config)
    except UafsError as e:
        safe_print(f">>> [ERROR] {type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        safe_print(f">>> [ERROR] Ошибка ввода-вывода: {e.filename or ''} {e.strerror or e}")
        return EXIT_DATA

    kwargs = {'checkpoint': args.checkpoint} if args.command == 'eval' else {}
    code = run_command(args.command, config, out, **kwargs)

    if args.metrics_file and METRICS_ENABLED:
        metrics.write_metrics_file(args.metrics_file)
    return code


if __name__ == "__main__":
    sys.exit(main())
