"""
=============================================================================
errors.py - Иерархия исключений проекта
=============================================================================

Каждое исключение несёт код возврата CLI, чтобы оркестратор мог превратить
любую ошибку в корректный exit code без дополнительных таблиц.

=============================================================================
"""

from typing import Optional

from config import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC


class UafsError(Exception):
    """Базовое исключение проекта"""
    exit_code = EXIT_DATA


class ShapeError(UafsError):
    """Несовместимые размерности матриц"""
    exit_code = EXIT_NUMERIC


class ContractError(UafsError):
    """Нарушено предусловие операции (например, нескалярный корень backward)"""
    exit_code = EXIT_NUMERIC


class NumericalDomainError(UafsError):
    """Значение вне области определения: нулевая норма, NaN/Inf"""
    exit_code = EXIT_NUMERIC


class ConfigError(UafsError):
    """Ошибка конфигурации или схемы"""
    exit_code = EXIT_CONFIG


class DataError(UafsError):
    """Некорректные данные: метки вне диапазона, пересечение сплитов и т.п."""
    exit_code = EXIT_DATA


class ParseError(DataError):
    """Ошибка разбора файла эмбеддингов с номером строки"""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class HeaderError(ParseError):
    """Первая строка файла - не заголовок формата или dim < 1"""


class ValueCountError(ParseError):
    """Число значений в строке не совпадает с dim заголовка"""


class DuplicateIdError(ParseError):
    """id записи уже встречался в файле"""


class GradcheckFailure(UafsError):
    """Аналитический градиент расходится с конечными разностями"""
    exit_code = EXIT_NUMERIC
