"""
=============================================================================
dask_jobs/dask_processing.py - Параллельные вычисления с Dask
=============================================================================

Этот модуль распараллеливает независимые куски работы:
- прямой/обратный проход для каждого запроса внутри шага обучения
- оценку отдельных эпизодов

Используется dask.delayed + dask.compute с потоковым планировщиком.
compute возвращает результаты в порядке постановки задач, а редукция
всегда идёт в этом порядке, поэтому итог побитово одинаков при любом
количестве потоков.

=============================================================================
"""

from typing import Any, Callable, List, Optional, Sequence

from dask import compute, delayed


# =============================================================================
# КОНФИГУРАЦИЯ DASK
# =============================================================================

class DaskConfig:
    """Конфигурация планировщика"""
    DEFAULT_THREADS = 1  # Потоков по умолчанию (1 = синхронное выполнение)
    SCHEDULER = 'threads'  # Планировщик для числа потоков > 1


def scheduler_for(threads: Optional[int]) -> dict:
    """Аргументы dask.compute для заданного числа потоков"""
    threads = threads or DaskConfig.DEFAULT_THREADS
    if threads <= 1:
        return {'scheduler': 'synchronous'}
    return {'scheduler': DaskConfig.SCHEDULER, 'num_workers': threads}


# =============================================================================
# ПАРАЛЛЕЛЬНОЕ ОТОБРАЖЕНИЕ
# =============================================================================

def parallel_map(fn: Callable[..., Any], items: Sequence[Any], threads: Optional[int] = None) -> List[Any]:
    """
    Применяет fn к каждому элементу items параллельно.

    Параметры:
        fn: функция одного аргумента; не должна менять общее состояние
        items: элементы
        threads: число потоков (1 или None - последовательно)

    Возвращает:
        Список результатов в порядке items
    """
    if not items:
        return []
    if (threads or DaskConfig.DEFAULT_THREADS) <= 1:
        return [fn(item) for item in items]

    tasks = [delayed(fn, pure=False)(item) for item in items]
    results = compute(*tasks, **scheduler_for(threads))
    return list(results)
