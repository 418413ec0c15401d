"""
=============================================================================
metrics.py - Модуль кастомных метрик Prometheus для мониторинга
=============================================================================

Этот модуль определяет метрики обучения и оценки:

1. train_steps_total - количество шагов оптимизатора
2. train_step_duration_seconds - время одного шага
3. train_last_loss / train_temperature / train_mean_sigma - состояние обучения
4. eval_episodes_total - количество оценённых эпизодов
5. eval_duration_seconds - время полной оценки
6. gradcheck_max_error - ошибка проверки градиентов по группам
7. memory_usage_bytes - использование памяти

Метрики не нужны для корректности: модули импортируют этот файл через
try/except и работают без него. Команда CLI с флагом --metrics-file
сохраняет текстовое представление в файл (формат node_exporter textfile).

=============================================================================
"""

import time

import psutil
from prometheus_client import REGISTRY, Counter, Gauge, Histogram, write_to_textfile


# =============================================================================
# ОПРЕДЕЛЕНИЕ МЕТРИК
# =============================================================================

# Счетчик шагов оптимизатора
train_steps_total = Counter(
    'uafs_train_steps_total',
    'Общее количество шагов оптимизатора',
    ['stage', 'uncertainty']  # stage1/stage2, on/off
)

# Гистограмма времени шага обучения
train_step_duration_seconds = Histogram(
    'uafs_train_step_duration_seconds',
    'Время одного шага обучения в секундах',
    ['stage'],
    buckets=(0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1, 5, float('inf'))
)

train_last_loss = Gauge(
    'uafs_train_last_loss',
    'Значение потерь на последнем шаге',
    ['stage']
)

train_temperature = Gauge(
    'uafs_train_temperature',
    'Текущая температура τ'
)

train_mean_sigma = Gauge(
    'uafs_train_mean_sigma',
    'Средняя предсказанная σ на последнем шаге'
)

# Счетчик оценённых эпизодов
eval_episodes_total = Counter(
    'uafs_eval_episodes_total',
    'Общее количество оценённых эпизодов',
    ['way', 'shot']
)

eval_duration_seconds = Histogram(
    'uafs_eval_duration_seconds',
    'Время полной оценки в секундах',
    ['way', 'shot'],
    buckets=(0.1, 0.5, 1, 5, 10, 30, 60, 300, float('inf'))
)

eval_mean_accuracy = Gauge(
    'uafs_eval_mean_accuracy',
    'Средняя точность последней оценки'
)

gradcheck_max_error = Gauge(
    'uafs_gradcheck_max_error',
    'Максимальная относительная ошибка градиента по группе параметров',
    ['group']
)

# Gauge использования памяти процессом
memory_usage_bytes = Gauge(
    'uafs_memory_usage_bytes',
    'Использование памяти процессом в байтах',
    ['type']  # type: rss / vms / percent
)


# =============================================================================
# HELPER ФУНКЦИИ ДЛЯ ОБНОВЛЕНИЯ МЕТРИК
# =============================================================================

def update_memory_metrics():
    """Обновляет метрики памяти текущего процесса (psutil)"""
    try:
        process = psutil.Process()
        mem_info = process.memory_info()
        memory_usage_bytes.labels(type='rss').set(mem_info.rss)
        memory_usage_bytes.labels(type='vms').set(mem_info.vms)
        memory_usage_bytes.labels(type='percent').set(process.memory_percent())
    except Exception as e:
        print(f">>> Ошибка обновления метрик памяти: {e}")


def record_step_duration(stage: str, duration: float):
    train_step_duration_seconds.labels(stage=stage).observe(duration)


def record_train_step(stage: str, uncertainty: bool, loss: float):
    """
    Записывает метрики одного шага обучения.

    Параметры:
        stage (str): 'stage1' или 'stage2'
        uncertainty (bool): включено ли моделирование неопределённости
        loss (float): средние потери шага
    """
    train_steps_total.labels(stage=stage, uncertainty='on' if uncertainty else 'off').inc()
    train_last_loss.labels(stage=stage).set(loss)


def record_train_epoch(tau: float, mean_sigma: float):
    train_temperature.set(tau)
    if mean_sigma == mean_sigma:  # NaN, когда σ не считалась
        train_mean_sigma.set(mean_sigma)
    update_memory_metrics()


def record_evaluation(way: int, shot: int, episodes: int, mean_accuracy: float, duration: float):
    """
    Записывает метрики оценки.

    Параметры:
        way, shot (int): N и K эпизодов
        episodes (int): количество эпизодов E
        mean_accuracy (float): средняя точность
        duration (float): продолжительность в секундах
    """
    eval_episodes_total.labels(way=str(way), shot=str(shot)).inc(episodes)
    eval_duration_seconds.labels(way=str(way), shot=str(shot)).observe(duration)
    eval_mean_accuracy.set(mean_accuracy)
    update_memory_metrics()


def record_gradcheck(errors: dict):
    """errors: группа параметров -> относительная ошибка"""
    for group, err in errors.items():
        gradcheck_max_error.labels(group=group).set(err)


def write_metrics_file(path: str):
    """Сохраняет все метрики в текстовом формате Prometheus"""
    update_memory_metrics()
    write_to_textfile(path, REGISTRY)


# =============================================================================
# CONTEXT MANAGER ДЛЯ АВТОМАТИЧЕСКОГО ИЗМЕРЕНИЯ ВРЕМЕНИ
# =============================================================================

class MetricsTimer:
    """
    Контекстный менеджер для автоматического измерения времени выполнения.

    Пример использования:
        with MetricsTimer(metrics.record_step_duration, 'stage2'):
            loss = stage2_step(...)

    callback получает продолжительность именованным аргументом duration.
    """

    def __init__(self, callback, *args, **kwargs):
        self.callback = callback
        self.args = args
        self.kwargs = kwargs
        self.start_time = None
        self.duration = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.duration = time.perf_counter() - self.start_time
        if exc_type is None:
            self.callback(*self.args, duration=self.duration, **self.kwargs)
        return False


# =============================================================================
# ЭКСПОРТ
# =============================================================================

__all__ = [
    'train_steps_total',
    'train_step_duration_seconds',
    'train_last_loss',
    'train_temperature',
    'train_mean_sigma',
    'eval_episodes_total',
    'eval_duration_seconds',
    'eval_mean_accuracy',
    'gradcheck_max_error',
    'memory_usage_bytes',
    'update_memory_metrics',
    'record_step_duration',
    'record_train_step',
    'record_train_epoch',
    'record_evaluation',
    'record_gradcheck',
    'write_metrics_file',
    'MetricsTimer',
]
