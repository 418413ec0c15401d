"""
=============================================================================
processing/storage.py - Чекпоинты и директория результатов
=============================================================================

Чекпоинт - текстовый файл, удобный для diff:

    UAFS-CKPT v1
    L=<L>
    estimator=<graph|conv|fc|none>
    n_way=<N или ->
    slope=<наклон LeakyReLU>
    base_labels=<метки через запятую>
    tensor <имя> <строк> <столбцов>
    <строка чисел, 17 значащих цифр>
    ...

Тензоры идут в порядке: temperature.rho, adapter.weight,
classifier.weight, estimator.* (параметры, затем буферы BN). Если удалить
все estimator.*, файл загрузится как модель без оценщика.

=============================================================================
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, DEFAULT_OUTPUT_DIR, FLOAT_DIGITS, LEAKY_SLOPE
from errors import ParseError
from numerics.ops import BatchNormBuffers
from .console import safe_print
from .models import RunConfig
from .trainer import ADAPTER, CLASSIFIER, ESTIMATOR_PREFIX, RHO, TrainState
from .uncertainty import BN_LAYERS, EstimatorParams, tensor_layout


HEADER_KEYS = ('L', 'estimator', 'n_way', 'slope', 'base_labels')
BUFFER_SUFFIXES = ('running_mean', 'running_var')


# =============================================================================
# ЗАПИСЬ
# =============================================================================

def _format_row(row: np.ndarray) -> str:
    return " ".join(format(float(v), f".{FLOAT_DIGITS}g") for v in row)


def checkpoint_tensors(state: TrainState) -> List[Tuple[str, np.ndarray]]:
    """Все тензоры чекпоинта в порядке записи"""
    tensors = list(state.parameters().items())
    if state.estimator is not None:
        for layer, buf in state.estimator.buffers.items():
            tensors.append((f"{ESTIMATOR_PREFIX}{layer}.running_mean", buf.running_mean))
            tensors.append((f"{ESTIMATOR_PREFIX}{layer}.running_var", buf.running_var))
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    """Сохраняет состояние модели (без слотов оптимизатора)"""
    est = state.estimator
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"L={est.L if est is not None else '-'}",
        f"estimator={state.estimator_kind}",
        f"n_way={est.n_way if est is not None and est.n_way else '-'}",
        f"slope={format(est.slope if est is not None else LEAKY_SLOPE, f'.{FLOAT_DIGITS}g')}",
        f"base_labels={','.join(str(c) for c in state.base_labels)}",
    ]
    for name, value in checkpoint_tensors(state):
        lines.append(f"tensor {name} {value.shape[0]} {value.shape[1]}")
        lines.extend(_format_row(row) for row in value)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# =============================================================================
# ЧТЕНИЕ
# =============================================================================

def _read_tensors(lines: List[str], start: int, path: str) -> Dict[str, np.ndarray]:
    tensors: Dict[str, np.ndarray] = {}
    i = start
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if len(parts) != 4 or parts[0] != "tensor":
            raise ParseError(f"ожидалось 'tensor <имя> <строк> <столбцов>', получено '{lines[i]}'",
                             i + 1, path)
        name = parts[1]
        try:
            rows, cols = int(parts[2]), int(parts[3])
        except ValueError:
            raise ParseError(f"некорректная форма тензора '{name}'", i + 1, path) from None
        if name in tensors:
            raise ParseError(f"тензор '{name}' встречается дважды", i + 1, path)
        if i + rows >= len(lines):
            raise ParseError(f"тензор '{name}': файл обрывается", i + 1, path)
        data = np.empty((rows, cols))
        for r in range(rows):
            line_no = i + 2 + r
            values = lines[i + 1 + r].split()
            if len(values) != cols:
                raise ParseError(f"тензор '{name}': {len(values)} чисел вместо {cols}", line_no, path)
            try:
                data[r] = [float(v) for v in values]
            except ValueError:
                raise ParseError(f"тензор '{name}': не число", line_no, path) from None
            if not np.all(np.isfinite(data[r])):
                raise ParseError(f"тензор '{name}': NaN/Inf", line_no, path)
        tensors[name] = data
        i += 1 + rows
    return tensors


def _require(tensors: Dict[str, np.ndarray], name: str, path: str) -> np.ndarray:
    if name not in tensors:
        raise ParseError(f"нет тензора '{name}'", path=path)
    return tensors[name]


def load_checkpoint(path, seed: int = 1) -> TrainState:
    """
    Загружает чекпоинт.

    Исключения:
        ParseError: формат нарушен (с номером строки)
        OSError: файл не читается
    """
    path = str(path)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}":
        raise ParseError(f"ожидался заголовок '{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}'", 1, path)

    header: Dict[str, str] = {}
    for i, key in enumerate(HEADER_KEYS, start=2):
        if i > len(lines) or not lines[i - 1].startswith(f"{key}="):
            raise ParseError(f"ожидалась строка '{key}=...'", i, path)
        header[key] = lines[i - 1][len(key) + 1:].strip()
    tensors = _read_tensors(lines, len(HEADER_KEYS) + 1, path)

    rho = _require(tensors, RHO, path)
    adapter = _require(tensors, ADAPTER, path)
    classifier = _require(tensors, CLASSIFIER, path)
    try:
        base_labels = tuple(int(c) for c in header['base_labels'].split(',') if c)
        slope = float(header['slope'])
    except ValueError:
        raise ParseError("некорректные base_labels или slope", path=path) from None
    if len(base_labels) != classifier.shape[0]:
        raise ParseError(f"{len(base_labels)} меток для {classifier.shape[0]} строк классификатора", path=path)

    estimator = _load_estimator(header, tensors, slope, path)
    return TrainState(dim=adapter.shape[0], rho=rho, adapter=adapter, classifier=classifier,
                      base_labels=base_labels, estimator=estimator, seed=seed)


def _load_estimator(header: Dict[str, str], tensors: Dict[str, np.ndarray], slope: float,
                    path: str) -> Optional[EstimatorParams]:
    kind = header['estimator']
    est_names = [n for n in tensors if n.startswith(ESTIMATOR_PREFIX)]
    if kind == 'none' or not est_names:
        return None
    try:
        L = int(header['L'])
        n_way = None if header['n_way'] == '-' else int(header['n_way'])
        layout = tensor_layout(kind, L, n_way)
    except Exception as e:
        raise ParseError(f"некорректный заголовок оценщика: {e}", path=path) from None

    params: Dict[str, np.ndarray] = {}
    for name, shape, _ in layout:
        value = _require(tensors, ESTIMATOR_PREFIX + name, path)
        if value.shape != shape:
            raise ParseError(f"тензор '{ESTIMATOR_PREFIX}{name}' формы {value.shape} вместо {shape}",
                             path=path)
        params[name] = value
    buffers = {}
    for layer in BN_LAYERS[kind]:
        mean, var = (_require(tensors, f"{ESTIMATOR_PREFIX}{layer}.{s}", path) for s in BUFFER_SUFFIXES)
        buffers[layer] = BatchNormBuffers(mean, var)
    return EstimatorParams(kind, L, params, buffers, n_way, slope)


# =============================================================================
# ДИРЕКТОРИЯ РЕЗУЛЬТАТОВ
# =============================================================================

def output_dir(config: RunConfig) -> Path:
    """output_dir конфига (туда же пишет флаг --out), иначе переменная окружения/умолчание"""
    path = Path(config.output_dir or DEFAULT_OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_effective_config(config: RunConfig, out: Path) -> Path:
    """Сохраняет итоговый конфиг (после переопределений) рядом с результатами"""
    target = out / "effective_config.json"
    with open(target, 'w', encoding='utf-8') as f:
        json.dump(config.model_dump(mode='json'), f, indent=2, ensure_ascii=False, sort_keys=True)
        f.write("\n")
    safe_print(f">>> [STORAGE] Конфиг запуска сохранён: {target}")
    return target
