"""
=============================================================================
numerics/gradcheck.py - Проверка градиентов конечными разностями
=============================================================================

Сравнивает градиенты ленты с центральными разностями
    (f(x + h·e_k) - f(x - h·e_k)) / 2h
по каждому элементу каждого листа. Ошибка группы параметров:
    ||a - n||_inf / max(||a||_inf, ||n||_inf, floor)
floor отсекает шум округления, когда истинный градиент группы близок к нулю;
по умолчанию 1e-3, настраивается через gradcheck.scale_floor.

=============================================================================
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from config import GRADCHECK_SCALE_FLOOR, GRADCHECK_STEP, GRADCHECK_TOLERANCE
from .tape import Node, Tape, backward


# Строит скалярную функцию потерь на ленте из словаря листьев
LossBuilder = Callable[[Tape, Dict[str, Node]], Node]


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   floor: float = GRADCHECK_SCALE_FLOOR) -> float:
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic)) if analytic.size else 0.0,
                np.max(np.abs(numeric)) if numeric.size else 0.0,
                floor)
    return float(diff / scale)


def _evaluate(build: LossBuilder, values: Mapping[str, np.ndarray]):
    tape = Tape()
    leaves = {name: tape.leaf(value, name) for name, value in values.items()}
    root = build(tape, leaves)
    return tape, root


def analytic_gradients(build: LossBuilder, values: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    tape, root = _evaluate(build, values)
    return backward(tape, root)


def numeric_gradient(build: LossBuilder, values: Mapping[str, np.ndarray],
                     name: str, h: float = GRADCHECK_STEP) -> np.ndarray:
    """Центральные разности по всем элементам листа name"""
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in values.items()}
    target = work[name]
    grad = np.zeros_like(target)
    for idx in np.ndindex(target.shape):
        original = target[idx]
        target[idx] = original + h
        plus = _evaluate(build, work)[1].value[0, 0]
        target[idx] = original - h
        minus = _evaluate(build, work)[1].value[0, 0]
        target[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


@dataclass
class GradcheckReport:
    """Результат проверки: максимальная относительная ошибка по группам"""
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failed_groups(self) -> List[str]:
        return [g for g, err in self.errors.items() if not err < self.tolerance]


def check_gradients(build: LossBuilder, values: Mapping[str, np.ndarray],
                    groups: Optional[Mapping[str, List[str]]] = None,
                    h: float = GRADCHECK_STEP,
                    tolerance: float = GRADCHECK_TOLERANCE,
                    floor: float = GRADCHECK_SCALE_FLOOR) -> GradcheckReport:
    """
    Проверяет градиенты всех листьев.

    Параметры:
        build: функция (tape, leaves) -> скалярный узел потерь; должна быть
               детерминированной (случайность заморожена снаружи)
        values: имя листа -> значение
        groups: имя группы -> список листьев; по умолчанию группа на лист
        floor: нижняя граница знаменателя ошибки (config.GRADCHECK_SCALE_FLOOR)

    Возвращает:
        GradcheckReport
    """
    if groups is None:
        groups = {name: [name] for name in values}
    analytic = analytic_gradients(build, values)
    report = GradcheckReport(tolerance=tolerance)
    for group, names in groups.items():
        a = np.concatenate([analytic[n].ravel() for n in names]) if names else np.zeros(0)
        n = np.concatenate([numeric_gradient(build, values, nm, h).ravel() for nm in names]) \
            if names else np.zeros(0)
        report.errors[group] = relative_error(a, n, floor)
    return report
