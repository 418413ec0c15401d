"""
=============================================================================
numerics/ops.py - Дифференцируемые операции над матрицами
=============================================================================

Все операции принимают узлы ленты (numerics.tape.Node) и записывают результат
на ту же ленту вместе с правилом обратного хода. Поэлементные бинарные
операции поддерживают numpy-broadcasting по осям размера 1; градиент по
такой оси суммируется обратно.

Правила обратного хода вынесены в функции уровня модуля (_*_grad), поэтому
их можно подменить в тестах и убедиться, что проверка градиентов ловит
ошибку.

=============================================================================
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from config import BN_EPS, BN_MOMENTUM, LEAKY_SLOPE
from errors import ContractError, NumericalDomainError, ShapeError
from .tape import Node


# =============================================================================
# ВСПОМОГАТЕЛЬНЫЕ ФУНКЦИИ
# =============================================================================

def _broadcast_shape(a: Node, b: Node, op: str):
    shape = []
    for da, db in zip(a.value.shape, b.value.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: несовместимые формы {a.value.shape} и {b.value.shape}")
        shape.append(max(da, db))
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Суммирует градиент по осям, которые были растянуты broadcasting'ом"""
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericalDomainError(f"{op}: получено нечисловое значение (NaN/Inf)")
    return value


# =============================================================================
# ЛИНЕЙНАЯ АЛГЕБРА
# =============================================================================

def matmul(a: Node, b: Node) -> Node:
    """C = A·B; обратный ход dA = dC·Bᵀ, dB = Aᵀ·dC"""
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: несовместимые формы {a.value.shape} и {b.value.shape}")
    av, bv = a.value, b.value
    return a.tape.record("matmul", av @ bv, (a, b), lambda g: _matmul_grad(g, av, bv))


def _matmul_grad(g, av, bv):
    return g @ bv.T, av.T @ g


def transpose(a: Node) -> Node:
    return a.tape.record("transpose", a.value.T.copy(), (a,), lambda g: (g.T.copy(),))


def reshape(a: Node, rows: int, cols: int) -> Node:
    """Row-major переформатирование (используется для flatten в FC-оценщике)"""
    if rows * cols != a.value.size:
        raise ShapeError(f"reshape: нельзя привести {a.value.shape} к ({rows}, {cols})")
    shape = a.value.shape
    return a.tape.record("reshape", a.value.reshape(rows, cols).copy(), (a,),
                         lambda g: (g.reshape(shape).copy(),))


def group_matmul(a: Node, b: Node, groups: int, transpose_b: bool = False) -> Node:
    """
    Блочное умножение: строки a и b делятся на groups равных блоков подряд,
    блок k результата = A_k·B_k (или A_k·B_kᵀ при transpose_b).

    Так графы всех запросов шага считаются одной операцией без
    перекрёстных слагаемых между запросами.
    """
    av, bv = a.value, b.value
    if groups < 1 or av.shape[0] % groups or bv.shape[0] % groups:
        raise ShapeError(f"group_matmul: {av.shape} и {bv.shape} не делятся на {groups} блоков")
    A = av.reshape(groups, av.shape[0] // groups, av.shape[1])
    B = bv.reshape(groups, bv.shape[0] // groups, bv.shape[1])
    inner_b = B.shape[2] if transpose_b else B.shape[1]
    if A.shape[2] != inner_b:
        raise ShapeError(f"group_matmul: блоки {A.shape[1:]} и {B.shape[1:]} несовместимы")
    out = A @ (B.transpose(0, 2, 1) if transpose_b else B)
    return a.tape.record("group_matmul", out.reshape(-1, out.shape[2]), (a, b),
                         lambda g: _group_matmul_grad(g, A, B, transpose_b))


def _group_matmul_grad(g, A, B, transpose_b):
    G = g.reshape(A.shape[0], A.shape[1], -1)
    if transpose_b:
        dA, dB = G @ B, G.transpose(0, 2, 1) @ A
    else:
        dA, dB = G @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ G
    return dA.reshape(-1, A.shape[2]), dB.reshape(-1, B.shape[2])


# =============================================================================
# ПОЭЛЕМЕНТНЫЕ ОПЕРАЦИИ
# =============================================================================

def add(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "add")
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record("add", a.value + b.value, (a, b),
                         lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record("sub", a.value - b.value, (a, b),
                         lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape.record("mul", av * bv, (a, b),
                         lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a: Node, b: Node) -> Node:
    _broadcast_shape(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise NumericalDomainError("div: деление на ноль")
    out = av / bv
    return a.tape.record("div", out, (a, b),
                         lambda g: (_unbroadcast(g / bv, av.shape),
                                    _unbroadcast(-g * out / bv, bv.shape)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record("add_scalar", a.value + c, (a,), lambda g: (g,))


def neg(a: Node) -> Node:
    return scale(a, -1.0)


def exp(a: Node) -> Node:
    out = _check_finite(np.exp(a.value), "exp")
    return a.tape.record("exp", out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    av = a.value
    if np.any(av <= 0.0):
        raise NumericalDomainError("log: аргумент должен быть положительным")
    return a.tape.record("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a: Node) -> Node:
    av = a.value
    if np.any(av < 0.0):
        raise NumericalDomainError("sqrt: отрицательный аргумент")
    out = np.sqrt(av)
    return a.tape.record("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def softplus(a: Node) -> Node:
    """log(1 + e^x) в устойчивой форме; производная - сигмоида"""
    av = a.value
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return a.tape.record("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def leaky_relu(a: Node, slope: float = LEAKY_SLOPE) -> Node:
    """
    x при x >= 0, иначе slope·x.
    В нуле используется наклон отрицательной полуоси.

    Исключения:
        ContractError: slope вне (0, 1]
    """
    if not 0.0 < slope <= 1.0:
        raise ContractError(f"leaky_relu: наклон {slope} вне (0, 1]")
    av = a.value
    out = np.where(av >= 0.0, av, slope * av)
    return a.tape.record("leaky_relu", out, (a,), lambda g: (_leaky_relu_grad(g, av, slope),))


def _leaky_relu_grad(g, av, slope):
    return g * np.where(av > 0.0, 1.0, slope)


# =============================================================================
# РЕДУКЦИИ
# =============================================================================

def sum_all(a: Node) -> Node:
    shape = a.value.shape
    return a.tape.record("sum", np.array([[a.value.sum()]]), (a,),
                         lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Node, axis: Optional[int] = None) -> Node:
    """Среднее по всей матрице (1×1), по строкам (axis=0 -> 1×C) или столбцам (axis=1 -> R×1)"""
    shape = a.value.shape
    if axis is None:
        n = a.value.size
        return a.tape.record("mean", np.array([[a.value.mean()]]), (a,),
                             lambda g: (np.full(shape, g[0, 0] / n),))
    n = shape[axis]
    out = a.value.mean(axis=axis, keepdims=True)
    return a.tape.record("mean", out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_logsumexp(a: Node) -> Node:
    """log Σ_j exp(a_ij) по каждой строке (R×1), со сдвигом на максимум"""
    av = a.value
    m = av.max(axis=1, keepdims=True)
    shifted = np.exp(av - m)
    total = shifted.sum(axis=1, keepdims=True)
    out = m + np.log(total)
    probs = shifted / total
    return a.tape.record("row_logsumexp", out, (a,), lambda g: (g * probs,))


def row_softmax(a: Node) -> Node:
    """Softmax по строкам со сдвигом на максимум строки"""
    av = a.value
    shifted = np.exp(av - av.max(axis=1, keepdims=True))
    out = shifted / shifted.sum(axis=1, keepdims=True)
    return a.tape.record("row_softmax", out, (a,), lambda g: (_row_softmax_grad(g, out),))


def _row_softmax_grad(g, out):
    return out * (g - (g * out).sum(axis=1, keepdims=True))


# =============================================================================
# НОРМИРОВКА И СХОЖЕСТЬ
# =============================================================================

def l2_normalize_rows(a: Node, what: str = "строка") -> Node:
    """Делит каждую строку на её L2-норму; нулевая норма - ошибка"""
    av = a.value
    norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
    zero = np.flatnonzero(norms[:, 0] == 0.0)
    if zero.size:
        raise NumericalDomainError(f"l2_normalize_rows: {what} {int(zero[0])} имеет нулевую норму")
    out = av / norms
    return a.tape.record("l2_normalize_rows", out, (a,),
                         lambda g: ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,))


def cosine_rows(a: Node, b: Node) -> Node:
    """Матрица косинусов между строками a (P×D) и строками b (Q×D) -> P×Q"""
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeError(f"cosine_rows: несовместимые формы {a.value.shape} и {b.value.shape}")
    return matmul(l2_normalize_rows(a, "строка запроса"),
                  transpose(l2_normalize_rows(b, "прототип")))


# =============================================================================
# ИНДЕКСАЦИЯ И СКЛЕЙКА
# =============================================================================

def gather_rows(a: Node, idx: Sequence[int]) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)
    return a.tape.record("gather_rows", a.value[idx].copy(), (a,), vjp)


def gather_per_row(a: Node, idx: Sequence[int]) -> Node:
    """Столбец R×1: out[r] = a[r, idx[r]]"""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.value.shape[0])
    if idx.shape != rows.shape:
        raise ShapeError(f"gather_per_row: {idx.size} индексов для {a.value.shape[0]} строк")
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[1]):
        raise ContractError(f"gather_per_row: индекс вне [0, {a.value.shape[1]})")
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g[:, 0]
        return (out,)
    return a.tape.record("gather_per_row", a.value[rows, idx].reshape(-1, 1), (a,), vjp)


def concat_cols(parts: Sequence[Node]) -> Node:
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: разное число строк {[p.value.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.value.shape[1] for p in parts])
    out = np.concatenate([p.value for p in parts], axis=1)
    return parts[0].tape.record(
        "concat_cols", out, tuple(parts),
        lambda g: tuple(g[:, bounds[i]:bounds[i + 1]].copy() for i in range(len(parts))))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    shape = a.value.shape
    if not 0 <= start < stop <= shape[1]:
        raise ShapeError(f"slice_cols: диапазон [{start}, {stop}) вне {shape}")

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)
    return a.tape.record("slice_cols", a.value[:, start:stop].copy(), (a,), vjp)


def split_cols(a: Node, sizes: Sequence[int]) -> List[Node]:
    if sum(sizes) != a.value.shape[1]:
        raise ShapeError(f"split_cols: сумма {list(sizes)} не равна {a.value.shape[1]}")
    parts, start = [], 0
    for size in sizes:
        parts.append(slice_cols(a, start, start + size))
        start += size
    return parts


# =============================================================================
# BATCH NORMALIZATION
# =============================================================================

@dataclass
class BatchNormBuffers:
    """Скользящие статистики одного BN-слоя (не обучаются градиентом)"""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, channels: int, momentum: float = BN_MOMENTUM) -> "BatchNormBuffers":
        return cls(np.zeros((1, channels)), np.ones((1, channels)), momentum)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * batch_mean
        self.running_var = (1.0 - m) * self.running_var + m * batch_var


StatsSink = Callable[[np.ndarray, np.ndarray], None]


def batch_norm(a: Node, gamma: Node, beta: Node, buffers: BatchNormBuffers,
               mode: str = "train", eps: float = BN_EPS,
               on_stats: Optional[StatsSink] = None, groups: int = 1) -> Node:
    """
    Batch Normalization по строкам (узлам графа) для каждого столбца.

    Параметры:
        a (Node): матрица R×C
        gamma, beta (Node): аффинные параметры 1×C
        buffers (BatchNormBuffers): скользящие статистики
        mode (str): 'train' - статистики текущего батча, 'eval' - скользящие
        on_stats: куда отдать статистики батча (mean, несмещённая var),
                  каждая формы groups×C, вместо немедленного обновления buffers
        groups (int): строки делятся на groups равных блоков подряд, в
                      train-режиме статистики считаются по каждому блоку
                      отдельно (блок - граф одного запроса)

    Исключения:
        ShapeError: R не делится на groups
        ContractError: train-режим с одной строкой в блоке
    """
    av = a.value
    rows, cols = av.shape
    if gamma.value.shape != (1, cols) or beta.value.shape != (1, cols):
        raise ShapeError(f"batch_norm: параметры {gamma.value.shape}/{beta.value.shape} для {av.shape}")
    if groups < 1 or rows % groups:
        raise ShapeError(f"batch_norm: {rows} строк не делятся на {groups} блоков")
    gv, bv = gamma.value, beta.value

    if mode == "eval":
        inv = 1.0 / np.sqrt(buffers.running_var + eps)
        xhat = (av - buffers.running_mean) * inv
        out = gv * xhat + bv
        return a.tape.record(
            "batch_norm_eval", out, (a, gamma, beta),
            lambda g: (g * gv * inv, (g * xhat).sum(axis=0, keepdims=True),
                       g.sum(axis=0, keepdims=True)))

    if mode != "train":
        raise ContractError(f"batch_norm: неизвестный режим '{mode}'")
    n = rows // groups
    if n < 2:
        raise ContractError("batch_norm: в train-режиме нужно минимум 2 строки в блоке")

    x = av.reshape(groups, n, cols)
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = gv * xhat.reshape(rows, cols) + bv

    batch_mean = mu.reshape(groups, cols)
    unbiased = var.reshape(groups, cols) * n / (n - 1)
    if on_stats is not None:
        on_stats(batch_mean, unbiased)
    else:
        for k in range(groups):
            buffers.update(batch_mean[k:k + 1], unbiased[k:k + 1])

    return a.tape.record("batch_norm", out, (a, gamma, beta),
                         lambda g: _batch_norm_grad(g, xhat, inv, gv))


def _batch_norm_grad(g, xhat, inv, gv):
    groups, n, cols = xhat.shape
    dxhat = (g * gv).reshape(groups, n, cols)
    dx = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    flat = xhat.reshape(-1, cols)
    return dx.reshape(-1, cols), (g * flat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)
