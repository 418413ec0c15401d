"""
=============================================================================
numerics/tape.py - Лента обратного автоматического дифференцирования
=============================================================================

Каждая операция записывается на ленту узлом: тип операции, входные узлы,
вычисленное значение и правило обратного хода (vector-Jacobian product).
Узлы добавляются в порядке вычисления, поэтому лента всегда
топологически упорядочена, и backward просто проходит её с конца.

Лента строится заново на каждый шаг обучения и не разделяется между
потоками. Значения узлов - матрицы numpy float64 формы (rows, cols).

=============================================================================
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import ContractError, NumericalDomainError, ShapeError


# Правило обратного хода: градиент выхода -> градиенты входов (None = не нужен)
VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


# =============================================================================
# МАТРИЦЫ
# =============================================================================

def as_matrix(data, checked: bool = True) -> np.ndarray:
    """
    Приводит данные к двумерной матрице float64 (row-major).

    Параметры:
        data: число, вектор или матрица
        checked (bool): отклонять NaN/Inf

    Возвращает:
        np.ndarray: копия формы (rows, cols), rows, cols >= 1
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"Ожидалась матрица, получен массив с ndim={arr.ndim}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ShapeError(f"Пустая матрица формы {arr.shape}")
    if checked and not np.all(np.isfinite(arr)):
        raise NumericalDomainError("Матрица содержит NaN или Inf")
    return arr


# =============================================================================
# УЗЕЛ И ЛЕНТА
# =============================================================================

class Node:
    """Элемент вычислительного графа"""

    __slots__ = ("tape", "index", "op", "value", "inputs", "vjp",
                 "requires_grad", "name", "grad")

    def __init__(self, tape: "Tape", index: int, op: str, value: np.ndarray,
                 inputs: Tuple["Node", ...], vjp: Optional[VJP],
                 requires_grad: bool, name: Optional[str] = None):
        self.tape = tape
        self.index = index
        self.op = op
        self.value = value
        self.inputs = inputs
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Node#{self.index}<{self.op}{label} {self.value.shape}>"


class Tape:
    """Упорядоченный список записанных операций"""

    def __init__(self):
        self.nodes: List[Node] = []
        self._names: Dict[str, Node] = {}

    def _append(self, op, value, inputs, vjp, requires_grad, name=None) -> Node:
        node = Node(self, len(self.nodes), op, value, tuple(inputs), vjp,
                    requires_grad, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str, requires_grad: bool = True) -> Node:
        """Параметр или вход, по которому считается градиент"""
        if name in self._names:
            raise ContractError(f"Лист с именем '{name}' уже записан на ленту")
        node = self._append("leaf", as_matrix(value), (), None, requires_grad, name)
        self._names[name] = node
        return node

    def constant(self, value) -> Node:
        """Константа: градиент не нужен"""
        return self._append("const", as_matrix(value, checked=False), (), None, False)

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Node], vjp: VJP) -> Node:
        """Записывает результат операции"""
        for node in inputs:
            if node.tape is not self:
                raise ContractError(f"Узел {node} принадлежит другой ленте")
        requires_grad = any(node.requires_grad for node in inputs)
        return self._append(op, value, inputs, vjp if requires_grad else None, requires_grad)

    def __len__(self) -> int:
        return len(self.nodes)


# =============================================================================
# ОБРАТНЫЙ ХОД
# =============================================================================

def backward(tape: Tape, root: Node) -> Dict[str, np.ndarray]:
    """
    Вычисляет градиенты скалярного корня по всем именованным листьям.

    Параметры:
        tape (Tape): лента, на которой записан root
        root (Node): скаляр формы (1, 1)

    Возвращает:
        Dict[str, np.ndarray]: имя листа -> d(root)/d(лист); листья, от которых
        корень не зависит, получают нулевой градиент

    Исключения:
        ContractError: корень не скаляр или записан на другой ленте
    """
    if root.tape is not tape:
        raise ContractError("Корень записан на другой ленте")
    if root.value.shape != (1, 1):
        raise ContractError(f"Корень backward должен быть скаляром, получено {root.value.shape}")

    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones((1, 1))

    # Каждый узел посещается ровно один раз в обратном порядке записи
    for node in reversed(tape.nodes[:root.index + 1]):
        if node.grad is None or node.vjp is None:
            continue
        input_grads = node.vjp(node.grad)
        for parent, g in zip(node.inputs, input_grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.value.shape:
                raise ShapeError(
                    f"Правило '{node.op}' вернуло градиент {g.shape} для входа {parent.value.shape}")
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent.grad += g

    grads = {}
    for name, node in tape._names.items():
        if not node.requires_grad:
            continue
        grads[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads
