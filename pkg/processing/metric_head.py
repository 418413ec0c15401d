"""
=============================================================================
processing/metric_head.py - Базовый метрический классификатор (Meta-Base)
=============================================================================

Этот модуль содержит детерминированный путь классификации:
1. Прототип класса - среднее эмбеддингов его support-примеров
2. Логит пары "запрос-прототип" - τ·cos(z, c_j)
3. Потери - кросс-энтропия по softmax логитов

Температура τ хранится как exp(ρ) с неограниченным ρ, поэтому остаётся
положительной при любых шагах оптимизатора.

=============================================================================
"""

from typing import Optional, Sequence, Union

import numpy as np

from errors import ContractError, ShapeError
from numerics import Node, Tape, ops
from .episodic import Episode


# =============================================================================
# ПРОТОТИПЫ
# =============================================================================

def compute_prototypes(episode: Episode, adapter: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Прототипы эпизода: строка j - среднее support-эмбеддингов класса j.

    Параметры:
        episode: эпизод
        adapter: необязательная матрица D×D, применяемая к эмбеддингам

    Возвращает:
        np.ndarray: N×D
    """
    support = episode.support_matrix()
    if adapter is not None:
        support = support @ adapter
    return np.stack([
        support[j * episode.shot:(j + 1) * episode.shot].mean(axis=0)
        for j in range(episode.way)
    ])


def prototypes_node(tape: Tape, support: Node, episode: Episode) -> Node:
    """Прототипы на ленте: A·S, где A усредняет строки по классам"""
    return ops.matmul(tape.constant(episode.averaging_matrix()), support)


# =============================================================================
# ЛОГИТЫ И ПОТЕРИ
# =============================================================================

def temperature(rho: Node) -> Node:
    """τ = exp(ρ)"""
    return ops.exp(rho)


def cosine_logits(query: Node, protos: Node, tau: Node) -> Node:
    """
    Логиты τ·cos(query, c_j).

    Параметры:
        query (Node): 1×D (или Q×D - тогда Q строк логитов)
        protos (Node): N×D
        tau (Node): 1×1

    Возвращает:
        Node: 1×N (Q×N)

    Исключения:
        NumericalDomainError: нулевая норма запроса или прототипа
    """
    return ops.mul(ops.cosine_rows(query, protos), tau)


def stage1_logits(query: Node, weights: Node, tau: Node) -> Node:
    """Логиты косинусного классификатора по всем base-классам (строки W - прототипы)"""
    return cosine_logits(query, weights, tau)


def ce_loss(logits: Node, label: Union[int, Sequence[int]]) -> Node:
    """
    Кросс-энтропия -log softmax(logits)[label] через log-sum-exp.

    Параметры:
        logits (Node): Q×N
        label: индекс истинного класса в [0, N) (Q = 1) или Q индексов

    Возвращает:
        Node: Q×1
    """
    labels = [int(label)] if np.isscalar(label) else [int(v) for v in label]
    rows, n = logits.value.shape
    if len(labels) != rows:
        raise ShapeError(f"ce_loss: {len(labels)} меток для {rows} строк логитов")
    for value in labels:
        if not 0 <= value < n:
            raise ContractError(f"ce_loss: метка {value} вне [0, {n})")
    return ops.sub(ops.row_logsumexp(logits), ops.gather_per_row(logits, labels))


def predict(queries: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """
    Решающее правило: argmax_j cos(query, c_j) для каждой строки queries.
    τ и softmax не меняют argmax; при равенстве выигрывает меньший индекс.
    """
    tape = Tape()
    cos = ops.cosine_rows(tape.constant(queries), tape.constant(protos)).value
    return np.argmax(cos, axis=1)
