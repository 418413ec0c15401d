"""
=============================================================================
processing/uncertainty.py - Оценка неопределённости схожести и MC-потери
=============================================================================

Схожесть запроса z_i с прототипом c_j моделируется гауссианой N(μ_ij, σ_ij²):
- μ_ij = τ·cos(z_i, c_j) - логит базовой модели
- σ_ij оценивается совместно для всех N пар одного запроса графовой моделью;
  графы всех запросов эпизода считаются на одной ленте

Алгоритм графового оценщика:
1. Узел j - вектор групповых косинусов v_ij ∈ R^L (z и c_j делятся на
   L групп каналов подряд)
2. Рёбра E(j, j') = φ1(v_ij)·φ2(v_ij')ᵀ, строки нормируются softmax -> G
3. Обновление узлов V' = V + W_y(G·V·W_v), W_y - два блока
   (linear -> BN -> LeakyReLU)
4. σ = softplus(LeakyReLU(BN(V'·W_u1))·W_u2)

Для абляций есть Conv-оценщик (каждая пара отдельно, общий L->L->1) и
FC-оценщик (весь V целиком, параметры привязаны к одному N).

Потери: T сэмплов s_t = μ + σ⊙ε_t, вероятность истинного класса
усредняется по t, затем берётся -log.

=============================================================================
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import LEAKY_SLOPE, MC_SAMPLES
from errors import ConfigError, ContractError, NumericalDomainError, ShapeError
from numerics import Node, Rng, Tape, ops
from numerics.ops import BatchNormBuffers


# Куда отдать статистики BN-слоя: (имя слоя, mean, var)
LayerStatsSink = Callable[[str, np.ndarray, np.ndarray], None]


# =============================================================================
# ПАРАМЕТРЫ ОЦЕНЩИКА
# =============================================================================

# Порядок объявления тензоров (он же порядок в чекпоинте).
# Инициализация: 'fan_in' - U(-1/√fan_in, 1/√fan_in), 'zeros', 'ones'
def tensor_layout(kind: str, L: int, n_way: Optional[int]) -> List[Tuple[str, Tuple[int, int], str]]:
    if kind == 'graph':
        return [
            ('phi1.weight', (L, L), 'fan_in'),
            ('phi1.bias', (1, L), 'zeros'),
            ('phi2.weight', (L, L), 'fan_in'),
            ('phi2.bias', (1, L), 'zeros'),
            ('wv.weight', (L, L), 'fan_in'),
            ('wy1.weight', (L, L), 'fan_in'),
            ('wy1.bn.gamma', (1, L), 'ones'),
            ('wy1.bn.beta', (1, L), 'zeros'),
            ('wy2.weight', (L, L), 'fan_in'),
            ('wy2.bn.gamma', (1, L), 'ones'),
            ('wy2.bn.beta', (1, L), 'zeros'),
            ('wu1.weight', (L, L), 'fan_in'),
            ('wu1.bn.gamma', (1, L), 'ones'),
            ('wu1.bn.beta', (1, L), 'zeros'),
            ('wu2.weight', (L, 1), 'zeros'),
        ]
    if kind == 'conv':
        return [
            ('c1.weight', (L, L), 'fan_in'),
            ('c1.bias', (1, L), 'zeros'),
            ('c2.weight', (L, 1), 'zeros'),
        ]
    if kind == 'fc':
        if not n_way:
            raise ConfigError("FC-оценщику нужен фиксированный N")
        return [
            ('f1.weight', (n_way * L, L), 'fan_in'),
            ('f1.bias', (1, L), 'zeros'),
            ('f2.weight', (L, n_way), 'zeros'),
        ]
    raise ConfigError(f"Неизвестный тип оценщика '{kind}'")


BN_LAYERS = {'graph': ('wy1.bn', 'wy2.bn', 'wu1.bn'), 'conv': (), 'fc': ()}


@dataclass
class EstimatorParams:
    """
    Все обучаемые тензоры оценщика неопределённости.

    Поля:
        kind: 'graph' | 'conv' | 'fc'
        L: число групп каналов (формы graph/conv не зависят от N)
        tensors: имя -> матрица, в порядке объявления
        buffers: BN-слой -> скользящие статистики
        n_way: N, для которого создан FC-оценщик (иначе None)
        slope: наклон LeakyReLU
    """
    kind: str
    L: int
    tensors: Dict[str, np.ndarray]
    buffers: Dict[str, BatchNormBuffers] = field(default_factory=dict)
    n_way: Optional[int] = None
    slope: float = LEAKY_SLOPE

    def names(self) -> List[str]:
        return list(self.tensors.keys())

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(
            self.kind, self.L,
            {k: v.copy() for k, v in self.tensors.items()},
            {k: BatchNormBuffers(b.running_mean.copy(), b.running_var.copy(), b.momentum)
             for k, b in self.buffers.items()},
            self.n_way, self.slope)


def init_estimator(kind: str, L: int, rng: Rng, n_way: Optional[int] = None,
                   slope: float = LEAKY_SLOPE) -> EstimatorParams:
    """
    Создаёт параметры оценщика.

    W_u2 (и выходной слой conv/fc) инициализируется нулями, поэтому
    обучение стартует с равномерного σ = ln 2.
    """
    if L < 1:
        raise ConfigError(f"L должно быть >= 1, получено {L}")
    tensors: Dict[str, np.ndarray] = {}
    for name, shape, init in tensor_layout(kind, L, n_way):
        if init == 'fan_in':
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.child(name).uniform(-bound, bound, shape)
        elif init == 'ones':
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    buffers = {layer: BatchNormBuffers.create(L) for layer in BN_LAYERS[kind]}
    return EstimatorParams(kind, L, tensors, buffers, n_way if kind == 'fc' else None, slope)


def bind(tape: Tape, params: EstimatorParams, prefix: str = "estimator.",
         requires_grad: bool = True) -> Dict[str, Node]:
    """Записывает тензоры оценщика на ленту листьями prefix+имя"""
    if requires_grad:
        return {name: tape.leaf(value, prefix + name) for name, value in params.tensors.items()}
    return {name: tape.constant(value) for name, value in params.tensors.items()}


# =============================================================================
# ВЕРОЯТНОСТНАЯ СХОЖЕСТЬ
# =============================================================================

@dataclass
class SimilarityBelief:
    """Гауссово представление схожестей Q запросов: μ и σ (оба Q×N)"""
    mu: Node
    sigma: Node


@dataclass(frozen=True)
class McConfig:
    """T - число Монте-Карло сэмплов; shared_eps - один ε на все N пар сэмпла"""
    samples: int = MC_SAMPLES
    shared_eps: bool = False

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError(f"T должно быть >= 1, получено {self.samples}")


# =============================================================================
# ГРУППОВЫЕ ПРИЗНАКИ ОТНОШЕНИЯ
# =============================================================================

def group_indicator(dim: int, L: int) -> np.ndarray:
    """D×L матрица: B[d, l] = 1, если канал d входит в группу l"""
    if L < 1 or dim % L != 0:
        raise ShapeError(f"L={L} должно делить D={dim}")
    size = dim // L
    b = np.zeros((dim, L))
    for l in range(L):
        b[l * size:(l + 1) * size, l] = 1.0
    return b


def relation_features(query: Node, protos: Node, L: int) -> Node:
    """
    Признаки отношения для Q запросов и N прототипов.

    Строка q·N + j результата - вектор групповых косинусов запроса q и
    прототипа j, т.е. результат состоит из Q подряд идущих блоков N×L
    (по графу на запрос).

    Параметры:
        query (Node): Q×D
        protos (Node): N×D
        L (int): число групп, должно делить D

    Возвращает:
        Node: (Q·N)×L

    Исключения:
        ShapeError: L не делит D или размерности не совпадают
        NumericalDomainError: группа с нулевой нормой
    """
    tape = query.tape
    n_query, dim = query.value.shape
    n_way = protos.value.shape[0]
    if protos.value.shape[1] != dim:
        raise ShapeError(f"relation_features: формы {query.value.shape} и {protos.value.shape}")
    groups = tape.constant(group_indicator(dim, L))

    q_sq = ops.matmul(ops.mul(query, query), groups)
    c_sq = ops.matmul(ops.mul(protos, protos), groups)
    zero_q = np.argwhere(q_sq.value == 0.0)
    if zero_q.size:
        i, l = (int(v) for v in zero_q[0])
        raise NumericalDomainError(f"relation_features: нулевая норма группы l={l} запроса i={i}")
    zero_c = np.argwhere(c_sq.value == 0.0)
    if zero_c.size:
        j, l = (int(v) for v in zero_c[0])
        raise NumericalDomainError(f"relation_features: нулевая норма группы прототипа (j={j}, l={l})")

    q_idx = np.repeat(np.arange(n_query), n_way)
    c_idx = np.tile(np.arange(n_way), n_query)
    numerator = ops.matmul(ops.mul(ops.gather_rows(protos, c_idx), ops.gather_rows(query, q_idx)), groups)
    norms = ops.sqrt(ops.mul(ops.gather_rows(c_sq, c_idx), ops.gather_rows(q_sq, q_idx)))
    return ops.div(numerator, norms)


# =============================================================================
# ОЦЕНЩИКИ
# =============================================================================

def _block(x: Node, name: str, params: EstimatorParams, weights: Dict[str, Node],
           mode: str, on_stats: Optional[LayerStatsSink], groups: int) -> Node:
    """1×1 conv (linear) -> BN по узлам каждого графа -> LeakyReLU"""
    h = ops.matmul(x, weights[f"{name}.weight"])
    sink = None
    if on_stats is not None:
        layer = f"{name}.bn"
        sink = lambda mean, var: on_stats(layer, mean, var)
    h = ops.batch_norm(h, weights[f"{name}.bn.gamma"], weights[f"{name}.bn.beta"],
                       params.buffers[f"{name}.bn"], mode=mode, on_stats=sink, groups=groups)
    return ops.leaky_relu(h, params.slope)


def _weights(V: Node, params: EstimatorParams, weights: Optional[Dict[str, Node]]) -> Dict[str, Node]:
    if weights is None:
        return bind(V.tape, params, requires_grad=False)
    return weights


def _graph_size(V: Node, groups: int, who: str) -> int:
    rows = V.value.shape[0]
    if groups < 1 or rows % groups != 0:
        raise ShapeError(f"{who}: {rows} строк V нельзя разбить на {groups} графов")
    return rows // groups


def graph_sigma(V: Node, params: EstimatorParams, weights: Optional[Dict[str, Node]] = None,
                mode: str = "train", on_stats: Optional[LayerStatsSink] = None,
                groups: int = 1) -> Node:
    """
    Графовый оценщик: совместный вывод σ для N пар каждого запроса.

    Графы запросов независимы: рёбра строятся только внутри блока N×L,
    BN в train-режиме считает статистики по узлам своего графа.

    Параметры:
        V (Node): (groups·N)×L, блоки подряд
        params: EstimatorParams вида 'graph'
        weights: тензоры params, записанные на ленту (bind); None - константы
        mode: 'train' (BN по узлам текущего графа) или 'eval'
        on_stats: приёмник статистик BN вместо немедленного обновления
        groups: число графов (запросов)

    Возвращает:
        Node: σ формы groups×N, σ >= 0

    Исключения:
        ContractError: N = 1 в train-режиме
    """
    if params.kind != 'graph':
        raise ContractError(f"graph_sigma: параметры вида '{params.kind}'")
    L = V.value.shape[1]
    if L != params.L:
        raise ShapeError(f"graph_sigma: V имеет {L} столбцов, оценщик создан для L={params.L}")
    n = _graph_size(V, groups, "graph_sigma")
    if mode == "train" and n < 2:
        raise ContractError("graph_sigma: в train-режиме нужно N >= 2 (BN по узлам)")
    w = _weights(V, params, weights)

    # Рёбра: сродство узлов во вложенном пространстве, нормированное по строкам
    e1 = ops.add(ops.matmul(V, w['phi1.weight']), w['phi1.bias'])
    e2 = ops.add(ops.matmul(V, w['phi2.weight']), w['phi2.bias'])
    G = ops.row_softmax(ops.group_matmul(e1, e2, groups, transpose_b=True))

    # Обновление узлов
    Y = ops.matmul(ops.group_matmul(G, V, groups), w['wv.weight'])
    Y = _block(Y, 'wy1', params, w, mode, on_stats, groups)
    Y = _block(Y, 'wy2', params, w, mode, on_stats, groups)
    V_upd = ops.add(V, Y)

    H = _block(V_upd, 'wu1', params, w, mode, on_stats, groups)
    raw = ops.matmul(H, w['wu2.weight'])
    return ops.softplus(ops.reshape(raw, groups, n))


def conv_sigma(V: Node, params: EstimatorParams, weights: Optional[Dict[str, Node]] = None,
               mode: str = "train", on_stats: Optional[LayerStatsSink] = None,
               groups: int = 1) -> Node:
    """Conv-оценщик: общий для всех пар L->L->1, без взаимодействия узлов"""
    if params.kind != 'conv':
        raise ContractError(f"conv_sigma: параметры вида '{params.kind}'")
    if V.value.shape[1] != params.L:
        raise ShapeError(f"conv_sigma: V имеет {V.value.shape[1]} столбцов, L={params.L}")
    n = _graph_size(V, groups, "conv_sigma")
    w = _weights(V, params, weights)
    h = ops.leaky_relu(ops.add(ops.matmul(V, w['c1.weight']), w['c1.bias']), params.slope)
    return ops.softplus(ops.reshape(ops.matmul(h, w['c2.weight']), groups, n))


def fc_sigma(V: Node, params: EstimatorParams, weights: Optional[Dict[str, Node]] = None,
             mode: str = "train", on_stats: Optional[LayerStatsSink] = None,
             groups: int = 1) -> Node:
    """FC-оценщик: блок V разворачивается в вектор N·L; работает только для своего N"""
    if params.kind != 'fc':
        raise ContractError(f"fc_sigma: параметры вида '{params.kind}'")
    L = V.value.shape[1]
    n = _graph_size(V, groups, "fc_sigma")
    if n != params.n_way or L != params.L:
        raise ShapeError(f"fc_sigma: блок V формы ({n}, {L}), оценщик создан для "
                         f"({params.n_way}, {params.L})")
    w = _weights(V, params, weights)
    flat = ops.reshape(V, groups, n * L)
    h = ops.leaky_relu(ops.add(ops.matmul(flat, w['f1.weight']), w['f1.bias']), params.slope)
    return ops.softplus(ops.matmul(h, w['f2.weight']))


ESTIMATORS = {'graph': graph_sigma, 'conv': conv_sigma, 'fc': fc_sigma}


def estimate_sigma(V: Node, params: EstimatorParams, weights: Optional[Dict[str, Node]] = None,
                   mode: str = "train", on_stats: Optional[LayerStatsSink] = None,
                   groups: int = 1) -> Node:
    """Вызывает оценщик нужного вида; результат groups×N"""
    return ESTIMATORS[params.kind](V, params, weights, mode, on_stats, groups)


# =============================================================================
# СЭМПЛИРОВАНИЕ И MC-ПОТЕРИ
# =============================================================================

def draw_eps(rng: Rng, samples: int, way: int, shared_eps: bool = False) -> np.ndarray:
    """ε ~ N(0, 1) формы T×N (или T×1 при общем ε на сэмпл)"""
    return rng.normal((samples, 1 if shared_eps else way))


def sample_similarities(belief: SimilarityBelief, samples: int, rng: Optional[Rng] = None,
                        shared_eps: bool = False, eps: Optional[np.ndarray] = None) -> Node:
    """
    Репараметризованные сэмплы s_t = μ + σ⊙ε_t.

    Для Q запросов результат (Q·T)×N: T строк запроса q идут подряд,
    начиная с q·T. ε - константа ленты, градиент течёт в μ и σ. Можно
    передать замороженную матрицу eps вместо rng.
    """
    if samples < 1:
        raise ContractError(f"sample_similarities: T должно быть >= 1, получено {samples}")
    n_query, way = belief.mu.value.shape
    if eps is None:
        if rng is None:
            raise ContractError("sample_similarities: нужен rng или eps")
        eps = draw_eps(rng, n_query * samples, way, shared_eps)
    if eps.shape[0] != n_query * samples or eps.shape[1] not in (1, way):
        raise ShapeError(f"sample_similarities: ε формы {eps.shape} для Q={n_query}, "
                         f"T={samples}, N={way}")
    tape = belief.mu.tape
    rows = np.repeat(np.arange(n_query), samples)
    mu = ops.gather_rows(belief.mu, rows)
    sigma = ops.gather_rows(belief.sigma, rows)
    return ops.add(mu, ops.mul(sigma, tape.constant(eps)))


def mc_loss(samples: Node, label: Union[int, Sequence[int]]) -> Node:
    """
    -log((1/T) Σ_t softmax(s_t)[label]) для каждого запроса.

    Внутри строки softmax считается через log-sum-exp; среднее берётся по
    вероятностям (со сдвигом на максимальную лог-вероятность запроса, чтобы
    не получить ноль при сильно отрицательных логитах).

    Параметры:
        samples (Node): (Q·T)×N, блоки запросов подряд
        label: метка (Q = 1) или последовательность Q меток

    Возвращает:
        Node: Q×1
    """
    labels = [int(label)] if np.isscalar(label) else [int(v) for v in label]
    rows, n = samples.value.shape
    if not labels or rows % len(labels) != 0:
        raise ShapeError(f"mc_loss: {rows} сэмплов нельзя разбить на {len(labels)} запросов")
    for value in labels:
        if not 0 <= value < n:
            raise ContractError(f"mc_loss: метка {value} вне [0, {n})")
    n_query = len(labels)
    per_query = rows // n_query
    tape = samples.tape
    picked = ops.gather_per_row(samples, np.repeat(labels, per_query))
    log_p = ops.reshape(ops.sub(picked, ops.row_logsumexp(samples)), n_query, per_query)
    shift = tape.constant(log_p.value.max(axis=1, keepdims=True))
    mean_p = ops.mean(ops.exp(ops.sub(log_p, shift)), axis=1)
    return ops.neg(ops.add(ops.log(mean_p), shift))
