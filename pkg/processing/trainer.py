"""
=============================================================================
processing/trainer.py - Двухэтапное обучение головы и оценщика σ
=============================================================================

Этап 1 - классификационное предобучение по всем base-классам:
  строки весов классификатора играют роль прототипов, и при включённой
  неопределённости граф строится по всем |C_base| классам.
Этап 2 - эпизодическое мета-обучение N-way K-shot на base-классах:
  граф строится по N прототипам эпизода.

Параметры оценщика общие для обоих этапов: переход между этапами их не
сбрасывает. Обучаемая поверхность: τ (через ρ), адаптер эмбеддингов,
веса классификатора (только этап 1) и оценщик (когда этап использует σ).

Шаг оптимизатора:
1. все запросы шага - на одной ленте: логиты Q×N, графы оценщика
   Q блоков по N узлов, сэмплы (Q·T)×N; потери - среднее по запросам
2. обратный ход даёт средние градиенты
3. SGD с моментом: v = m·v + g, p = p - lr·v
4. статистики BN применяются к скользящим буферам в порядке запросов

=============================================================================
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigError, ContractError, DataError
from numerics import Node, Rng, Tape, backward, ops
from . import uncertainty
from .console import safe_print
from .embeddings import EmbeddingDataset
from .episodic import Episode, EpisodeConfig, sample_episode
from .metric_head import ce_loss, cosine_logits, prototypes_node, temperature
from .models import OptimizerConfig, TrainConfig
from .uncertainty import EstimatorParams, McConfig, SimilarityBelief

try:
    import metrics
    from metrics import MetricsTimer
    METRICS_ENABLED = True
except ImportError:
    METRICS_ENABLED = False


# Имена обучаемых тензоров (они же имена листьев ленты и тензоров чекпоинта)
RHO = 'temperature.rho'
ADAPTER = 'adapter.weight'
CLASSIFIER = 'classifier.weight'
ESTIMATOR_PREFIX = 'estimator.'

LOG_COLUMNS = ['stage', 'epoch', 'mean_loss', 'tau', 'mean_sigma']


# =============================================================================
# СОСТОЯНИЕ ОБУЧЕНИЯ
# =============================================================================

@dataclass
class TrainState:
    """
    Всё, что меняется при обучении.

    Поля:
        dim: размерность эмбеддингов D
        rho: 1×1, τ = exp(ρ)
        adapter: D×D линейный адаптер эмбеддингов (инициализация - единичная)
        classifier: |C_base|×D веса классификатора этапа 1
        base_labels: метки base-классов; индекс = строка classifier
        estimator: параметры оценщика σ (None при estimator='none')
        seed: seed запуска; счётчики шагов задают адреса потоков Rng
        velocity: слоты момента оптимизатора
    """
    dim: int
    rho: np.ndarray
    adapter: np.ndarray
    classifier: np.ndarray
    base_labels: Tuple[int, ...]
    estimator: Optional[EstimatorParams] = None
    seed: int = 1
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    stage1_steps: int = 0
    stage2_steps: int = 0
    stage1_epochs: int = 0
    stage2_epochs: int = 0

    @property
    def tau(self) -> float:
        return float(np.exp(self.rho[0, 0]))

    @property
    def estimator_kind(self) -> str:
        return self.estimator.kind if self.estimator is not None else 'none'

    def parameters(self) -> Dict[str, np.ndarray]:
        """Имя -> тензор в порядке чекпоинта"""
        params = {RHO: self.rho, ADAPTER: self.adapter, CLASSIFIER: self.classifier}
        if self.estimator is not None:
            for name, value in self.estimator.tensors.items():
                params[ESTIMATOR_PREFIX + name] = value
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        current = self.parameters().get(name)
        if current is None:
            raise ContractError(f"Неизвестный параметр '{name}'")
        if value.shape != current.shape:
            raise ContractError(f"Параметр '{name}': форма {value.shape} вместо {current.shape}")
        if name == RHO:
            self.rho = value
        elif name == ADAPTER:
            self.adapter = value
        elif name == CLASSIFIER:
            self.classifier = value
        else:
            self.estimator.tensors[name[len(ESTIMATOR_PREFIX):]] = value

    def copy(self) -> "TrainState":
        return TrainState(
            self.dim, self.rho.copy(), self.adapter.copy(), self.classifier.copy(),
            self.base_labels, self.estimator.copy() if self.estimator is not None else None,
            self.seed, {k: v.copy() for k, v in self.velocity.items()},
            self.stage1_steps, self.stage2_steps, self.stage1_epochs, self.stage2_epochs)


def init_state(config: TrainConfig, dataset: EmbeddingDataset) -> TrainState:
    """
    Создаёт начальное состояние для base-сплита dataset.

    Исключения:
        ConfigError: L не делит D при включённом оценщике
    """
    dim = dataset.dim
    if config.estimator != 'none' and dim % config.num_groups:
        raise ConfigError(f"train.num_groups={config.num_groups} должно делить D={dim}")
    rng = Rng(config.seed, ("init",))
    labels = tuple(dataset.labels)
    classifier = rng.child("classifier").normal((len(labels), dim)) / math.sqrt(dim)
    estimator = None
    if config.estimator != 'none':
        n_way = config.stage2.way if config.estimator == 'fc' else None
        estimator = uncertainty.init_estimator(config.estimator, config.num_groups,
                                               rng.child("estimator"), n_way=n_way,
                                               slope=config.leaky_slope)
    return TrainState(dim=dim, rho=np.array([[math.log(config.tau_init)]]),
                      adapter=np.eye(dim), classifier=classifier, base_labels=labels,
                      estimator=estimator, seed=config.seed)


def trainable_names(state: TrainState, stage: str, uses_sigma: bool, config: TrainConfig) -> List[str]:
    """Параметры, которые обновляет шаг этапа stage"""
    names = [RHO]
    if config.adapter:
        names.append(ADAPTER)
    if stage == 'stage1':
        names.append(CLASSIFIER)
    if uses_sigma:
        if state.estimator is None:
            raise ConfigError(f"{stage}: неопределённость включена, но оценщик не задан")
        names.extend(ESTIMATOR_PREFIX + n for n in state.estimator.names())
    return names


# =============================================================================
# ПРЯМОЙ ПРОХОД ПО ЗАПРОСАМ ШАГА
# =============================================================================

def bind_state(tape: Tape, state: TrainState, trainable: Sequence[str]) -> Dict[str, Node]:
    """Записывает параметры на ленту: обучаемые - листьями, остальные - константами"""
    wanted = set(trainable)
    return {name: tape.leaf(value, name) if name in wanted else tape.constant(value)
            for name, value in state.parameters().items()}


def query_objective(tape: Tape, nodes: Dict[str, Node], state: TrainState, protos: Node,
                    query: Union[np.ndarray, Node], label: Union[int, Sequence[int]],
                    uses_sigma: bool, mc: McConfig, rng: Optional[Rng] = None, on_stats=None,
                    eps: Optional[np.ndarray] = None) -> Tuple[Node, Optional[Node]]:
    """
    Средние потери Q запросов на одной ленте.

    Параметры:
        protos (Node): N×D прототипы (строки классификатора на этапе 1)
        query: Q×D (вектор длины D при Q = 1) или узел Q×D, до адаптера
        label: индекс истинного прототипа (Q = 1) или Q индексов
        uses_sigma: False - кросс-энтропия, True - MC-потери с σ от оценщика
        mc: число сэмплов и режим ε
        rng / eps: источник ε; eps - матрица (Q·T)×N (или (Q·T)×1),
            T строк запроса q начинаются с q·T
        on_stats: приёмник статистик BN (строка k статистик - граф запроса k)

    Возвращает:
        (потери 1×1, σ Q×N или None)
    """
    if not isinstance(query, Node):
        vectors = np.asarray(query, dtype=np.float64)
        query = tape.constant(vectors.reshape(1, -1) if vectors.ndim == 1 else vectors)
    z = ops.matmul(query, nodes[ADAPTER])
    tau = temperature(nodes[RHO])
    logits = cosine_logits(z, protos, tau)
    if not uses_sigma:
        return ops.mean(ce_loss(logits, label)), None

    est = state.estimator
    n_query = z.value.shape[0]
    V = uncertainty.relation_features(z, protos, est.L)
    weights = {name: nodes[ESTIMATOR_PREFIX + name] for name in est.names()}
    sigma = uncertainty.estimate_sigma(V, est, weights, "train", on_stats, groups=n_query)
    samples = uncertainty.sample_similarities(SimilarityBelief(logits, sigma), mc.samples,
                                              rng=rng, shared_eps=mc.shared_eps, eps=eps)
    return ops.mean(uncertainty.mc_loss(samples, label)), sigma


def step_eps(config: TrainConfig, stage: str, step: int, queries: int, way: int) -> np.ndarray:
    """
    ε шага: у запроса q свой поток Rng(seed, ("mc", stage, step, q)),
    блоки по T строк идут в порядке запросов.
    """
    return np.concatenate([
        uncertainty.draw_eps(Rng(config.seed, ("mc", stage, step, q)), config.mc_samples, way,
                             config.shared_eps)
        for q in range(queries)
    ])


@dataclass
class StepOutcome:
    """Итог шага: средние потери и средняя σ (NaN без неопределённости)"""
    loss: float
    mean_sigma: float = float('nan')


# (слой BN, средние groups×C, несмещённые дисперсии groups×C)
LayerStats = List[Tuple[str, np.ndarray, np.ndarray]]
ProtoBuilder = Callable[[Tape, Dict[str, Node]], Node]


def _step_gradients(state: TrainState, items: Sequence[Tuple[np.ndarray, int]], build_protos: ProtoBuilder,
                    stage: str, step: int, uses_sigma: bool,
                    config: TrainConfig) -> Tuple[StepOutcome, Dict[str, np.ndarray], LayerStats]:
    trainable = trainable_names(state, stage, uses_sigma, config)
    mc = McConfig(config.mc_samples, config.shared_eps)
    tape = Tape()
    nodes = bind_state(tape, state, trainable)
    protos = build_protos(tape, nodes)
    queries = np.stack([np.asarray(vector, dtype=np.float64) for vector, _ in items])
    labels = [label for _, label in items]
    eps = step_eps(config, stage, step, len(items), protos.value.shape[0]) if uses_sigma else None

    stats: LayerStats = []
    loss, sigma = query_objective(tape, nodes, state, protos, queries, labels, uses_sigma, mc,
                                  on_stats=lambda layer, mean, var: stats.append((layer, mean, var)),
                                  eps=eps)
    grads = backward(tape, loss)
    mean_sigma = float(sigma.value.mean()) if sigma is not None else float('nan')
    return StepOutcome(float(loss.value[0, 0]), mean_sigma), grads, stats


def _apply_stats(state: TrainState, stats: LayerStats) -> None:
    """Скользящие буферы BN обновляются графами запросов по порядку"""
    for layer, mean, var in stats:
        for k in range(mean.shape[0]):
            state.estimator.buffers[layer].update(mean[k:k + 1], var[k:k + 1])


# =============================================================================
# ОПТИМИЗАТОР
# =============================================================================

class SGD:
    """
    Градиентный спуск с моментом.

    v = m·v + g; p = p - lr·v. При momentum=0 шаг в точности p - lr·g.
    grad_clip ограничивает общую L2-норму градиента.
    """

    def __init__(self, lr: float, momentum: float = 0.9, grad_clip: Optional[float] = None):
        if lr < 0:
            raise ConfigError(f"lr должен быть >= 0, получено {lr}")
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip

    @classmethod
    def from_config(cls, lr: float, config: OptimizerConfig) -> "SGD":
        return cls(lr, config.momentum, config.grad_clip)

    def clip(self, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        if self.grad_clip is None:
            return grads
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm <= self.grad_clip:
            return grads
        factor = self.grad_clip / norm
        return {name: g * factor for name, g in grads.items()}

    def step(self, state: TrainState, grads: Dict[str, np.ndarray]) -> None:
        params = state.parameters()
        for name, g in self.clip(grads).items():
            v = state.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            state.velocity[name] = v
            state.set_parameter(name, params[name] - self.lr * v)


# =============================================================================
# ШАГИ ЭТАПОВ
# =============================================================================

def _stage1_items(state: TrainState, batch: Sequence[Tuple[np.ndarray, int]]) -> List[Tuple[np.ndarray, int]]:
    rows = {label: i for i, label in enumerate(state.base_labels)}
    items = []
    for vector, label in batch:
        if label not in rows:
            raise DataError(f"Метка {label} не входит в base-классы классификатора")
        items.append((vector, rows[label]))
    return items


def stage1_gradients(state: TrainState, batch: Sequence[Tuple[np.ndarray, int]],
                     config: TrainConfig) -> Tuple[StepOutcome, Dict[str, np.ndarray], LayerStats]:
    """Потери и средние градиенты шага этапа 1 без обновления состояния"""
    if not batch:
        raise ContractError("stage1_step: пустой батч")
    items = _stage1_items(state, batch)
    return _step_gradients(state, items, lambda tape, nodes: nodes[CLASSIFIER], 'stage1',
                           state.stage1_steps, config.stage1.uncertainty, config)


def stage1_step(state: TrainState, batch: Sequence[Tuple[np.ndarray, int]], config: TrainConfig) -> StepOutcome:
    """
    Один шаг классификационного предобучения.

    Параметры:
        state: состояние (меняется на месте)
        batch: пары (эмбеддинг, метка base-класса)
        config: TrainConfig

    Исключения:
        ContractError: пустой батч
        DataError: метка вне base-классов
    """
    def body():
        outcome, grads, stats = stage1_gradients(state, batch, config)
        SGD.from_config(config.stage1.lr, config.optimizer).step(state, grads)
        _apply_stats(state, stats)
        state.stage1_steps += 1
        return outcome

    if not METRICS_ENABLED:
        return body()
    with MetricsTimer(metrics.record_step_duration, 'stage1'):
        outcome = body()
    metrics.record_train_step('stage1', config.stage1.uncertainty, outcome.loss)
    return outcome


def _check_episode(episode: Episode, config: TrainConfig) -> None:
    s2 = config.stage2
    if (episode.way, episode.shot, episode.queries) != (s2.way, s2.shot, s2.queries):
        raise ContractError(
            f"stage2_step: эпизод ({episode.way}, {episode.shot}, {episode.queries}) "
            f"не совпадает с конфигом ({s2.way}, {s2.shot}, {s2.queries})")


def stage2_gradients(state: TrainState, episode: Episode,
                     config: TrainConfig) -> Tuple[StepOutcome, Dict[str, np.ndarray], LayerStats]:
    """Потери и средние градиенты шага этапа 2 без обновления состояния"""
    _check_episode(episode, config)
    support = episode.support_matrix()
    query = episode.query_matrix()
    items = [(query[i], episode.query_labels[i]) for i in range(len(episode.query))]

    def build_protos(tape: Tape, nodes: Dict[str, Node]) -> Node:
        return prototypes_node(tape, ops.matmul(tape.constant(support), nodes[ADAPTER]), episode)

    return _step_gradients(state, items, build_protos, 'stage2', state.stage2_steps,
                           config.stage2.uncertainty, config)


def stage2_step(state: TrainState, episode: Episode, config: TrainConfig) -> StepOutcome:
    """
    Один шаг эпизодического мета-обучения (среднее по N·M запросам).

    Исключения:
        ContractError: эпизод не совпадает с конфигом этапа 2
    """
    def body():
        outcome, grads, stats = stage2_gradients(state, episode, config)
        SGD.from_config(config.stage2.lr, config.optimizer).step(state, grads)
        _apply_stats(state, stats)
        state.stage2_steps += 1
        return outcome

    if not METRICS_ENABLED:
        return body()
    with MetricsTimer(metrics.record_step_duration, 'stage2'):
        outcome = body()
    metrics.record_train_step('stage2', config.stage2.uncertainty, outcome.loss)
    return outcome


# =============================================================================
# ПОЛНЫЙ ЗАПУСК
# =============================================================================

def _epoch_row(stage: str, epoch: int, outcomes: Sequence[StepOutcome], state: TrainState) -> dict:
    sigmas = [o.mean_sigma for o in outcomes if not math.isnan(o.mean_sigma)]
    row = {
        'stage': stage,
        'epoch': epoch,
        'mean_loss': float(np.mean([o.loss for o in outcomes])) if outcomes else float('nan'),
        'tau': state.tau,
        'mean_sigma': float(np.mean(sigmas)) if sigmas else float('nan'),
    }
    if METRICS_ENABLED:
        metrics.record_train_epoch(row['tau'], row['mean_sigma'])
    return row


def run(config: TrainConfig, dataset: EmbeddingDataset,
        state: Optional[TrainState] = None) -> Tuple[TrainState, pd.DataFrame]:
    """
    Этап 1, затем этап 2 с учётом флагов неопределённости каждого этапа.

    Параметры:
        config: TrainConfig (epochs=0 отключает этап)
        dataset: base-сплит
        state: начальное состояние (по умолчанию init_state)

    Возвращает:
        (TrainState, DataFrame лога: stage, epoch, mean_loss, tau, mean_sigma)
    """
    if state is None:
        state = init_state(config, dataset)
    rows = []

    s1 = config.stage1
    if s1.epochs:
        safe_print(f">>> [TRAIN] Этап 1: {s1.epochs} эпох, {len(dataset)} примеров, "
                   f"батч {s1.batch_size}, неопределённость {'вкл' if s1.uncertainty else 'выкл'}")
        state.velocity = {}
    for _ in range(s1.epochs):
        epoch = state.stage1_epochs
        order = Rng(config.seed, ("stage1", epoch)).permutation(len(dataset))
        outcomes = []
        for start in range(0, len(order), s1.batch_size):
            recs = [dataset.records[int(i)] for i in order[start:start + s1.batch_size]]
            outcomes.append(stage1_step(state, [(r.vector, r.class_label) for r in recs], config))
        state.stage1_epochs += 1
        rows.append(_epoch_row('stage1', state.stage1_epochs, outcomes, state))
        safe_print(f">>> [TRAIN] stage1 эпоха {state.stage1_epochs}: loss={rows[-1]['mean_loss']:.4f} "
                   f"tau={rows[-1]['tau']:.3f}")

    s2 = config.stage2
    if s2.epochs:
        episode_config = EpisodeConfig(s2.way, s2.shot, s2.queries, s2.episodes_per_epoch, config.seed)
        episode_config.validate_against(dataset)
        safe_print(f">>> [TRAIN] Этап 2: {s2.epochs} эпох по {s2.episodes_per_epoch} эпизодов "
                   f"{s2.way}-way {s2.shot}-shot, неопределённость {'вкл' if s2.uncertainty else 'выкл'}")
        state.velocity = {}
    for _ in range(s2.epochs):
        epoch = state.stage2_epochs
        outcomes = []
        for e in range(s2.episodes_per_epoch):
            episode = sample_episode(dataset, episode_config, epoch * s2.episodes_per_epoch + e,
                                     namespace="train")
            outcomes.append(stage2_step(state, episode, config))
        state.stage2_epochs += 1
        rows.append(_epoch_row('stage2', state.stage2_epochs, outcomes, state))
        safe_print(f">>> [TRAIN] stage2 эпоха {state.stage2_epochs}: loss={rows[-1]['mean_loss']:.4f} "
                   f"tau={rows[-1]['tau']:.3f}")

    return state, pd.DataFrame(rows, columns=LOG_COLUMNS)
