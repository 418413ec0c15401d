"""
=============================================================================
processing/evaluation.py - Протокол оценки на novel-классах
=============================================================================

Точность считается по E случайным эпизодам; итог - среднее и 95%
доверительный интервал 1.96·std/√E (std - выборочное, ddof=1).

При выводе оценщик σ не участвует: запрос относится к классу с
максимальным косинусом до прототипа (τ и softmax argmax не меняют).
При равенстве косинусов выигрывает меньший индекс класса.

Дополнительно: профиль σ - средняя предсказанная неопределённость для
классов с высоким и низким шумом (на синтетике шум класса известен).

=============================================================================
"""

import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from config import CI_Z
from dask_jobs import parallel_map
from errors import ContractError, DataError
from numerics import Tape, ops
from . import uncertainty
from .console import safe_print
from .embeddings import EmbeddingDataset
from .episodic import Episode, EpisodeConfig, sample_episode
from .metric_head import compute_prototypes, predict
from .models import EvalConfig
from .trainer import TrainState

try:
    import metrics
    METRICS_ENABLED = True
except ImportError:
    METRICS_ENABLED = False


# =============================================================================
# ОТЧЁТ
# =============================================================================

@dataclass
class EvalReport:
    """
    Результат оценки.

    Поля:
        episodes: E
        accuracies: точность каждого эпизода, в порядке номеров эпизодов
        mean: средняя точность
        ci95: полуширина 95% интервала (0 при E=1)
        degenerate: True при E=1 - интервал не определён
        seed: seed эпизодов
        config: копия параметров оценки
    """
    episodes: int
    accuracies: List[float]
    mean: float
    ci95: float
    degenerate: bool = False
    seed: int = 1
    config: Dict = field(default_factory=dict)


def summarize(accuracies: Sequence[float], seed: int = 1, config: Optional[Dict] = None) -> EvalReport:
    """Среднее и ci95 по списку точностей эпизодов"""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ContractError("summarize: пустой список точностей")
    if np.any(acc < 0) or np.any(acc > 1):
        raise ContractError("summarize: точность эпизода вне [0, 1]")
    n = int(acc.size)
    mean = float(acc.mean())
    degenerate = n == 1
    ci95 = 0.0 if degenerate else float(CI_Z * acc.std(ddof=1) / math.sqrt(n))
    return EvalReport(n, [float(a) for a in acc], mean, ci95, degenerate, seed, dict(config or {}))


# =============================================================================
# ОЦЕНКА
# =============================================================================

def eval_episode(state: TrainState, episode: Episode) -> float:
    """
    Доля верно классифицированных запросов эпизода.

    Запросы и support проходят через адаптер state; оценщик не читается.
    """
    protos = compute_prototypes(episode, state.adapter)
    queries = episode.query_matrix() @ state.adapter
    pred = predict(queries, protos)
    labels = np.asarray(episode.query_labels)
    return float(np.count_nonzero(pred == labels)) / len(labels)


def _episode_config(config: EvalConfig) -> EpisodeConfig:
    return EpisodeConfig(config.way, config.shot, config.queries, config.episodes, config.seed)


def evaluate(state: TrainState, dataset: EmbeddingDataset, config: EvalConfig,
             threads: int = 1) -> EvalReport:
    """
    Оценка на E эпизодах из dataset (novel-сплит).

    Эпизод e сэмплируется из собственного потока ("episode", e), поэтому
    результат не зависит от числа потоков и порядка обработки.

    Исключения:
        ConfigError: сплит не удовлетворяет требованиям сэмплера
    """
    episode_config = _episode_config(config)
    episode_config.validate_against(dataset)
    safe_print(f">>> [EVAL] {config.episodes} эпизодов {config.way}-way {config.shot}-shot, "
               f"{config.queries} запросов на класс, seed={config.seed}")

    start = time.perf_counter()
    accuracies = parallel_map(
        lambda e: eval_episode(state, sample_episode(dataset, episode_config, e)),
        list(range(config.episodes)), threads)
    report = summarize(accuracies, config.seed, config.model_dump())

    if METRICS_ENABLED:
        metrics.record_evaluation(config.way, config.shot, config.episodes, report.mean,
                                  time.perf_counter() - start)
    safe_print(f">>> [EVAL] Точность: {100 * report.mean:.2f} +- {100 * report.ci95:.2f}"
               + (" (E=1, интервал не определён)" if report.degenerate else ""))
    return report


# =============================================================================
# ПРОФИЛЬ НЕОПРЕДЕЛЁННОСТИ
# =============================================================================

@dataclass
class SigmaProfile:
    """Средняя σ пары (запрос, прототип его класса) для шумных и чистых классов"""
    high_noise_sigma: float
    low_noise_sigma: float
    noise_threshold: float
    pairs: int

    @property
    def passed(self) -> bool:
        return self.high_noise_sigma > self.low_noise_sigma


def episode_sigma(state: TrainState, episode: Episode) -> np.ndarray:
    """
    σ всех пар эпизода в eval-режиме BN: матрица (N·M)×N, одна лента на эпизод.

    Исключения:
        ContractError: в состоянии нет оценщика
    """
    est = state.estimator
    if est is None:
        raise ContractError("episode_sigma: у модели нет оценщика неопределённости")
    tape = Tape()
    protos = tape.constant(compute_prototypes(episode, state.adapter))
    queries = tape.constant(episode.query_matrix() @ state.adapter)
    V = uncertainty.relation_features(queries, protos, est.L)
    return uncertainty.estimate_sigma(V, est, None, "eval", groups=queries.value.shape[0]).value


def sigma_profile(state: TrainState, dataset: EmbeddingDataset, config: EvalConfig,
                  episodes: Optional[int] = None, threads: int = 1) -> SigmaProfile:
    """
    Сравнивает σ для классов с шумом выше и ниже медианы.

    Параметры:
        dataset: сплит с известным шумом классов (синтетика)
        episodes: сколько эпизодов использовать (по умолчанию config.episodes)

    Исключения:
        DataError: у набора нет шумов классов
    """
    if not dataset.class_noise:
        raise DataError("sigma_profile: шум классов неизвестен (нужен синтетический набор)")
    episode_config = _episode_config(config)
    episode_config.validate_against(dataset)
    count = episodes or config.episodes
    threshold = float(np.median([dataset.class_noise[c] for c in dataset.labels]))

    def work(e: int):
        episode = sample_episode(dataset, episode_config, e)
        sigma = episode_sigma(state, episode)
        own = sigma[np.arange(sigma.shape[0]), list(episode.query_labels)]
        noise = np.array([dataset.class_noise[episode.classes[j]] for j in episode.query_labels])
        return own, noise

    parts = parallel_map(work, list(range(count)), threads)
    own = np.concatenate([p[0] for p in parts])
    noise = np.concatenate([p[1] for p in parts])
    high, low = own[noise > threshold], own[noise < threshold]
    profile = SigmaProfile(float(high.mean()) if high.size else float('nan'),
                           float(low.mean()) if low.size else float('nan'),
                           threshold, int(own.size))
    safe_print(f">>> [EVAL] σ шумных классов {profile.high_noise_sigma:.4f}, "
               f"чистых {profile.low_noise_sigma:.4f}")
    return profile
