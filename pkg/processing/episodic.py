"""
=============================================================================
processing/episodic.py - Сэмплирование N-way K-shot эпизодов
=============================================================================

Эпизод - это задача классификации: support-набор (N классов по K примеров)
и query-набор (те же N классов по M примеров). Каждый эпизод -
детерминированная функция (seed, namespace, episode_index): его поток
случайных чисел не зависит от того, какие эпизоды и в каком порядке
запрашивались раньше. Это позволяет оценивать эпизоды параллельно
с побитово одинаковым результатом.

=============================================================================
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from config import DEFAULT_EVAL_EPISODES, DEFAULT_QUERIES, DEFAULT_SHOT, DEFAULT_WAY
from errors import ConfigError
from numerics import Rng
from .embeddings import EmbeddingDataset, EmbeddingRecord


@dataclass(frozen=True)
class EpisodeConfig:
    """Параметры эпизодов: N, K, M, количество эпизодов E и seed"""
    way: int = DEFAULT_WAY
    shot: int = DEFAULT_SHOT
    queries: int = DEFAULT_QUERIES
    episodes: int = DEFAULT_EVAL_EPISODES
    seed: int = 1

    def validate_against(self, dataset: EmbeddingDataset) -> None:
        if self.way < 1 or self.shot < 1 or self.queries < 1:
            raise ConfigError(f"N, K, M должны быть >= 1: ({self.way}, {self.shot}, {self.queries})")
        if self.way > dataset.num_classes:
            raise ConfigError(
                f"N={self.way} больше числа классов в сплите '{dataset.split}' ({dataset.num_classes})")
        need = self.shot + self.queries
        for label, idx in dataset.class_index.items():
            if len(idx) < need:
                raise ConfigError(
                    f"Класс {label}: {len(idx)} записей, а для K+M нужно {need}")


@dataclass(frozen=True, eq=False)
class Episode:
    """
    Один эпизод.

    Поля:
        classes: метки набора данных; индекс в списке = индекс класса в эпизоде
        support: N групп по K записей
        query: N·M записей (сгруппированы по классам)
        query_labels: индекс класса эпизода в [0, N) для каждой query-записи
    """
    way: int
    shot: int
    queries: int
    classes: Tuple[int, ...]
    support: Tuple[Tuple[EmbeddingRecord, ...], ...]
    query: Tuple[EmbeddingRecord, ...]
    query_labels: Tuple[int, ...]

    def support_matrix(self) -> np.ndarray:
        """(N·K)×D, строки сгруппированы по классам эпизода"""
        return np.stack([r.vector for group in self.support for r in group])

    def query_matrix(self) -> np.ndarray:
        return np.stack([r.vector for r in self.query])

    def averaging_matrix(self) -> np.ndarray:
        """N×(N·K) матрица A, такая что A·S - средние по классам"""
        a = np.zeros((self.way, self.way * self.shot))
        for j in range(self.way):
            a[j, j * self.shot:(j + 1) * self.shot] = 1.0 / self.shot
        return a


def sample_episode(dataset: EmbeddingDataset, config: EpisodeConfig, episode_index: int,
                   namespace: str = "episode") -> Episode:
    """
    Сэмплирует эпизод.

    Классы выбираются равномерно без возвращения; внутри класса K+M записей
    выбираются без возвращения, первые K идут в support.

    Параметры:
        dataset: сплит, из которого берутся классы
        config: EpisodeConfig
        episode_index: номер эпизода (адрес независимого потока)
        namespace: пространство потоков ('episode' для оценки, 'train' для обучения)

    Исключения:
        ConfigError: N больше числа классов или у класса меньше K+M записей
    """
    config.validate_against(dataset)
    rng = Rng(config.seed, (namespace, int(episode_index)))
    labels = dataset.labels
    picked = rng.child("classes").choice(len(labels), config.way)

    classes: List[int] = []
    support: List[Tuple[EmbeddingRecord, ...]] = []
    query: List[EmbeddingRecord] = []
    query_labels: List[int] = []
    for j, pos in enumerate(picked):
        label = labels[int(pos)]
        idx = dataset.class_index[label]
        chosen = rng.child("records", j).choice(len(idx), config.shot + config.queries)
        recs = [dataset.records[idx[int(c)]] for c in chosen]
        classes.append(label)
        support.append(tuple(recs[:config.shot]))
        query.extend(recs[config.shot:])
        query_labels.extend([j] * config.queries)

    return Episode(config.way, config.shot, config.queries, tuple(classes),
                   tuple(support), tuple(query), tuple(query_labels))
