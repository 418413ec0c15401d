"""
=============================================================================
processing/embeddings.py - Загрузка и генерация наборов эмбеддингов
=============================================================================

Этот модуль отвечает за получение признаковых векторов z_i = f(x_i):
- чтение/запись текстового файла эмбеддингов (формат EMB v1)
- генерация синтетического гетероскедастичного набора, где у каждого
  класса свой масштаб шума, и поэтому схожести разных пар "запрос-прототип"
  действительно имеют разную неопределённость

Формат файла:
    EMB v1 dim=<D>
    # комментарии разрешены
    id,label,v1,...,vD

=============================================================================
"""

import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import EMBEDDING_FILE_MAGIC, EMBEDDING_FILE_VERSION, FLOAT_DIGITS
from errors import ConfigError, DataError, DuplicateIdError, HeaderError, ParseError, ValueCountError
from numerics import Rng


HEADER_RE = re.compile(
    rf"^{EMBEDDING_FILE_MAGIC}\s+{EMBEDDING_FILE_VERSION}\s+dim=(\d+)\s*$")

SPLITS = ('base', 'novel')


# =============================================================================
# ТИПЫ ДАННЫХ
# =============================================================================

@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """Один размеченный вектор признаков"""
    id: str
    class_label: int
    vector: np.ndarray


@dataclass(frozen=True, eq=False)
class EmbeddingDataset:
    """
    Неизменяемый набор эмбеддингов одного сплита.

    Поля:
        dim: размерность D
        records: записи в порядке файла/генерации
        split: 'base' или 'novel'
        class_index: метка -> индексы записей
        class_noise: масштаб шума класса (известен только для синтетики)
    """
    dim: int
    records: Tuple[EmbeddingRecord, ...]
    split: str = 'base'
    class_index: Dict[int, Tuple[int, ...]] = field(default_factory=dict)
    class_noise: Optional[Dict[int, float]] = None

    @classmethod
    def build(cls, dim: int, records: Sequence[EmbeddingRecord], split: str = 'base',
              class_noise: Optional[Dict[int, float]] = None) -> "EmbeddingDataset":
        if split not in SPLITS:
            raise ConfigError(f"Неизвестный сплит '{split}'")
        index: Dict[int, List[int]] = {}
        for i, rec in enumerate(records):
            if rec.vector.shape != (dim,):
                raise DataError(f"Запись {rec.id}: длина {rec.vector.shape} вместо {dim}")
            if not np.all(np.isfinite(rec.vector)):
                raise DataError(f"Запись {rec.id}: вектор содержит NaN/Inf")
            index.setdefault(rec.class_label, []).append(i)
        return cls(dim, tuple(records), split,
                   {label: tuple(ix) for label, ix in sorted(index.items())},
                   class_noise)

    @property
    def labels(self) -> List[int]:
        """Отсортированный список меток классов"""
        return list(self.class_index.keys())

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    def matrix(self, indices: Optional[Iterable[int]] = None) -> np.ndarray:
        """Векторы выбранных записей в виде матрицы n×D"""
        recs = self.records if indices is None else [self.records[i] for i in indices]
        return np.stack([r.vector for r in recs]) if recs else np.zeros((0, self.dim))

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class SynthSpec:
    """Параметры синтетического набора"""
    num_classes: int
    dim: int
    samples_per_class: int
    mean_scale: float = 1.0
    noise_lo: float = 0.05
    noise_hi: float = 0.5
    seed: int = 1
    nuisance_rank: int = 0
    nuisance_scale: float = 0.0

    def validate(self) -> None:
        if self.num_classes < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise ConfigError("SynthSpec: num_classes, dim и samples_per_class должны быть >= 1")
        if self.mean_scale <= 0:
            raise ConfigError("SynthSpec: mean_scale должен быть положительным")
        if self.noise_lo < 0 or self.noise_lo > self.noise_hi:
            raise ConfigError(
                f"SynthSpec: нужен 0 <= noise_lo <= noise_hi, получено [{self.noise_lo}, {self.noise_hi}]")
        if not 0 <= self.nuisance_rank <= self.dim or self.nuisance_scale < 0:
            raise ConfigError(f"SynthSpec: нужен 0 <= nuisance_rank <= dim и nuisance_scale >= 0, получено "
                              f"rank={self.nuisance_rank}, scale={self.nuisance_scale}")


# =============================================================================
# ЧТЕНИЕ И ЗАПИСЬ
# =============================================================================

def load(path: str, split: str = 'base') -> EmbeddingDataset:
    """
    Загружает файл эмбеддингов.

    Параметры:
        path (str): путь к файлу формата EMB v1
        split (str): 'base' или 'novel'

    Возвращает:
        EmbeddingDataset

    Исключения:
        HeaderError: неверный заголовок или пустой файл
        ValueCountError: неверное число значений в строке
        DuplicateIdError: повторяющийся id
        ParseError: нечисловые поля, NaN, отрицательная метка (все - с номером строки)
    """
    dim = None
    records: List[EmbeddingRecord] = []
    seen = set()
    with open(path, 'r', encoding='utf-8') as f:
        for line_num, raw in enumerate(f, 1):
            line = raw.strip()
            if dim is None:
                match = HEADER_RE.match(line)
                if not match or int(match.group(1)) < 1:
                    raise HeaderError(f"Неверный заголовок '{line}', ожидается "
                                     f"'{EMBEDDING_FILE_MAGIC} {EMBEDDING_FILE_VERSION} dim=<D>'",
                                     line_num, path)
                dim = int(match.group(1))
                continue
            if not line or line.startswith('#'):
                continue

            parts = [p.strip() for p in line.split(',')]
            if len(parts) != dim + 2:
                raise ValueCountError(f"Ожидалось {dim} значений, найдено {len(parts) - 2}",
                                 line_num, path)
            rec_id = parts[0]
            if not rec_id:
                raise ParseError("Пустой id", line_num, path)
            if rec_id in seen:
                raise DuplicateIdError(f"Повторяющийся id '{rec_id}'", line_num, path)
            try:
                label = int(parts[1])
                vector = np.array([float(v) for v in parts[2:]], dtype=np.float64)
            except ValueError as e:
                raise ParseError(f"Нечисловое поле: {e}", line_num, path) from None
            if label < 0:
                raise ParseError(f"Отрицательная метка {label}", line_num, path)
            if not np.all(np.isfinite(vector)):
                raise ParseError("Вектор содержит NaN/Inf", line_num, path)
            seen.add(rec_id)
            records.append(EmbeddingRecord(rec_id, label, vector))

    if dim is None:
        raise HeaderError("Пустой файл: нет заголовка", 1, path)
    return EmbeddingDataset.build(dim, records, split)


def save(dataset: EmbeddingDataset, path: str) -> None:
    """Записывает набор в формате EMB v1 (17 значащих цифр - точный round-trip)"""
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"{EMBEDDING_FILE_MAGIC} {EMBEDDING_FILE_VERSION} dim={dataset.dim}\n")
        for rec in dataset.records:
            values = ','.join(f"{v:.{FLOAT_DIGITS}g}" for v in rec.vector)
            f.write(f"{rec.id},{rec.class_label},{values}\n")


def load_splits(base_path: str, novel_path: str) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
    """Загружает base и novel сплиты и проверяет, что классы не пересекаются"""
    base = load(base_path, 'base')
    novel = load(novel_path, 'novel')
    check_disjoint(base, novel)
    return base, novel


def check_disjoint(base: EmbeddingDataset, novel: EmbeddingDataset) -> None:
    if base.dim != novel.dim:
        raise DataError(f"Размерности сплитов различаются: {base.dim} и {novel.dim}")
    overlap = sorted(set(base.labels) & set(novel.labels))
    if overlap:
        raise DataError(f"Классы base и novel пересекаются: {overlap[:10]}")


# =============================================================================
# СИНТЕТИЧЕСКИЕ ДАННЫЕ
# =============================================================================

def generate_synthetic(spec: SynthSpec, split: str = 'base') -> EmbeddingDataset:
    """
    Генерирует гетероскедастичный набор.

    Для класса k: центр m_k = mean_scale·N(0, I), масштаб шума
    s_k ~ U[noise_lo, noise_hi], сэмплы m_k + s_k·N(0, I). Каждая величина
    берётся из собственного потока (seed, тип, k), поэтому набор
    воспроизводится бит-в-бит.

    При nuisance_rank > 0 к каждому сэмплу добавляется nuisance_scale·U·g,
    g ~ N(0, I_r): U (D×r) общий для всех классов, т.е. мешающее
    подпространство одно на base и novel - его может подавить обученный
    адаптер.
    """
    spec.validate()
    rng = Rng(spec.seed, ("synthetic",))
    basis = None
    if spec.nuisance_rank:
        basis = rng.child("nuisance").normal((spec.dim, spec.nuisance_rank)) / np.sqrt(spec.dim)
    records: List[EmbeddingRecord] = []
    class_noise: Dict[int, float] = {}
    for k in range(spec.num_classes):
        center = spec.mean_scale * rng.child("mean", k).normal(spec.dim)
        noise = float(rng.child("scale", k).uniform(spec.noise_lo, spec.noise_hi))
        samples = center + noise * rng.child("noise", k).normal((spec.samples_per_class, spec.dim))
        if basis is not None:
            g = rng.child("nuisance", k).normal((spec.samples_per_class, spec.nuisance_rank))
            samples = samples + spec.nuisance_scale * (g @ basis.T)
        class_noise[k] = noise
        for i in range(spec.samples_per_class):
            records.append(EmbeddingRecord(f"c{k}_{i}", k, samples[i].copy()))
    return EmbeddingDataset.build(spec.dim, records, split, class_noise)



def split_by_class(dataset: EmbeddingDataset, num_base: int) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
    """Первые num_base классов -> base, остальные -> novel"""
    labels = dataset.labels
    if not 0 < num_base < len(labels):
        raise ConfigError(f"Нельзя выделить {num_base} base-классов из {len(labels)}")
    base_labels = set(labels[:num_base])
    base = [r for r in dataset.records if r.class_label in base_labels]
    novel = [r for r in dataset.records if r.class_label not in base_labels]
    noise = dataset.class_noise or {}
    return (
        EmbeddingDataset.build(dataset.dim, base, 'base',
                               {k: v for k, v in noise.items() if k in base_labels} or None),
        EmbeddingDataset.build(dataset.dim, novel, 'novel',
                               {k: v for k, v in noise.items() if k not in base_labels} or None),
    )
