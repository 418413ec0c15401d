"""
=============================================================================
processing/models.py - Pydantic схемы конфигурации запуска
=============================================================================

Этот модуль содержит все Pydantic схемы для валидации JSON-конфига.
Неизвестные ключи запрещены на всех уровнях, перекрёстные ограничения
проверяются валидаторами, поэтому ошибка конфига обнаруживается до
начала любой работы.

=============================================================================
"""

import json
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import (
    DEFAULT_EVAL_EPISODES,
    DEFAULT_QUERIES,
    DEFAULT_SHOT,
    DEFAULT_WAY,
    GRADCHECK_SCALE_FLOOR,
    GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
    LEAKY_SLOPE,
    MC_SAMPLES,
    NUM_GROUPS,
    TAU_INIT,
)
from errors import ConfigError


class StrictModel(BaseModel):
    """Базовая модель: лишние ключи - ошибка"""
    model_config = ConfigDict(extra='forbid')


# =============================================================================
# ДАННЫЕ
# =============================================================================

class SyntheticConfig(StrictModel):
    """Синтетический гетероскедастичный набор (base + novel классы)"""
    base_classes: int = Field(default=20, ge=1, description="Количество base-классов")
    novel_classes: int = Field(default=10, ge=1, description="Количество novel-классов")
    dim: int = Field(default=64, ge=1, description="Размерность эмбеддинга D")
    samples_per_class: int = Field(default=40, ge=1)
    # Центры близко друг к другу относительно шума: на шумных классах
    # базовая модель ошибается, на чистых - нет
    mean_scale: float = Field(default=0.15, gt=0)
    noise_lo: float = Field(default=0.05, ge=0)
    noise_hi: float = Field(default=0.5, ge=0)
    nuisance_rank: int = Field(default=4, ge=0, description="Ранг общего мешающего подпространства")
    nuisance_scale: float = Field(default=0.5, ge=0)
    seed: int = Field(default=1, ge=0)

    @model_validator(mode='after')
    def check_noise_range(self):
        if self.noise_lo > self.noise_hi:
            raise ValueError(f'noise_lo ({self.noise_lo}) больше noise_hi ({self.noise_hi})')
        if self.nuisance_rank > self.dim:
            raise ValueError(f'nuisance_rank ({self.nuisance_rank}) больше dim ({self.dim})')
        return self


class DatasetConfig(StrictModel):
    """Источник данных: пара файлов или синтетика"""
    base_path: Optional[str] = None
    novel_path: Optional[str] = None
    synthetic: Optional[SyntheticConfig] = None

    @model_validator(mode='after')
    def check_single_source(self):
        has_files = self.base_path is not None or self.novel_path is not None
        if has_files and self.synthetic is not None:
            raise ValueError('Укажите либо base_path/novel_path, либо synthetic')
        if has_files and (self.base_path is None or self.novel_path is None):
            raise ValueError('Нужны оба файла: base_path и novel_path')
        if not has_files and self.synthetic is None:
            self.synthetic = SyntheticConfig()
        return self


# =============================================================================
# ОБУЧЕНИЕ
# =============================================================================

class Stage1Config(StrictModel):
    """Этап 1: классификационное предобучение по всем base-классам"""
    epochs: int = Field(default=2, ge=0)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=0.05, ge=0)
    uncertainty: bool = False


class Stage2Config(StrictModel):
    """Этап 2: эпизодическое мета-обучение"""
    epochs: int = Field(default=4, ge=0)
    episodes_per_epoch: int = Field(default=50, ge=1)
    way: int = Field(default=DEFAULT_WAY, ge=1)
    shot: int = Field(default=DEFAULT_SHOT, ge=1)
    queries: int = Field(default=DEFAULT_QUERIES, ge=1)
    lr: float = Field(default=0.01, ge=0)
    uncertainty: bool = False


class OptimizerConfig(StrictModel):
    kind: Literal['sgd'] = 'sgd'
    momentum: float = Field(default=0.9, ge=0, lt=1)
    grad_clip: Optional[float] = Field(default=None, gt=0, description="Порог нормы градиента")


class TrainConfig(StrictModel):
    """Двухэтапное обучение"""
    stage1: Stage1Config = Field(default_factory=Stage1Config)
    stage2: Stage2Config = Field(default_factory=Stage2Config)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    estimator: Literal['graph', 'conv', 'fc', 'none'] = 'graph'
    num_groups: int = Field(default=NUM_GROUPS, ge=1, description="L")
    mc_samples: int = Field(default=MC_SAMPLES, ge=1, description="T")
    tau_init: float = Field(default=TAU_INIT, gt=0)
    leaky_slope: float = Field(default=LEAKY_SLOPE, gt=0, le=1)
    shared_eps: bool = False
    adapter: bool = True
    seed: int = Field(default=1, ge=0)

    @model_validator(mode='after')
    def check_estimator(self):
        uses_u = self.stage1.uncertainty or self.stage2.uncertainty
        if self.estimator == 'none' and uses_u:
            raise ValueError("estimator='none' несовместим с uncertainty=true")
        if self.estimator == 'fc' and self.stage1.uncertainty:
            raise ValueError("FC-оценщик привязан к одному N и не может работать на этапе 1")
        return self


# =============================================================================
# ОЦЕНКА, АБЛЯЦИИ, ПРОВЕРКА ГРАДИЕНТОВ
# =============================================================================

class EvalConfig(StrictModel):
    episodes: int = Field(default=DEFAULT_EVAL_EPISODES, ge=1)
    way: int = Field(default=DEFAULT_WAY, ge=1)
    shot: int = Field(default=DEFAULT_SHOT, ge=1)
    queries: int = Field(default=DEFAULT_QUERIES, ge=1)
    seed: int = Field(default=1, ge=0)
    dump_episodes: bool = False


class AblationConfig(StrictModel):
    """Сетка "с неопределённостью / без" по этапам и сравнение оценщиков"""
    cells: List[int] = Field(default_factory=lambda: [3, 4, 5, 6])
    estimators: List[Literal['conv', 'graph', 'fc']] = Field(default_factory=lambda: ['conv', 'graph'])
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5])
    sigma_episodes: int = Field(default=200, ge=1, description="Эпизодов для профиля σ")

    @field_validator('cells')
    @classmethod
    def check_cells(cls, v):
        bad = [c for c in v if c not in range(1, 7)]
        if bad:
            raise ValueError(f'Номера моделей должны быть 1..6, получено {bad}')
        return v

    @field_validator('seeds')
    @classmethod
    def check_seeds(cls, v):
        if not v:
            raise ValueError('Нужен хотя бы один seed')
        return v


class GradcheckConfig(StrictModel):
    way: int = Field(default=5, ge=1)
    queries: int = Field(default=2, ge=1, description="Запросов на одной ленте")
    dim: int = Field(default=16, ge=1)
    num_groups: int = Field(default=4, ge=1)
    mc_samples: int = Field(default=4, ge=1)
    estimator: Literal['graph', 'conv', 'fc', 'none'] = 'graph'
    step: float = Field(default=GRADCHECK_STEP, gt=0)
    tolerance: float = Field(default=GRADCHECK_TOLERANCE, gt=0)
    scale_floor: float = Field(default=GRADCHECK_SCALE_FLOOR, gt=0,
                               description="Нижняя граница знаменателя относительной ошибки")
    seed: int = Field(default=1, ge=0)

    @model_validator(mode='after')
    def check_groups(self):
        if self.dim % self.num_groups:
            raise ValueError(f'num_groups={self.num_groups} должно делить dim={self.dim}')
        if self.estimator == 'graph' and self.way < 2:
            raise ValueError('Графовому оценщику в train-режиме нужно way >= 2')
        return self


class RunConfig(StrictModel):
    """Полный конфиг запуска"""
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    output_dir: Optional[str] = None
    threads: int = Field(default=1, ge=1)

    @model_validator(mode='after')
    def check_groups_divide_dim(self):
        synth = self.dataset.synthetic
        if synth is not None and synth.dim % self.train.num_groups:
            raise ValueError(f'train.num_groups={self.train.num_groups} должно делить '
                             f'dataset.synthetic.dim={synth.dim}')
        return self


# =============================================================================
# ЗАГРУЗКА И ПЕРЕОПРЕДЕЛЕНИЯ
# =============================================================================

def parse_override(item: str) -> tuple:
    """'a.b.c=value' -> (['a', 'b', 'c'], value); value разбирается как JSON, иначе строка"""
    if '=' not in item:
        raise ConfigError(f"Переопределение '{item}' должно иметь вид ключ=значение")
    key, raw = item.split('=', 1)
    path = [p for p in key.strip().split('.') if p]
    if not path:
        raise ConfigError(f"Пустой ключ в переопределении '{item}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Применяет переопределения к сырому словарю конфига (флаг побеждает файл)"""
    for item in overrides or []:
        path, value = parse_override(item)
        node = data
        for key in path[:-1]:
            child = node.get(key)
            if child is None:
                child = {}
                node[key] = child
            if not isinstance(child, dict):
                raise ConfigError(f"'{key}' в '{item}' не является разделом конфига")
            node = child
        node[path[-1]] = value
    return data


def load_run_config(path: Optional[str] = None, overrides: Optional[List[str]] = None) -> RunConfig:
    """
    Загружает и валидирует конфиг.

    Параметры:
        path: JSON-файл (None - все значения по умолчанию)
        overrides: список 'ключ=значение'

    Исключения:
        ConfigError: файл не JSON-объект или не прошёл схему
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: некорректный JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: корень конфига должен быть объектом")
    data = apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Конфиг не прошёл валидацию:\n{e}") from None
