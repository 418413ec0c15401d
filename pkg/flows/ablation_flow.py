"""
=============================================================================
flows/ablation_flow.py - Пайплайн абляций
=============================================================================

Этот модуль прогоняет серию экспериментов "обучение -> оценка" с общими
seed и собирает две таблицы:

1. Сетка моделей: неопределённость на этапе 1 (w U / w/o U) и на этапе 2
   (w U / w/o U / этапа нет). Модели 1-2 - только этап 1, модели 3-6 -
   четыре комбинации двух этапов.
2. Методы моделирования неопределённости: база 'B' (без σ) и 'B + conv',
   'B + graph', 'B + fc' с неопределённостью на обоих этапах (FC - только
   на этапе 2: его параметры привязаны к одному N).

Эксперимент определяется ключом (σ на этапе 1, σ на этапе 2, оценщик,
seed); одинаковые ключи двух таблиц считаются один раз, поэтому база
в обеих таблицах - буквально один и тот же прогон.

Синтетический набор генерируется заново для каждого seed. Уникальные
эксперименты независимы и идут параллельно (threads из конфига);
результат от числа потоков не зависит.

=============================================================================
"""

import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd

from dask_jobs import parallel_map
from processing.console import safe_print
from processing.embeddings import EmbeddingDataset
from processing.evaluation import evaluate, sigma_profile
from processing.models import RunConfig
from processing.orchestrator import load_datasets, synthetic_splits
from processing.report_generator import (
    MODEL_GRID,
    estimator_table,
    format_table,
    grid_table,
    write_ablation,
)
from processing.trainer import run


# =============================================================================
# ЗАДАЧИ
# =============================================================================

class ExperimentTask:
    """Базовый класс задачи пайплайна"""

    def __init__(self, name: str):
        self.name = name
        self.start_time = None
        self.end_time = None
        self.status = "pending"
        self.result = None
        self.error = None

    def run(self, *args, **kwargs):
        """Запускает задачу"""
        self.start_time = datetime.now()
        self.status = "running"
        try:
            self.result = self.execute(*args, **kwargs)
            self.status = "completed"
        except Exception as e:
            self.status = "failed"
            self.error = str(e)
            raise
        finally:
            self.end_time = datetime.now()
        return self.result

    def execute(self, *args, **kwargs):
        """Переопределите в подклассе"""
        raise NotImplementedError

    @property
    def duration(self) -> float:
        """Длительность выполнения в секундах"""
        if self.start_time and self.end_time:
            return (self.end_time - self.start_time).total_seconds()
        return 0


@dataclass(frozen=True)
class ExperimentKey:
    stage1_uncertainty: bool
    stage2_uncertainty: Optional[bool]  # None - этапа 2 нет
    estimator: str
    seed: int


class TrainEvalTask(ExperimentTask):
    """Обучение одной конфигурации и оценка на novel-сплите"""

    def __init__(self, key: ExperimentKey):
        super().__init__(f"experiment[{key}]")
        self.key = key

    def execute(self, config: RunConfig, base: EmbeddingDataset, novel: EmbeddingDataset) -> Dict:
        key = self.key
        train = config.train.model_copy(deep=True)
        train.seed = key.seed
        train.estimator = key.estimator
        train.stage1.uncertainty = key.stage1_uncertainty
        if key.stage2_uncertainty is None:
            train.stage2.epochs = 0
        else:
            train.stage2.uncertainty = key.stage2_uncertainty
        eval_config = config.eval.model_copy(update={'seed': key.seed})

        state, log = run(train, base)
        report = evaluate(state, novel, eval_config)
        row = {
            'estimator': key.estimator,
            'seed': key.seed,
            'accuracy': report.mean,
            'ci95': report.ci95,
            'final_loss': float(log['mean_loss'].iloc[-1]) if len(log) else float('nan'),
            'sigma_high': float('nan'),
            'sigma_low': float('nan'),
        }
        fits_way = state.estimator is not None and state.estimator.n_way in (None, eval_config.way)
        if fits_way and novel.class_noise and (key.stage1_uncertainty or key.stage2_uncertainty):
            profile = sigma_profile(state, novel, eval_config, episodes=config.ablation.sigma_episodes)
            row['sigma_high'] = profile.high_noise_sigma
            row['sigma_low'] = profile.low_noise_sigma
        return row


# =============================================================================
# ПАЙПЛАЙН
# =============================================================================

def model_key(model: int, estimator: str, seed: int) -> ExperimentKey:
    s1, s2 = MODEL_GRID[model]
    uses_sigma = s1 or bool(s2)
    return ExperimentKey(s1, s2, estimator if uses_sigma else 'none', seed)


def estimator_key(estimator: str, seed: int) -> ExperimentKey:
    if estimator == 'none':
        return ExperimentKey(False, False, 'none', seed)
    return ExperimentKey(estimator != 'fc', True, estimator, seed)


class AblationPipeline:
    """
    Полный прогон абляций.

    Использование:
        pipeline = AblationPipeline(run_config, Path('storage/runs/ablate'))
        grid, estimators = pipeline.run()
    """

    def __init__(self, config: RunConfig, out: Path):
        self.config = config
        self.out = Path(out)
        self.tasks: List[TrainEvalTask] = []
        self._cache: Dict[ExperimentKey, Dict] = {}
        self._data: Dict[int, Tuple[EmbeddingDataset, EmbeddingDataset]] = {}

    @property
    def grid_estimator(self) -> str:
        kind = self.config.train.estimator
        return kind if kind not in ('none', 'fc') else 'graph'

    def _datasets(self, seed: int) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
        if seed not in self._data:
            synthetic = self.config.dataset.synthetic
            if synthetic is not None:
                self._data[seed] = synthetic_splits(synthetic, seed)
            else:
                self._data[seed] = load_datasets(self.config)
        return self._data[seed]

    def _execute(self, task: "TrainEvalTask") -> Dict:
        key = task.key
        safe_print(f">>> [ABLATE] s1={'U' if key.stage1_uncertainty else '-'} "
                   f"s2={'no' if key.stage2_uncertainty is None else ('U' if key.stage2_uncertainty else '-')} "
                   f"estimator={key.estimator} seed={key.seed}")
        return task.run(self.config, *self._data[key.seed])

    def prefetch(self, keys: List[ExperimentKey]) -> None:
        """Прогоняет ещё не посчитанные эксперименты параллельно, по одному на поток"""
        pending = [k for k in dict.fromkeys(keys) if k not in self._cache]
        for key in pending:
            self._datasets(key.seed)
        tasks = [TrainEvalTask(key) for key in pending]
        self.tasks.extend(tasks)
        for task, row in zip(tasks, parallel_map(self._execute, tasks, self.config.threads)):
            self._cache[task.key] = row

    def experiment(self, key: ExperimentKey) -> Dict:
        self.prefetch([key])
        return dict(self._cache[key])

    def grid_keys(self) -> List[ExperimentKey]:
        return [model_key(model, self.grid_estimator, seed)
                for model in self.config.ablation.cells for seed in self.config.ablation.seeds]

    def estimator_keys(self) -> List[ExperimentKey]:
        return [estimator_key(estimator, seed)
                for estimator in ['none', *self.config.ablation.estimators]
                for seed in self.config.ablation.seeds]

    def grid_runs(self) -> pd.DataFrame:
        self.prefetch(self.grid_keys())
        rows = []
        for model in self.config.ablation.cells:
            for seed in self.config.ablation.seeds:
                row = self.experiment(model_key(model, self.grid_estimator, seed))
                rows.append({'model': model, **row})
        return pd.DataFrame(rows)

    def estimator_runs(self) -> pd.DataFrame:
        self.prefetch(self.estimator_keys())
        return pd.DataFrame([self.experiment(key) for key in self.estimator_keys()])

    def run(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        safe_print(f"\n{'=' * 60}\n[ABLATE] Сетка моделей и сравнение оценщиков\n{'=' * 60}")
        start = time.perf_counter()
        self.prefetch(self.grid_keys() + self.estimator_keys())
        grid_rows = self.grid_runs()
        est_rows = self.estimator_runs()
        runs = pd.concat([grid_rows.assign(table='grid'), est_rows.assign(table='estimators')],
                         ignore_index=True)

        grid = grid_table(grid_rows)
        estimators = estimator_table(est_rows)
        write_ablation(runs, grid, estimators, self.out)
        safe_print(">>> [ABLATE] Сетка моделей:\n" + format_table(grid))
        safe_print(">>> [ABLATE] Методы неопределённости:\n" + format_table(estimators))
        safe_print(f">>> [ABLATE] Экспериментов: {len(self.tasks)}, "
                   f"время: {time.perf_counter() - start:.1f} с")
        return grid, estimators



def run_ablation(config: RunConfig, out: Path) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Удобная функция для запуска абляций"""
    return AblationPipeline(config, out).run()
