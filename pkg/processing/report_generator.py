"""
=============================================================================
processing/report_generator.py - Модуль генерации отчетов
=============================================================================

Этот модуль превращает результаты в файлы:
- отчёт оценки: читаемая таблица и однострочная сводка mean,ci95,E,seed
- точности по эпизодам (для тестов значимости)
- лог обучения по эпохам
- таблицы абляций: сетка "с неопределённостью / без" по этапам
  и сравнение оценщиков σ

Все CSV пишутся pandas с фиксированным форматом чисел, поэтому
повторный запуск с тем же seed даёт побайтно те же файлы.

=============================================================================
"""

from pathlib import Path
from typing import Dict, List

import pandas as pd

from .console import safe_print
from .evaluation import EvalReport


FLOAT_FORMAT = '%.10g'

# Сетка моделей: номер -> (неопределённость на этапе 1, на этапе 2 или None - без этапа 2)
MODEL_GRID = {
    1: (False, None),
    2: (True, None),
    3: (False, False),
    4: (False, True),
    5: (True, False),
    6: (True, True),
}


def _flag(value) -> str:
    if value is None:
        return 'no'
    return 'w U' if value else 'w/o U'


# =============================================================================
# ОЦЕНКА
# =============================================================================

def eval_summary_frame(report: EvalReport) -> pd.DataFrame:
    """Однострочная сводка mean,ci95,E,seed"""
    return pd.DataFrame([{'mean': report.mean, 'ci95': report.ci95,
                          'E': report.episodes, 'seed': report.seed}])


def eval_table(report: EvalReport) -> str:
    """Читаемый отчёт оценки"""
    cfg = report.config
    lines = [
        "Оценка few-shot классификации",
        "=" * 40,
        f"Эпизоды (E):      {report.episodes}",
        f"N-way / K-shot:   {cfg.get('way', '?')} / {cfg.get('shot', '?')}",
        f"Запросов на класс: {cfg.get('queries', '?')}",
        f"Seed:             {report.seed}",
        f"Точность:         {100 * report.mean:.2f}% +- {100 * report.ci95:.2f}%",
    ]
    if report.degenerate:
        lines.append("Примечание:       E=1, доверительный интервал не определён (ci95=0)")
    return "\n".join(lines) + "\n"


def write_eval_report(report: EvalReport, out: Path, dump_episodes: bool = False) -> Dict[str, Path]:
    """
    Сохраняет отчёт оценки.

    Возвращает:
        Dict[str, Path]: 'table', 'summary' и, при dump_episodes, 'episodes'
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {'table': out / 'eval_report.txt', 'summary': out / 'eval_summary.csv'}
    paths['table'].write_text(eval_table(report), encoding='utf-8')
    eval_summary_frame(report).to_csv(paths['summary'], index=False, float_format=FLOAT_FORMAT)
    if dump_episodes:
        paths['episodes'] = out / 'eval_episodes.csv'
        pd.DataFrame({'episode': range(report.episodes), 'accuracy': report.accuracies}) \
            .to_csv(paths['episodes'], index=False, float_format=FLOAT_FORMAT)
    safe_print(f">>> [REPORT] Отчёт оценки: {paths['table']}")
    return paths


# =============================================================================
# ОБУЧЕНИЕ
# =============================================================================

def write_train_log(log: pd.DataFrame, out: Path) -> Path:
    """Лог обучения: stage,epoch,mean_loss,tau,mean_sigma"""
    path = Path(out) / 'train_log.csv'
    log.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


# =============================================================================
# АБЛЯЦИИ
# =============================================================================

def grid_table(runs: pd.DataFrame) -> pd.DataFrame:
    """
    Сводка по сетке моделей (по всем seed).

    Параметры:
        runs: строки с колонками model, estimator, seed, accuracy, ci95,
              sigma_high, sigma_low

    Возвращает:
        DataFrame: model, stage1, stage2, estimator, mean_accuracy,
        seed_std, mean_ci95, sigma_high, sigma_low, sigma_pass_rate
    """
    if runs.empty:
        return pd.DataFrame()
    runs = runs.assign(sigma_pass=runs['sigma_high'] > runs['sigma_low'])
    table = runs.groupby(['model', 'estimator'], sort=True).agg(
        mean_accuracy=('accuracy', 'mean'),
        seed_std=('accuracy', 'std'),
        mean_ci95=('ci95', 'mean'),
        sigma_high=('sigma_high', 'mean'),
        sigma_low=('sigma_low', 'mean'),
        sigma_pass_rate=('sigma_pass', 'mean'),
        seeds=('seed', 'count'),
    ).reset_index()
    table.insert(1, 'stage1', table['model'].map(lambda m: _flag(MODEL_GRID[m][0])))
    table.insert(2, 'stage2', table['model'].map(lambda m: _flag(MODEL_GRID[m][1])))
    return table


def estimator_table(runs: pd.DataFrame) -> pd.DataFrame:
    """
    Сравнение методов моделирования неопределённости.

    Базовая модель 'B' - строки с estimator == 'none'; остальные строки
    получают подпись 'B + <оценщик>' и прирост к базе.
    """
    if runs.empty:
        return pd.DataFrame()
    table = runs.groupby('estimator', sort=False).agg(
        mean_accuracy=('accuracy', 'mean'),
        seed_std=('accuracy', 'std'),
        mean_ci95=('ci95', 'mean'),
        seeds=('seed', 'count'),
    ).reset_index()
    table.insert(0, 'method', table['estimator'].map(lambda e: 'B' if e == 'none' else f'B + {e}'))
    base = table.loc[table['estimator'] == 'none', 'mean_accuracy']
    table['delta_vs_base'] = table['mean_accuracy'] - (float(base.iloc[0]) if len(base) else float('nan'))
    return table


def write_ablation(runs: pd.DataFrame, grid: pd.DataFrame, estimators: pd.DataFrame,
                   out: Path) -> List[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / 'ablation_runs.csv', out / 'ablation_grid.csv', out / 'ablation_estimators.csv']
    for frame, path in zip((runs, grid, estimators), paths):
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    safe_print(f">>> [REPORT] Таблицы абляций: {out}")
    return paths


def format_table(frame: pd.DataFrame) -> str:
    """Таблица для консоли (точности в процентах)"""
    if frame.empty:
        return "(пусто)"
    shown = frame.copy()
    for col in ('mean_accuracy', 'seed_std', 'mean_ci95', 'delta_vs_base'):
        if col in shown:
            shown[col] = (100 * shown[col]).round(2)
    return shown.to_string(index=False)
