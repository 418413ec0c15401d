"""
=============================================================================
processing/orchestrator.py - Главный модуль-оркестратор команд
=============================================================================

Этот модуль связывает модули в команды CLI:
1. gen       - синтетические base/novel файлы эмбеддингов + дайджесты
2. train     - двухэтапное обучение, чекпоинт и лог
3. eval      - оценка чекпоинта на novel-эпизодах
4. ablate    - сетка неопределённости по этапам и сравнение оценщиков
5. gradcheck - проверка градиентов полного пайплайна конечными разностями

Каждая команда - чистая функция (конфиг, входные файлы, seed) ->
(файлы результатов, код возврата). Ошибки UafsError превращаются в код
возврата в run_command.

=============================================================================
"""

import hashlib
import traceback
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from config import EXIT_DATA, EXIT_NUMERIC, EXIT_OK
from errors import DataError, GradcheckFailure, UafsError
from numerics import Rng, check_gradients, ops
from .console import safe_print
from .embeddings import (
    EmbeddingDataset,
    SynthSpec,
    generate_synthetic,
    load_splits,
    save,
    split_by_class,
)
from .evaluation import evaluate
from .models import GradcheckConfig, RunConfig, SyntheticConfig
from .report_generator import write_eval_report, write_train_log
from .storage import load_checkpoint, save_checkpoint, write_effective_config
from .trainer import ADAPTER, ESTIMATOR_PREFIX, RHO, TrainState, query_objective, run
from .uncertainty import McConfig, draw_eps, init_estimator

# Импортируем модуль метрик для мониторинга
try:
    import metrics
    METRICS_ENABLED = True
except ImportError:
    METRICS_ENABLED = False


BASE_FILE = 'base.emb'
NOVEL_FILE = 'novel.emb'
NOISE_FILE = 'class_noise.csv'
CHECKPOINT_FILE = 'model.ckpt'


# =============================================================================
# ДАННЫЕ
# =============================================================================

def synth_spec(synthetic: SyntheticConfig, seed: Optional[int] = None) -> SynthSpec:
    """Одна спецификация на base+novel классы (метки не пересекаются)"""
    return SynthSpec(
        num_classes=synthetic.base_classes + synthetic.novel_classes,
        dim=synthetic.dim,
        samples_per_class=synthetic.samples_per_class,
        mean_scale=synthetic.mean_scale,
        noise_lo=synthetic.noise_lo,
        noise_hi=synthetic.noise_hi,
        seed=synthetic.seed if seed is None else seed,
        nuisance_rank=synthetic.nuisance_rank,
        nuisance_scale=synthetic.nuisance_scale,
    )


def synthetic_splits(synthetic: SyntheticConfig, seed: Optional[int] = None) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
    full = generate_synthetic(synth_spec(synthetic, seed))
    return split_by_class(full, synthetic.base_classes)


def load_class_noise(path: Path) -> Dict[int, float]:
    frame = pd.read_csv(path)
    return {int(c): float(s) for c, s in zip(frame['class_label'], frame['noise'])}


def load_datasets(config: RunConfig) -> Tuple[EmbeddingDataset, EmbeddingDataset]:
    """
    base и novel сплиты из файлов или синтетики.

    Рядом с novel-файлом может лежать class_noise.csv (его пишет gen) -
    тогда у сплитов известен шум классов.
    """
    ds = config.dataset
    if ds.synthetic is not None:
        return synthetic_splits(ds.synthetic)
    base, novel = load_splits(ds.base_path, ds.novel_path)
    noise_path = Path(ds.novel_path).parent / NOISE_FILE
    if noise_path.exists():
        noise = load_class_noise(noise_path)
        base = EmbeddingDataset.build(base.dim, base.records, 'base',
                                      {c: noise[c] for c in base.labels if c in noise} or None)
        novel = EmbeddingDataset.build(novel.dim, novel.records, 'novel',
                                       {c: noise[c] for c in novel.labels if c in noise} or None)
    return base, novel


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# =============================================================================
# КОМАНДЫ
# =============================================================================

def cmd_gen(config: RunConfig, out: Path) -> Dict[str, str]:
    """
    Пишет base.emb, novel.emb и class_noise.csv; печатает sha256 файлов.

    Возвращает:
        Dict[str, str]: имя файла -> sha256
    """
    synthetic = config.dataset.synthetic or SyntheticConfig()
    base, novel = synthetic_splits(synthetic)
    paths = {BASE_FILE: out / BASE_FILE, NOVEL_FILE: out / NOVEL_FILE, NOISE_FILE: out / NOISE_FILE}
    save(base, str(paths[BASE_FILE]))
    save(novel, str(paths[NOVEL_FILE]))

    noise = {**(base.class_noise or {}), **(novel.class_noise or {})}
    pd.DataFrame({
        'class_label': sorted(noise),
        'split': ['base' if c in base.class_index else 'novel' for c in sorted(noise)],
        'noise': [noise[c] for c in sorted(noise)],
    }).to_csv(paths[NOISE_FILE], index=False, float_format='%.17g')

    digests = {name: file_digest(path) for name, path in paths.items()}
    safe_print(f">>> [GEN] base: {base.num_classes} классов, {len(base)} записей; "
               f"novel: {novel.num_classes} классов, {len(novel)} записей; D={base.dim}")
    for name, digest in digests.items():
        safe_print(f">>> [GEN] {digest}  {paths[name]}")
    return digests


def cmd_train(config: RunConfig, out: Path) -> TrainState:
    """Двухэтапное обучение на base-сплите; пишет model.ckpt и train_log.csv"""
    base, _ = load_datasets(config)
    state, log = run(config.train, base)
    save_checkpoint(state, out / CHECKPOINT_FILE)
    write_train_log(log, out)
    safe_print(f">>> [TRAIN] Чекпоинт: {out / CHECKPOINT_FILE}")
    return state


def cmd_eval(config: RunConfig, out: Path, checkpoint: Optional[str] = None):
    """Оценка чекпоинта (по умолчанию <out>/model.ckpt) на novel-сплите"""
    path = Path(checkpoint) if checkpoint else out / CHECKPOINT_FILE
    state = load_checkpoint(path, seed=config.train.seed)
    _, novel = load_datasets(config)
    if state.dim != novel.dim:
        raise DataError(f"Чекпоинт для D={state.dim}, а novel-сплит имеет D={novel.dim}")
    report = evaluate(state, novel, config.eval, threads=config.threads)
    write_eval_report(report, out, dump_episodes=config.eval.dump_episodes)
    return report


def cmd_ablate(config: RunConfig, out: Path):
    """Сетка моделей и сравнение оценщиков (см. flows/ablation_flow.py)"""
    from flows.ablation_flow import AblationPipeline
    return AblationPipeline(config, out).run()


# =============================================================================
# ПРОВЕРКА ГРАДИЕНТОВ
# =============================================================================

def gradcheck_case(gc: GradcheckConfig) -> Tuple[Callable, Dict[str, np.ndarray]]:
    """
    Случайный эпизод 1-shot с gc.queries запросами на одной ленте и
    замороженным ε.

    Листья: прототипы, запрос, ρ, адаптер и все параметры оценщика.
    При estimator='none' проверяется только базовая голова.

    Возвращает:
        (build(tape, leaves) -> потери, значения листьев)
    """
    rng = Rng(gc.seed, ("gradcheck",))
    values: Dict[str, np.ndarray] = {
        'input.protos': rng.child("protos").normal((gc.way, gc.dim)),
        'input.query': rng.child("query").normal((gc.queries, gc.dim)),
        RHO: np.array([[np.log(2.0)]]),
        ADAPTER: np.eye(gc.dim) + 0.1 * rng.child("adapter").normal((gc.dim, gc.dim)),
    }
    estimator = None
    if gc.estimator != 'none':
        estimator = init_estimator(gc.estimator, gc.num_groups, rng.child("estimator"),
                                   n_way=gc.way if gc.estimator == 'fc' else None)
        # Нулевой выходной слой даёт нулевые градиенты глубже; берём случайный
        for name in estimator.names():
            values[ESTIMATOR_PREFIX + name] = estimator.tensors[name] \
                + 0.3 * rng.child("perturb", name).normal(estimator.tensors[name].shape)
    state = TrainState(dim=gc.dim, rho=values[RHO], adapter=values[ADAPTER],
                       classifier=np.zeros((1, gc.dim)), base_labels=(0,),
                       estimator=estimator, seed=gc.seed)
    mc = McConfig(gc.mc_samples)
    eps = draw_eps(rng.child("eps"), gc.queries * gc.mc_samples, gc.way)
    labels = [int(rng.child("label", q).choice(gc.way, 1)[0]) for q in range(gc.queries)]

    def build(tape, leaves):
        nodes = dict(leaves)
        for name, value in state.parameters().items():
            nodes.setdefault(name, tape.constant(value))
        protos = ops.matmul(nodes.pop('input.protos'), nodes[ADAPTER])
        query = nodes.pop('input.query')
        loss, _ = query_objective(tape, nodes, state, protos, query, labels,
                                  estimator is not None, mc, eps=eps)
        return loss

    return build, values


def gradient_groups(values: Dict[str, np.ndarray]) -> Dict[str, list]:
    """Группы параметров: входы, голова и слои оценщика"""
    groups: Dict[str, list] = {}
    for name in values:
        if name.startswith(ESTIMATOR_PREFIX):
            group = ESTIMATOR_PREFIX + name[len(ESTIMATOR_PREFIX):].split('.')[0]
        else:
            group = name
        groups.setdefault(group, []).append(name)
    return groups


def cmd_gradcheck(config: RunConfig, out: Path):
    """
    Проверка градиентов; GradcheckFailure, если хоть одна группа
    превышает допуск.
    """
    gc = config.gradcheck
    build, values = gradcheck_case(gc)
    report = check_gradients(build, values, gradient_groups(values), h=gc.step,
                             tolerance=gc.tolerance, floor=gc.scale_floor)
    frame = pd.DataFrame({'group': list(report.errors), 'max_rel_error': list(report.errors.values())})
    frame['passed'] = frame['max_rel_error'] < gc.tolerance
    frame.to_csv(out / 'gradcheck.csv', index=False, float_format='%.6e')
    for group, err in report.errors.items():
        safe_print(f">>> [GRADCHECK] {group:28s} {err:.3e} {'OK' if err < gc.tolerance else 'FAIL'}")
    if METRICS_ENABLED:
        metrics.record_gradcheck(report.errors)
    if not report.passed:
        raise GradcheckFailure(f"Ошибка градиента выше {gc.tolerance:g} в группах: "
                               f"{', '.join(report.failed_groups())}")
    safe_print(f">>> [GRADCHECK] Все группы в пределах {gc.tolerance:g} "
               f"(макс. {report.max_error:.3e})")
    return report


# =============================================================================
# ЗАПУСК КОМАНДЫ
# =============================================================================

COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'ablate': cmd_ablate,
    'gradcheck': cmd_gradcheck,
}


def run_command(name: str, config: RunConfig, out: Path, **kwargs) -> int:
    """
    Выполняет команду и переводит ошибки в код возврата.

    Возвращает:
        int: 0 - успех, 2 - конфиг, 3 - данные/ввод-вывод, 4 - численная проверка
    """
    try:
        write_effective_config(config, out)
        COMMANDS[name](config, out, **kwargs)
        return EXIT_OK
    except UafsError as e:
        safe_print(f">>> [ERROR] {type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        safe_print(f">>> [ERROR] Ошибка ввода-вывода: {e.filename or ''} {e.strerror or e}")
        return EXIT_DATA
    except FloatingPointError as e:
        safe_print(f">>> [ERROR] Численная ошибка: {e}")
        traceback.print_exc()
        return EXIT_NUMERIC
