"""
Тесты протокола оценки, профиля σ и отчётов.
"""

import math

import numpy as np
import pandas as pd
import pytest

from errors import ContractError, DataError
from numerics import Rng
from processing.embeddings import EmbeddingDataset, EmbeddingRecord, SynthSpec, generate_synthetic, split_by_class
from processing.evaluation import episode_sigma, evaluate, sigma_profile, summarize
from processing.episodic import EpisodeConfig, sample_episode
from processing.models import EvalConfig, RunConfig, TrainConfig
from processing.orchestrator import synthetic_splits
from processing.report_generator import (
    estimator_table,
    eval_summary_frame,
    grid_table,
    write_eval_report,
)
from processing.trainer import init_state, run


@pytest.fixture(scope="module")
def splits():
    full = generate_synthetic(SynthSpec(num_classes=10, dim=8, samples_per_class=6, seed=4))
    return split_by_class(full, 5)


@pytest.fixture(scope="module")
def trained(splits):
    config = TrainConfig.model_validate({
        'stage1': {'epochs': 1, 'batch_size': 10, 'uncertainty': True},
        'stage2': {'epochs': 1, 'episodes_per_epoch': 2, 'way': 3, 'shot': 1, 'queries': 2,
                   'uncertainty': True},
        'num_groups': 4, 'mc_samples': 2, 'seed': 2,
    })
    return run(config, splits[0])[0]


def _eval_config(**kw):
    return EvalConfig(**{'episodes': 12, 'way': 3, 'shot': 1, 'queries': 2, 'seed': 7, **kw})


# =============================================================================
# СВОДКА
# =============================================================================

def test_summary_mean_and_interval():
    report = summarize([0.8, 0.9, 1.0], seed=3)
    assert report.mean == pytest.approx(0.9, abs=1e-12)
    assert report.ci95 == pytest.approx(1.96 * 0.1 / math.sqrt(3), abs=1e-12)
    assert report.ci95 == pytest.approx(0.11316, abs=1e-5)
    assert not report.degenerate


def test_single_episode_is_degenerate():
    report = summarize([0.6])
    assert report.degenerate and report.ci95 == 0.0 and report.mean == 0.6


def test_summary_rejects_bad_input():
    with pytest.raises(ContractError):
        summarize([])
    with pytest.raises(ContractError):
        summarize([1.2])


# =============================================================================
# ОЦЕНКА
# =============================================================================

def test_noise_free_classes_are_classified_perfectly():
    full = generate_synthetic(SynthSpec(num_classes=6, dim=8, samples_per_class=4,
                                        noise_lo=0.0, noise_hi=0.0, seed=8))
    base, novel = split_by_class(full, 3)
    state = init_state(TrainConfig(estimator='none'), base)
    report = evaluate(state, novel, _eval_config(episodes=5))
    assert report.mean == 1.0 and report.ci95 == 0.0


def test_tied_prototypes_resolve_to_lowest_index():
    records = [EmbeddingRecord(f"r{c}_{i}", c, np.array([1.0, 0.0])) for c in (10, 11) for i in range(3)]
    novel = EmbeddingDataset.build(2, records, 'novel')
    base = EmbeddingDataset.build(2, [EmbeddingRecord('b', 0, np.array([0.0, 1.0]))])
    state = init_state(TrainConfig(estimator='none', num_groups=1), base)
    report = evaluate(state, novel, _eval_config(way=2, episodes=4))
    # Все запросы относятся к классу 0 эпизода: половина верна
    assert report.accuracies == [0.5] * 4


def test_evaluate_thread_invariant(splits, trained):
    a = evaluate(trained, splits[1], _eval_config(), threads=1)
    b = evaluate(trained, splits[1], _eval_config(), threads=4)
    assert a.accuracies == b.accuracies and a.mean == b.mean and a.ci95 == b.ci95
    assert all(0.0 <= x <= 1.0 for x in a.accuracies)


def test_evaluate_ignores_estimator(splits, trained):
    without = trained.copy()
    without.estimator = None
    a = evaluate(trained, splits[1], _eval_config())
    b = evaluate(without, splits[1], _eval_config())
    assert a.accuracies == b.accuracies


def _episode_ids(dataset, seed, count=30):
    cfg = EpisodeConfig(3, 1, 2, count, seed)
    episodes = (sample_episode(dataset, cfg, e) for e in range(count))
    return [(ep.classes, tuple(r.id for g in ep.support for r in g), tuple(r.id for r in ep.query))
            for ep in episodes]


def test_seed_changes_episodes(splits, trained):
    novel = splits[1]
    assert _episode_ids(novel, 1) == _episode_ids(novel, 1)
    assert _episode_ids(novel, 1) != _episode_ids(novel, 2)
    report = evaluate(trained, novel, _eval_config(seed=2, episodes=3))
    assert report.seed == 2 and report.config['seed'] == 2


def test_random_labels_give_chance_accuracy():
    rng = Rng(31, ("chance",))
    vectors = rng.child("vectors").normal((200, 16))
    labels = rng.child("labels").permutation(200) % 20
    records = [EmbeddingRecord(f"r{i}", int(labels[i]), vectors[i]) for i in range(200)]
    data = EmbeddingDataset.build(16, records, 'novel')
    state = init_state(TrainConfig(estimator='none'), data)
    report = evaluate(state, data, EvalConfig(episodes=2000, way=5, shot=1, queries=5, seed=3))
    assert abs(report.mean - 0.20) < 0.03


def test_default_benchmark_below_ceiling_and_sigma_moves():
    """Синтетика по умолчанию: базовая модель далека от 100%, обучение сдвигает σ с ln 2"""
    config = RunConfig()
    base, novel = synthetic_splits(config.dataset.synthetic)
    untrained = init_state(config.train, base)
    report = evaluate(untrained, novel, config.eval.model_copy(update={'episodes': 300}))
    assert 0.3 < report.mean < 0.95

    train = config.train.model_copy(deep=True)
    train.stage1.epochs = 1
    train.stage1.uncertainty = True
    train.stage2.episodes_per_epoch = 20
    train.stage2.epochs = 1
    train.stage2.uncertainty = True
    state, _ = run(train, base)
    sigma = episode_sigma(state, sample_episode(novel, EpisodeConfig(5, 1, 15, 1, 1), 0))
    assert np.ptp(sigma) > 1e-6
    assert np.max(np.abs(sigma - math.log(2.0))) > 1e-6



# =============================================================================
# ПРОФИЛЬ НЕОПРЕДЕЛЁННОСТИ
# =============================================================================

def test_episode_sigma_shape(splits, trained):
    episode = sample_episode(splits[1], EpisodeConfig(3, 1, 2, 1, 7), 0)
    sigma = episode_sigma(trained, episode)
    assert sigma.shape == (6, 3)
    assert np.all(sigma >= 0.0)
    bare = trained.copy()
    bare.estimator = None
    with pytest.raises(ContractError):
        episode_sigma(bare, episode)


def test_sigma_profile(splits, trained):
    profile = sigma_profile(trained, splits[1], _eval_config(), episodes=8, threads=2)
    assert profile.pairs == 8 * 3 * 2
    assert np.isfinite(profile.high_noise_sigma) and np.isfinite(profile.low_noise_sigma)
    assert profile.noise_threshold == pytest.approx(np.median(list(splits[1].class_noise.values())))


def test_sigma_profile_requires_known_noise(trained):
    records = [EmbeddingRecord(f"r{c}_{i}", c, np.ones(8) + c + i) for c in range(3) for i in range(3)]
    with pytest.raises(DataError):
        sigma_profile(trained, EmbeddingDataset.build(8, records, 'novel'), _eval_config())


# =============================================================================
# ОТЧЁТЫ
# =============================================================================

def test_eval_report_files(tmp_path):
    report = summarize([0.5, 1.0], seed=9, config={'way': 2, 'shot': 1, 'queries': 1})
    paths = write_eval_report(report, tmp_path, dump_episodes=True)
    summary = pd.read_csv(paths['summary'])
    assert list(summary.columns) == ['mean', 'ci95', 'E', 'seed']
    assert summary['E'].iloc[0] == 2 and summary['seed'].iloc[0] == 9
    assert list(pd.read_csv(paths['episodes'])['accuracy']) == [0.5, 1.0]
    assert "75.00%" in paths['table'].read_text(encoding='utf-8')
    assert len(eval_summary_frame(report)) == 1


def test_ablation_tables():
    runs = pd.DataFrame([
        {'model': 3, 'estimator': 'none', 'seed': 1, 'accuracy': 0.5, 'ci95': 0.1,
         'sigma_high': float('nan'), 'sigma_low': float('nan')},
        {'model': 6, 'estimator': 'graph', 'seed': 1, 'accuracy': 0.7, 'ci95': 0.1,
         'sigma_high': 0.9, 'sigma_low': 0.4},
        {'model': 6, 'estimator': 'graph', 'seed': 2, 'accuracy': 0.9, 'ci95': 0.1,
         'sigma_high': 0.3, 'sigma_low': 0.4},
    ])
    grid = grid_table(runs)
    row = grid[grid['model'] == 6].iloc[0]
    assert row['stage1'] == 'w U' and row['stage2'] == 'w U'
    assert row['mean_accuracy'] == pytest.approx(0.8)
    assert row['sigma_pass_rate'] == pytest.approx(0.5)

    est = estimator_table(runs.drop(columns=['model']))
    assert list(est['method']) == ['B', 'B + graph']
    assert est['delta_vs_base'].iloc[1] == pytest.approx(0.3)


if __name__ == "__main__":
    print("=" * 60)
    print("  ТЕСТЫ ОЦЕНКИ")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-q"]))
