"""
Тесты двухэтапного обучения, оптимизатора и чекпоинтов.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from errors import ConfigError, ContractError, DataError, ParseError
from numerics import Tape, backward, ops
from processing import uncertainty
from processing.embeddings import SynthSpec, generate_synthetic, split_by_class
from processing.episodic import EpisodeConfig, sample_episode
from processing.metric_head import prototypes_node
from processing.models import TrainConfig
from processing.storage import load_checkpoint, save_checkpoint
from processing.trainer import (
    ADAPTER,
    ESTIMATOR_PREFIX,
    LOG_COLUMNS,
    RHO,
    SGD,
    bind_state,
    init_state,
    query_objective,
    run,
    stage1_step,
    stage2_gradients,
    stage2_step,
    step_eps,
    trainable_names,
)
from processing.uncertainty import McConfig


@pytest.fixture(scope="module")
def base():
    full = generate_synthetic(SynthSpec(num_classes=6, dim=8, samples_per_class=6, seed=3))
    return split_by_class(full, 4)[0]


def _config(**updates) -> TrainConfig:
    data = {
        'stage1': {'epochs': 1, 'batch_size': 8, 'lr': 0.05, 'uncertainty': True},
        'stage2': {'epochs': 1, 'episodes_per_epoch': 2, 'way': 3, 'shot': 1, 'queries': 2,
                   'lr': 0.05, 'uncertainty': True},
        'num_groups': 4,
        'mc_samples': 3,
        'seed': 5,
    }
    for key, value in updates.items():
        section, _, field = key.partition('__')
        if field:
            data[section] = {**data[section], field: value}
        else:
            data[section] = value
    return TrainConfig.model_validate(data)


def _episode(base, config: TrainConfig, index=0):
    s2 = config.stage2
    return sample_episode(base, EpisodeConfig(s2.way, s2.shot, s2.queries, 1, config.seed), index,
                          namespace="train")


def _params(state):
    return {k: v.copy() for k, v in state.parameters().items()}


# =============================================================================
# ИНИЦИАЛИЗАЦИЯ
# =============================================================================

def test_init_state(base):
    state = init_state(_config(), base)
    assert state.tau == pytest.approx(10.0, abs=1e-12)
    assert np.array_equal(state.adapter, np.eye(8))
    assert state.classifier.shape == (4, 8)
    assert state.base_labels == (0, 1, 2, 3)
    assert state.estimator_kind == 'graph'


def test_init_rejects_groups_not_dividing_dim(base):
    with pytest.raises(ConfigError):
        init_state(_config(num_groups=3), base)


def test_config_rejects_uncertainty_without_estimator():
    with pytest.raises(ValidationError):
        _config(estimator='none')
    with pytest.raises(ValidationError):
        _config(estimator='fc')


def test_trainable_surface(base):
    config = _config()
    state = init_state(config, base)
    s1 = trainable_names(state, 'stage1', True, config)
    s2 = trainable_names(state, 'stage2', False, config)
    assert 'classifier.weight' in s1 and 'classifier.weight' not in s2
    assert any(n.startswith(ESTIMATOR_PREFIX) for n in s1)
    assert s2 == [RHO, ADAPTER]
    assert ADAPTER not in trainable_names(state, 'stage2', False, _config(adapter=False))


# =============================================================================
# ШАГИ
# =============================================================================

def test_zero_learning_rate_keeps_parameters(base):
    config = _config(stage1__lr=0.0, stage2__lr=0.0)
    initial = init_state(config, base)
    before = _params(initial)
    state, _ = run(config, base, state=initial)
    for name, value in state.parameters().items():
        assert np.array_equal(value, before[name]), name


def test_single_class_episode_has_zero_loss(base):
    for estimator, uses_sigma in (('graph', False), ('conv', True)):
        config = _config(estimator=estimator, stage1__uncertainty=False,
                         stage2={'epochs': 1, 'episodes_per_epoch': 1, 'way': 1, 'shot': 1,
                                 'queries': 1, 'lr': 0.1, 'uncertainty': uses_sigma})
        state = init_state(config, base)
        assert stage2_step(state, _episode(base, config), config).loss == 0.0


def test_plain_gradient_descent_step_is_exact(base):
    config = _config(optimizer={'momentum': 0.0})
    state = init_state(config, base)
    episode = _episode(base, config)
    _, grads, _ = stage2_gradients(state.copy(), episode, config)
    before = _params(state)
    stage2_step(state, episode, config)
    after = state.parameters()
    for name, g in grads.items():
        assert np.max(np.abs(after[name] - (before[name] - config.stage2.lr * g))) < 1e-12, name


def test_momentum_accumulates_velocity(base):
    opt = SGD(lr=0.1, momentum=0.5)
    state = init_state(_config(), base)
    rho0 = state.rho.copy()
    g = {RHO: np.array([[1.0]])}
    opt.step(state, g)
    opt.step(state, g)
    # v1 = 1, v2 = 0.5 + 1
    assert state.rho[0, 0] == pytest.approx(rho0[0, 0] - 0.1 * 1.0 - 0.1 * 1.5, abs=1e-15)


def test_gradient_clipping_bounds_norm():
    clipped = SGD(lr=1.0, grad_clip=1.0).clip({'a': np.array([[3.0]]), 'b': np.array([[4.0]])})
    assert clipped['a'][0, 0] == pytest.approx(0.6)
    assert clipped['b'][0, 0] == pytest.approx(0.8)


def test_zero_sigma_matches_baseline(base, monkeypatch):
    """Оценщик, всегда возвращающий σ = 0, даёт ровно базовые потери и градиенты"""
    config_u = _config()
    config_b = _config(stage2__uncertainty=False)
    episode = _episode(base, config_u)
    state = init_state(config_u, base)
    outcome_b, grads_b, _ = stage2_gradients(state.copy(), episode, config_b)

    monkeypatch.setattr(uncertainty, 'estimate_sigma',
                        lambda V, est, weights, mode, on_stats, groups:
                        V.tape.constant(np.zeros((groups, V.value.shape[0] // groups))))
    outcome_u, grads_u, _ = stage2_gradients(state.copy(), episode, config_u)

    assert abs(outcome_u.loss - outcome_b.loss) < 1e-12
    for name in (RHO, ADAPTER):
        assert np.max(np.abs(grads_u[name] - grads_b[name])) < 1e-12


def test_batched_step_equals_per_query_average(base):
    """Одна лента на шаг: потери, градиенты и статистики BN совпадают с поштучным проходом"""
    config = _config(stage2__queries=2)
    state = init_state(config, base)
    episode = _episode(base, config)
    outcome, grads, stats = stage2_gradients(state.copy(), episode, config)

    trainable = trainable_names(state, 'stage2', True, config)
    mc = McConfig(config.mc_samples, config.shared_eps)
    eps = step_eps(config, 'stage2', state.stage2_steps, len(episode.query), episode.way)
    T = config.mc_samples
    support, queries = episode.support_matrix(), episode.query_matrix()
    losses, summed, per_query_stats = [], {}, []
    for q, label in enumerate(episode.query_labels):
        tape = Tape()
        nodes = bind_state(tape, state, trainable)
        protos = prototypes_node(tape, ops.matmul(tape.constant(support), nodes[ADAPTER]), episode)
        loss, _ = query_objective(tape, nodes, state, protos, queries[q], label, True, mc,
                                  on_stats=lambda layer, m, v: per_query_stats.append((layer, m, v)),
                                  eps=eps[q * T:(q + 1) * T])
        losses.append(loss.value[0, 0])
        for name, g in backward(tape, loss).items():
            summed[name] = summed.get(name, 0.0) + g

    assert abs(outcome.loss - np.mean(losses)) < 1e-12
    for name, g in grads.items():
        assert np.max(np.abs(g - summed[name] / len(losses))) < 1e-12, name
    for layer, mean, var in stats:
        rows = [(m, v) for name, m, v in per_query_stats if name == layer]
        assert len(rows) == mean.shape[0]
        for k, (m, v) in enumerate(rows):
            assert np.max(np.abs(mean[k:k + 1] - m)) < 1e-12
            assert np.max(np.abs(var[k:k + 1] - v)) < 1e-12


def test_step_contract_errors(base):
    config = _config()
    state = init_state(config, base)
    with pytest.raises(ContractError):
        stage1_step(state, [], config)
    with pytest.raises(DataError):
        stage1_step(state, [(np.ones(8), 99)], config)
    other = _config(stage2__way=2)
    with pytest.raises(ContractError):
        stage2_step(state, _episode(base, other), config)


# =============================================================================
# ПОЛНЫЙ ЗАПУСК
# =============================================================================

def test_run_is_deterministic(base):
    config = _config()
    s1, log1 = run(config, base)
    s2, log2 = run(config, base)
    for name, value in s1.parameters().items():
        assert np.array_equal(value, s2.parameters()[name]), name
    assert log1.equals(log2)
    assert list(log1.columns) == LOG_COLUMNS
    assert list(log1['stage']) == ['stage1', 'stage2']


@pytest.mark.parametrize("seed", [1, 2, 3, 4, 5])
def test_stage1_loss_decreases_over_fifty_steps(seed):
    """20 хорошо разделимых классов, 5 эпох по 10 батчей"""
    data = generate_synthetic(SynthSpec(num_classes=20, dim=16, samples_per_class=10,
                                        noise_lo=0.05, noise_hi=0.05, seed=seed))
    config = TrainConfig.model_validate({'stage1': {'epochs': 5, 'batch_size': 20},
                                         'stage2': {'epochs': 0}, 'num_groups': 4, 'seed': seed})
    state, log = run(config, data)
    assert state.stage1_steps == 50
    assert log['mean_loss'].iloc[-1] < log['mean_loss'].iloc[0]


def test_stage2_loss_decreases_over_two_hundred_episodes():
    """Гетероскедастичные классы с мешающим подпространством; σ включена"""
    improved = 0
    for seed in range(1, 6):
        data = generate_synthetic(SynthSpec(num_classes=10, dim=16, samples_per_class=20,
                                            nuisance_rank=4, nuisance_scale=2.0, seed=seed))
        config = TrainConfig.model_validate({
            'stage1': {'epochs': 0},
            'stage2': {'epochs': 1, 'episodes_per_epoch': 200, 'way': 5, 'shot': 1, 'queries': 3,
                       'lr': 0.05, 'uncertainty': True},
            'num_groups': 4, 'mc_samples': 5, 'seed': seed,
        })
        state = init_state(config, data)
        episodes = EpisodeConfig(5, 1, 3, 200, seed)
        losses = [stage2_step(state, sample_episode(data, episodes, e, namespace="train"), config).loss
                  for e in range(200)]
        improved += np.mean(losses[-20:]) < np.mean(losses[:20])
    assert improved >= 4



def test_stage_boundary_keeps_estimator(base):
    config = _config(stage2__epochs=0)
    after_stage1, _ = run(config, base)
    snapshot = after_stage1.estimator.copy()

    stage2_only = _config(stage1__epochs=0, stage2__uncertainty=False)
    state, _ = run(stage2_only, base, state=after_stage1)
    for name, value in snapshot.tensors.items():
        assert np.array_equal(state.estimator.tensors[name], value), name
    fresh = init_state(config, base).estimator
    assert any(not np.array_equal(fresh.tensors[n], v) for n, v in snapshot.tensors.items())


def test_no_epochs_returns_initial_state(base):
    config = _config(stage1__epochs=0, stage2__epochs=0)
    state, log = run(config, base)
    init = init_state(config, base)
    assert log.empty and list(log.columns) == LOG_COLUMNS
    for name, value in init.parameters().items():
        assert np.array_equal(state.parameters()[name], value)


def test_bn_buffers_move_only_in_uncertain_stages(base):
    config = _config(stage1__uncertainty=False, stage2__uncertainty=False)
    state, _ = run(config, base)
    for buf in state.estimator.buffers.values():
        assert np.array_equal(buf.running_mean, np.zeros((1, 4)))
    state_u, _ = run(_config(), base)
    assert any(not np.array_equal(b.running_mean, np.zeros((1, 4))) for b in state_u.estimator.buffers.values())


# =============================================================================
# ЧЕКПОИНТЫ
# =============================================================================

def test_checkpoint_round_trip(base, tmp_path):
    state, _ = run(_config(), base)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    back = load_checkpoint(path, seed=state.seed)
    for name, value in state.parameters().items():
        assert np.array_equal(back.parameters()[name], value), name
    for layer, buf in state.estimator.buffers.items():
        assert np.array_equal(back.estimator.buffers[layer].running_var, buf.running_var)
    assert back.base_labels == state.base_labels


def test_checkpoint_without_estimator_lines(base, tmp_path):
    state = init_state(_config(), base)
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    keep, skip = [], 0
    for line in lines:
        if skip:
            skip -= 1
            continue
        if line.startswith(f"tensor {ESTIMATOR_PREFIX}"):
            skip = int(line.split()[2])
            continue
        keep.append(line)
    path.write_text("\n".join(keep) + "\n", encoding="utf-8")
    assert load_checkpoint(path).estimator is None


def test_checkpoint_parse_errors(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("NOT-A-CKPT\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        load_checkpoint(path)
    assert exc.value.line == 1

    path.write_text("UAFS-CKPT v1\nL=4\nestimator=none\nn_way=-\nslope=0.01\nbase_labels=0\n"
                    "tensor temperature.rho 1 1\nabc\n", encoding="utf-8")
    with pytest.raises(ParseError) as exc:
        load_checkpoint(path)
    assert exc.value.line == 8


if __name__ == "__main__":
    print("=" * 60)
    print("  ТЕСТЫ ОБУЧЕНИЯ")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-q"]))
