"""
Тесты численного ядра: лента, операции, BN, Rng, проверка градиентов.

Запуск:
    pytest test_numerics.py
    python test_numerics.py
"""

import numpy as np
import pytest

from errors import ContractError, NumericalDomainError, ShapeError
from numerics import Rng, Tape, as_matrix, backward, check_gradients, ops, relative_error
from numerics.ops import BatchNormBuffers


def _weighted(tape, node, seed=0):
    """Скаляр Σ w ⊙ node со случайными весами - общий корень для проверок"""
    w = Rng(seed, ("weights",)).normal(node.value.shape)
    return ops.sum_all(ops.mul(node, tape.constant(w)))


def _assert_grads(build, values):
    report = check_gradients(build, values)
    assert report.passed, f"ошибки градиентов: {report.errors}"


def _rand(shape, seed=1, key="x"):
    return Rng(seed, (key,)).normal(shape)


# =============================================================================
# ГРАДИЕНТЫ ОПЕРАЦИЙ
# =============================================================================

def test_matmul_add_mul_gradients():
    values = {'a': _rand((3, 4), key="a"), 'b': _rand((4, 2), key="b"), 'c': _rand((1, 2), key="c")}
    _assert_grads(lambda t, l: _weighted(t, ops.mul(ops.add(ops.matmul(l['a'], l['b']), l['c']),
                                                    ops.matmul(l['a'], l['b']))), values)


def test_broadcast_sub_div_gradients():
    values = {'a': _rand((3, 4), key="a"), 'b': np.abs(_rand((3, 1), key="b")) + 0.5}
    _assert_grads(lambda t, l: _weighted(t, ops.div(ops.sub(l['a'], l['b']), l['b'])), values)


def test_elementwise_gradients():
    values = {'a': np.abs(_rand((2, 5))) + 0.2}
    _assert_grads(lambda t, l: _weighted(t, ops.add(ops.log(l['a']), ops.sqrt(l['a']))), values)
    _assert_grads(lambda t, l: _weighted(t, ops.mul(ops.exp(l['a']), ops.softplus(ops.neg(l['a'])))), values)
    _assert_grads(lambda t, l: _weighted(t, ops.add_scalar(ops.scale(l['a'], 3.0), -1.0)), values)


def test_leaky_relu_gradient_away_from_kink():
    x = _rand((4, 4))
    x[np.abs(x) < 0.05] = 0.3
    _assert_grads(lambda t, l: _weighted(t, ops.leaky_relu(l['x'], 0.01)), {'x': x})


def test_reduction_gradients():
    values = {'a': _rand((3, 5))}
    for axis in (None, 0, 1):
        _assert_grads(lambda t, l, axis=axis: _weighted(t, ops.mean(l['a'], axis)), values)
    _assert_grads(lambda t, l: _weighted(t, ops.row_logsumexp(l['a'])), values)
    _assert_grads(lambda t, l: _weighted(t, ops.row_softmax(l['a'])), values)


def test_shape_op_gradients():
    values = {'a': _rand((2, 6))}
    _assert_grads(lambda t, l: _weighted(t, ops.reshape(ops.transpose(l['a']), 3, 4)), values)
    _assert_grads(lambda t, l: _weighted(t, ops.concat_cols(ops.split_cols(l['a'], [2, 4])[::-1])), values)
    _assert_grads(lambda t, l: _weighted(t, ops.gather_rows(ops.gather_per_row(l['a'], [5, 0]), [1, 1, 0])),
                  values)


def test_cosine_gradients():
    values = {'q': _rand((1, 8), key="q"), 'p': _rand((5, 8), key="p")}
    _assert_grads(lambda t, l: _weighted(t, ops.cosine_rows(l['q'], l['p'])), values)


def test_batch_norm_gradients_train_and_eval():
    values = {'x': _rand((5, 3), key="x"), 'g': _rand((1, 3), key="g") + 1.0, 'b': _rand((1, 3), key="b")}

    def build(mode):
        buffers = BatchNormBuffers(_rand((1, 3), key="m"), np.abs(_rand((1, 3), key="v")) + 0.5)
        return lambda t, l: _weighted(t, ops.batch_norm(l['x'], l['g'], l['b'], buffers, mode=mode,
                                                        on_stats=lambda m, v: None))
    _assert_grads(build("train"), values)
    _assert_grads(build("eval"), values)


def test_group_op_gradients():
    values = {'a': _rand((6, 3), key="a"), 'b': _rand((6, 3), key="b"),
              'g': _rand((1, 3), key="g") + 1.0, 'beta': _rand((1, 3), key="beta")}
    _assert_grads(lambda t, l: _weighted(t, ops.group_matmul(l['a'], l['b'], 2, transpose_b=True)), values)
    _assert_grads(lambda t, l: _weighted(t, ops.group_matmul(
        ops.group_matmul(l['a'], l['b'], 3, transpose_b=True), l['b'], 3)), values)
    _assert_grads(lambda t, l: _weighted(t, ops.gather_per_row(l['a'], [2, 0, 1, 1, 0, 2])), values)
    buffers = BatchNormBuffers.create(3)
    _assert_grads(lambda t, l: _weighted(t, ops.batch_norm(l['a'], l['g'], l['beta'], buffers, groups=2,
                                                           on_stats=lambda m, v: None)), values)


# =============================================================================
# ЛЕНТА
# =============================================================================

def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)), 'x')
    with pytest.raises(ContractError):
        backward(tape, ops.mul(x, x))


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf(np.ones((1, 3)), 'x')
    y = tape.leaf(np.ones((2, 2)), 'y')
    grads = backward(tape, ops.sum_all(x))
    assert np.array_equal(grads['y'], np.zeros((2, 2)))
    assert np.array_equal(grads['x'], np.ones((1, 3)))


def test_duplicate_leaf_name_rejected():
    tape = Tape()
    tape.leaf(np.ones((1, 1)), 'w')
    with pytest.raises(ContractError):
        tape.leaf(np.ones((1, 1)), 'w')


def test_shared_subexpression_accumulates():
    """d/dx (x·x + x) = 2x + 1 при переиспользовании узла"""
    tape = Tape()
    x = tape.leaf(np.array([[3.0]]), 'x')
    grads = backward(tape, ops.add(ops.mul(x, x), x))
    assert grads['x'][0, 0] == 7.0


def test_as_matrix_rejects_nan_and_empty():
    with pytest.raises(NumericalDomainError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((0, 3)))


def test_matmul_shape_mismatch():
    tape = Tape()
    with pytest.raises(ShapeError):
        ops.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


# =============================================================================
# СВОЙСТВА SOFTMAX / LOGSUMEXP / НОРМИРОВКИ
# =============================================================================

def test_row_softmax_invariants():
    tape = Tape()
    a = _rand((4, 6))
    out = ops.row_softmax(tape.constant(a)).value
    assert np.allclose(out.sum(axis=1), 1.0, atol=1e-12)
    shifted = ops.row_softmax(tape.constant(a + 123.0)).value
    assert np.allclose(out, shifted, atol=1e-12)


def test_logsumexp_large_values_stay_finite():
    tape = Tape()
    out = ops.row_logsumexp(tape.constant(np.array([[1000.0, 1000.0]]))).value
    assert np.isfinite(out).all()
    assert abs(out[0, 0] - (1000.0 + np.log(2.0))) < 1e-9


def test_zero_norm_row_is_domain_error():
    tape = Tape()
    with pytest.raises(NumericalDomainError):
        ops.l2_normalize_rows(tape.constant(np.zeros((1, 3))))


# =============================================================================
# BATCH NORMALIZATION
# =============================================================================

def test_batch_norm_single_row_train_is_contract_error():
    tape = Tape()
    with pytest.raises(ContractError):
        ops.batch_norm(tape.constant(np.ones((1, 2))), tape.constant(np.ones((1, 2))),
                       tape.constant(np.zeros((1, 2))), BatchNormBuffers.create(2))


def test_batch_norm_normalized_column_unchanged():
    """Столбец с нулевым средним и дисперсией 1 - eps не меняется (γ=1, β=0)"""
    tape = Tape()
    a = np.sqrt(1.0 - 1e-5)
    x = np.array([[a], [-a]])
    out = ops.batch_norm(tape.constant(x), tape.constant(np.ones((1, 1))),
                         tape.constant(np.zeros((1, 1))), BatchNormBuffers.create(1)).value
    assert np.max(np.abs(out - x)) < 1e-9


def test_batch_norm_running_stats_use_unbiased_variance():
    tape = Tape()
    buffers = BatchNormBuffers.create(1, momentum=1.0)
    x = np.array([[1.0], [3.0]])
    ops.batch_norm(tape.constant(x), tape.constant(np.ones((1, 1))), tape.constant(np.zeros((1, 1))),
                   buffers)
    assert buffers.running_mean[0, 0] == 2.0
    assert buffers.running_var[0, 0] == 2.0


def test_batch_norm_eval_uses_running_stats():
    tape = Tape()
    buffers = BatchNormBuffers(np.array([[1.0]]), np.array([[4.0 - 1e-5]]))
    out = ops.batch_norm(tape.constant(np.array([[5.0]])), tape.constant(np.ones((1, 1))),
                         tape.constant(np.zeros((1, 1))), buffers, mode="eval").value
    assert abs(out[0, 0] - 2.0) < 1e-9


def test_grouped_batch_norm_matches_per_block():
    x = _rand((6, 2), key="x")
    gamma, beta = _rand((1, 2), key="g") + 1.0, _rand((1, 2), key="b")
    tape = Tape()
    stats = []
    out = ops.batch_norm(tape.constant(x), tape.constant(gamma), tape.constant(beta),
                         BatchNormBuffers.create(2), groups=3,
                         on_stats=lambda m, v: stats.append((m, v))).value
    mean, var = stats[0]
    assert mean.shape == (3, 2) and var.shape == (3, 2)
    for k in range(3):
        block = []
        single = ops.batch_norm(tape.constant(x[2 * k:2 * k + 2]), tape.constant(gamma), tape.constant(beta),
                                BatchNormBuffers.create(2), on_stats=lambda m, v: block.append((m, v))).value
        assert np.array_equal(out[2 * k:2 * k + 2], single)
        assert np.array_equal(mean[k:k + 1], block[0][0]) and np.array_equal(var[k:k + 1], block[0][1])


def test_grouped_batch_norm_errors():
    tape = Tape()
    gamma, beta = tape.constant(np.ones((1, 2))), tape.constant(np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        ops.batch_norm(tape.constant(np.ones((5, 2))), gamma, beta, BatchNormBuffers.create(2), groups=2)
    with pytest.raises(ContractError):
        ops.batch_norm(tape.constant(_rand((3, 2))), gamma, beta, BatchNormBuffers.create(2), groups=3)


def test_group_matmul_matches_block_products():
    a, b = _rand((4, 3), key="a"), _rand((6, 3), key="b")
    tape = Tape()
    out = ops.group_matmul(tape.constant(a), tape.constant(b), 2, transpose_b=True).value
    assert out.shape == (4, 3)
    assert np.allclose(out[:2], a[:2] @ b[:3].T, atol=1e-14)
    assert np.allclose(out[2:], a[2:] @ b[3:].T, atol=1e-14)
    with pytest.raises(ShapeError):
        ops.group_matmul(tape.constant(a), tape.constant(b), 3)
    with pytest.raises(ShapeError):
        ops.group_matmul(tape.constant(a), tape.constant(a), 2)


def test_gather_per_row_checks_indices():
    tape = Tape()
    a = tape.constant(np.arange(6.0).reshape(3, 2))
    assert ops.gather_per_row(a, [1, 0, 1]).value[:, 0].tolist() == [1.0, 2.0, 5.0]
    with pytest.raises(ShapeError):
        ops.gather_per_row(a, [0, 1])
    with pytest.raises(ContractError):
        ops.gather_per_row(a, [0, 2, 1])


@pytest.mark.parametrize("slope", [0.0, -0.1, 1.5])
def test_leaky_relu_slope_outside_unit_interval(slope):
    tape = Tape()
    with pytest.raises(ContractError):
        ops.leaky_relu(tape.constant(np.ones((1, 2))), slope)


def test_leaky_relu_slope_one_is_identity():
    tape = Tape()
    x = _rand((2, 3))
    assert np.array_equal(ops.leaky_relu(tape.constant(x), 1.0).value, x)


# =============================================================================
# RNG И ПРОВЕРКА ГРАДИЕНТОВ
# =============================================================================

def test_rng_streams_reproducible_and_independent():
    assert np.array_equal(Rng(7, ("a", 1)).normal(5), Rng(7, ("a", 1)).normal(5))
    assert not np.array_equal(Rng(7, ("a", 1)).normal(5), Rng(7, ("a", 2)).normal(5))
    parent = Rng(7, ("a",))
    before = parent.child("x").normal(3)
    parent.normal(100)
    assert np.array_equal(before, parent.child("x").normal(3))


def test_relative_error_floor():
    assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-6)
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)


def test_gradcheck_detects_wrong_rule(monkeypatch):
    monkeypatch.setattr(ops, '_matmul_grad', lambda g, av, bv: (g @ bv.T, 2.0 * av.T @ g))
    values = {'a': _rand((2, 3), key="a"), 'b': _rand((3, 2), key="b")}
    report = check_gradients(lambda t, l: _weighted(t, ops.matmul(l['a'], l['b'])), values)
    assert not report.passed
    assert report.failed_groups() == ['b']


def test_gradcheck_scale_floor_is_configurable(monkeypatch):
    """Малый градиент с ошибкой правила: пол знаменателя определяет итоговую ошибку"""
    monkeypatch.setattr(ops, '_matmul_grad', lambda g, av, bv: (1.5 * (g @ bv.T), 1.5 * (av.T @ g)))
    values = {'a': _rand((2, 3), key="a"), 'b': _rand((3, 2), key="b")}

    def build(t, l):
        return ops.scale(_weighted(t, ops.matmul(l['a'], l['b'])), 1e-6)

    loose = check_gradients(build, values)
    tight = check_gradients(build, values, floor=1e-12)
    assert tight.max_error > 0.3
    assert loose.max_error < 0.01
    assert relative_error(np.array([2e-4]), np.array([1e-4])) == pytest.approx(0.1)
    assert relative_error(np.array([2e-4]), np.array([1e-4]), floor=1e-9) == pytest.approx(0.5)


# =============================================================================
# НЕЗАВИСИМЫЙ ОРАКУЛ: TORCH
# =============================================================================

def test_against_torch_autograd():
    torch = pytest.importorskip("torch")
    q, p = _rand((1, 6), key="q"), _rand((4, 6), key="p")
    gamma, beta = _rand((1, 4), key="g") + 1.0, _rand((1, 4), key="b")

    tape = Tape()
    lq, lp = tape.leaf(q, 'q'), tape.leaf(p, 'p')
    lg, lb = tape.leaf(gamma, 'g'), tape.leaf(beta, 'b')
    cos = ops.cosine_rows(lq, lp)
    h = ops.batch_norm(ops.transpose(ops.matmul(ops.transpose(cos), tape.constant(np.ones((1, 4))))),
                       lg, lb, BatchNormBuffers.create(4))
    loss = ops.sub(ops.row_logsumexp(ops.mul(cos, ops.mean(ops.mul(h, h)))), ops.gather_per_row(cos, [2]))
    ours = backward(tape, loss)

    tq, tp, tg, tb = (torch.tensor(v, dtype=torch.float64, requires_grad=True) for v in (q, p, gamma, beta))
    tcos = torch.nn.functional.normalize(tq, dim=1) @ torch.nn.functional.normalize(tp, dim=1).T
    th = (tcos.T @ torch.ones((1, 4), dtype=torch.float64)).T
    th = torch.nn.functional.batch_norm(th, None, None, tg[0], tb[0], training=True, eps=1e-5)
    tloss = torch.logsumexp(tcos * (th * th).mean(), dim=1) - tcos[:, 2]
    tloss.sum().backward()

    assert abs(loss.value[0, 0] - float(tloss.sum())) < 1e-10
    for name, t in (('q', tq), ('p', tp), ('g', tg), ('b', tb)):
        assert np.allclose(ours[name], t.grad.numpy(), atol=1e-10), name


if __name__ == "__main__":
    print("=" * 60)
    print("  ТЕСТЫ ЧИСЛЕННОГО ЯДРА")
    print("=" * 60)
    raise SystemExit(pytest.main([__file__, "-q"]))
