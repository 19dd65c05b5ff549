"""Tensor arithmetic, autodiff, and optimizer contracts."""

import numpy as np
import pytest

from fedskel import tensor as T
from fedskel.errors import ConfigError, DimensionError, UsageError
from fedskel.tensor import SgdMomentum, Tensor, backward

from _gradchecks import OP_BUILDERS
from _oracles import gradcheck


# ---------------------------------------------------------------------------
# Hand-computed forward values
# ---------------------------------------------------------------------------

def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_projector():
    out = T.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_hadamard_ones_is_identity():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    out = T.hadamard(x, Tensor(np.ones((2, 3))))
    np.testing.assert_array_equal(out.data, x.data)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_softmax_symmetry():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_stability():
    out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-6)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = T.softmax_rows(Tensor(rng.normal(size=(8, 5)))).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(8), atol=1e-6)
    assert np.all(out >= 0) and np.all(out <= 1)


def test_temporal_conv_identity_kernel():
    x = Tensor(np.arange(12, dtype=np.float32).reshape(1, 1, 12, 1))
    kernel = Tensor(np.ones((1, 1, 1), dtype=np.float32))
    np.testing.assert_array_equal(T.temporal_conv1d(x, kernel).data, x.data)


def test_temporal_conv_hand_value():
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3, 1))
    kernel = Tensor(np.ones((1, 1, 3), dtype=np.float32))
    out = T.temporal_conv1d(x, kernel).data.reshape(-1)
    np.testing.assert_allclose(out, [3.0, 6.0, 5.0])


def test_temporal_conv_even_kernel_rejected():
    x = Tensor(np.ones((1, 1, 4, 1)))
    with pytest.raises(ConfigError):
        T.temporal_conv1d(x, Tensor(np.ones((1, 1, 2))))


def test_temporal_conv_output_extent():
    x = Tensor(np.ones((2, 3, 7, 4)))
    kernel = Tensor(np.ones((5, 3, 3)))
    assert T.temporal_conv1d(x, kernel, stride=2).data.shape == (2, 5, 4, 4)


def test_batchnorm_constant_input_gives_shift():
    x = Tensor(np.full((2, 3, 4, 5), 7.0, dtype=np.float32))
    gamma = Tensor(np.ones(3, dtype=np.float32))
    beta = Tensor(np.array([1.0, -2.0, 0.5], dtype=np.float32))
    out = T.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
    np.testing.assert_allclose(
        out.data, np.broadcast_to(beta.data[None, :, None, None], x.shape), atol=1e-4
    )


def test_batchnorm_training_normalizes():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(3.0, 2.0, size=(4, 2, 6, 5)).astype(np.float32))
    out = T.batchnorm(
        x, Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), training=True
    ).data
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-4)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), np.ones(2), rtol=1e-3)


def test_batchnorm_updates_running_stats():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(5.0, 1.0, size=(4, 2, 6, 5)).astype(np.float32))
    rm, rv = np.zeros(2, dtype=np.float32), np.ones(2, dtype=np.float32)
    T.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-5)
    # update_stats=False must leave the state untouched.
    rm2, rv2 = rm.copy(), rv.copy()
    T.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                training=True, update_stats=False)
    np.testing.assert_array_equal(rm, rm2)
    np.testing.assert_array_equal(rv, rv2)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.tsum(x))
    backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(UsageError):
        backward(T.add(x, x))


def test_gradients_are_finite():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    backward(T.cross_entropy(x, rng.integers(0, 3, size=4)))
    assert np.all(np.isfinite(x.grad))


def test_determinism_bitwise():
    rng = np.random.default_rng(4)
    a_data = rng.normal(size=(5, 5)).astype(np.float32)
    outs, grads = [], []
    for _ in range(2):
        a = Tensor(a_data.copy(), requires_grad=True)
        loss = T.tsum(T.mul(T.relu(T.matmul(a, a)), a))
        backward(loss)
        outs.append(loss.data.copy())
        grads.append(a.grad.copy())
    np.testing.assert_array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(grads[0], grads[1])


# ---------------------------------------------------------------------------
# Per-op finite-difference checks (module-level smoke; the acceptance
# criterion re-runs all of these at 20 seeds)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(OP_BUILDERS))
def test_gradcheck_op(name):
    gradcheck(OP_BUILDERS[name], n_seeds=5)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def _param(value):
    t = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
    return t


def test_sgd_plain_step():
    w = _param(1.0)
    w.grad = np.array([2.0], dtype=np.float32)
    SgdMomentum(lr=0.1).step({"w": w})
    np.testing.assert_allclose(w.data, [0.8])
    assert w.grad is None


def test_sgd_momentum_hand_value():
    w = _param(0.0)
    opt = SgdMomentum(lr=0.1, momentum=0.9)
    for _ in range(2):
        w.grad = np.array([1.0], dtype=np.float32)
        opt.step({"w": w})
    np.testing.assert_allclose(w.data, [-0.29], rtol=1e-6)


def test_sgd_weight_decay_shrinks():
    w = _param(1.0)
    opt = SgdMomentum(lr=0.5, weight_decay=1e-4)
    w.grad = np.zeros(1, dtype=np.float32)
    opt.step({"w": w})
    np.testing.assert_allclose(w.data, [1.0 * (1 - 0.5 * 1e-4)], rtol=1e-6)


def test_sgd_zero_lr_is_noop():
    w = _param(3.0)
    w.grad = np.array([123.0], dtype=np.float32)
    SgdMomentum(lr=0.0, momentum=0.9).step({"w": w})
    np.testing.assert_array_equal(w.data, [3.0])


def test_sgd_missing_grad_raises():
    w = _param(1.0)
    with pytest.raises(UsageError):
        SgdMomentum(lr=0.1).step({"w": w})


def test_sgd_rejects_bad_hyper():
    with pytest.raises(ConfigError):
        SgdMomentum(lr=-1.0)
    with pytest.raises(ConfigError):
        SgdMomentum(lr=0.1, momentum=1.0)
    with pytest.raises(ConfigError):
        SgdMomentum(lr=0.1, weight_decay=-0.1)
