import math

import numpy as np
import pytest

from ldcsf import ops
from ldcsf.gradcheck import check_gradients, layer_cases
from ldcsf.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    make_rng,
    no_grad,
    parameter,
)


def test_matmul_identity_and_hand_values():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ x).data, x.data)
    np.testing.assert_array_equal((x @ Tensor([[1.0], [1.0]])).data, [[3.0], [7.0]])


def test_matmul_grad_is_ones_times_b_transpose(f64, rng):
    a = parameter(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    backward(ops.sum(a @ b))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 1)))


def test_softmax_examples(f64):
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    big = ops.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)
    logs = ops.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(logs, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_rows_and_shift_invariance(rng):
    x = rng.normal(size=(5, 7)) * 3
    y = ops.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(ops.softmax(Tensor(x + 11.5)).data, y, atol=1e-6)


def test_backward_hand_examples(f64):
    x = parameter([1.0, 2.0])
    backward(ops.sum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])
    x = parameter([1.0, 2.0])
    backward(ops.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates_over_shared_uses(f64):
    x = parameter([3.0])
    y = x * x + x * 2.0 + x
    backward(ops.sum(y))
    np.testing.assert_allclose(x.grad, [2 * 3.0 + 3.0])


def test_backward_twice_raises(f64):
    x = parameter([1.0, 2.0])
    loss = ops.sum(x * x)
    backward(loss)
    with pytest.raises(RuntimeError):
        backward(loss)


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_non_finite_is_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    x = parameter([0.0])
    with pytest.raises(NonFiniteError):
        ops.power(x, -1.0)


def test_no_grad_builds_no_graph():
    x = parameter([1.0])
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_default_dtype_switch():
    assert get_default_dtype() == np.float32
    with default_dtype(np.float64):
        assert Tensor([1]).dtype == np.float64
    assert Tensor([1]).dtype == np.float32
    with pytest.raises(ValueError):
        with default_dtype(np.int32):
            pass


def test_deep_chain_does_not_recurse(f64):
    x = parameter([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    backward(ops.sum(y))
    assert x.grad[0] == 1.0


def test_seeded_graph_is_bit_reproducible():
    def run():
        rng = make_rng(7, "graph")
        w = parameter(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(2, 4)))
        out = ops.softmax(ops.gelu(x @ w))
        backward(ops.sum(out * Tensor(rng.normal(size=(2, 3)))))
        return out.data.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_make_rng_keys():
    a = make_rng(0, "x", 3).random(4)
    np.testing.assert_array_equal(a, make_rng(0, "x", 3).random(4))
    assert not np.array_equal(a, make_rng(0, "x", 4).random(4))
    with pytest.raises(ValueError):
        make_rng(-1)


@pytest.mark.parametrize("name", sorted(layer_cases(make_rng(0, "names"))))
def test_primitive_gradients(name):
    with default_dtype(np.float64):
        rng = make_rng(3, "prim", name)
        loss_fn, params = layer_cases(rng)[name]
        n, err = check_gradients(loss_fn, params, rng)
    assert n > 0
    assert err <= 1e-4, f"{name}: {err:.3e} at {check_gradients.last_worst}"


def test_bce_uniform_is_ln2(f64):
    losses = ops.bce_with_logits(Tensor(np.zeros((3, 4))), np.array([[0, 1, 0, 1]] * 3))
    np.testing.assert_allclose(losses.data, [math.log(2)] * 4, atol=1e-12)
    with pytest.raises(ValueError):
        ops.bce_with_logits(Tensor(np.zeros((1, 4))), np.array([[0, 0.5, 0, 1]]))
