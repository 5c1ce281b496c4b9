import numpy as np
import pytest

from ldcsf import ops
from ldcsf.layers import (
    BatchNorm2d,
    Conv2d,
    DepthwiseConv2d,
    Dropout,
    LayerNorm,
    Linear,
    Module,
    init_parameters,
    trunc_normal,
)
from ldcsf.tensor import ShapeError, Tensor, backward, make_rng, parameter


def test_linear_identity_and_hand_value(f64):
    lin = Linear(3, 3)
    lin.weight.data[...] = np.eye(3)
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(lin(Tensor(x)).data, x)
    lin = Linear(2, 1)
    lin.weight.data[...] = [[1.0, 1.0]]
    lin.bias.data[...] = [1.0]
    np.testing.assert_array_equal(lin(Tensor([[2.0, 3.0]])).data, [[6.0]])


def test_depthwise_identity_and_padding(f64):
    dw = DepthwiseConv2d(2, 1)
    dw.weight.data[...] = 1.0
    x = np.random.default_rng(0).normal(size=(1, 2, 4, 5))
    np.testing.assert_array_equal(dw(Tensor(x)).data, x)
    dw = DepthwiseConv2d(1, 3)
    dw.weight.data[...] = 1.0
    out = dw(Tensor(np.ones((1, 1, 4, 4)))).data[0, 0]
    assert out[1, 1] == 9.0 and out[0, 0] == 4.0 and out[0, 1] == 6.0


def test_depthwise_rejects_even_kernel():
    with pytest.raises(ShapeError):
        DepthwiseConv2d(2, 2)


def test_h_swish_values(f64):
    x = Tensor([0.0, 1.0, 3.0, 5.0, -3.0, -7.0])
    np.testing.assert_allclose(ops.h_swish(x).data, [0.0, 4 / 6, 3.0, 5.0, 0.0, 0.0], atol=1e-15)


def test_layer_norm_examples(f64):
    ln = LayerNorm(2)
    np.testing.assert_allclose(ln(Tensor([[1.0, 3.0]])).data, [[-1.0, 1.0]], atol=1e-5)
    np.testing.assert_array_equal(LayerNorm(4)(Tensor(np.full((2, 4), 3.0))).data, 0.0)
    y = LayerNorm(16)(Tensor(np.random.default_rng(1).normal(3.0, 5.0, size=(8, 16)))).data
    assert np.abs(y.mean(axis=-1)).max() <= 1e-6
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


def test_batch_norm_train_statistics(f64):
    bn = BatchNorm2d(3)
    np.testing.assert_array_equal(bn(Tensor(np.full((2, 3, 2, 2), 5.0))).data, 0.0)
    y = bn(Tensor(np.random.default_rng(2).normal(4.0, 3.0, size=(4, 3, 5, 5)))).data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() <= 1e-5
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


def test_batch_norm_running_stats(f64):
    bn = BatchNorm2d(1)
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    bn(Tensor(x))
    assert bn.running_mean[0] == pytest.approx(0.9 * 0 + 0.1 * 2.0)
    # unbiased variance of [1, 3] is 2
    assert bn.running_var[0] == pytest.approx(0.9 * 1 + 0.1 * 2.0)
    assert int(bn.num_batches_tracked) == 1


def test_batch_norm_eval_identity_and_guard(f64):
    bn = BatchNorm2d(2).eval()
    with pytest.raises(RuntimeError):
        bn(Tensor(np.ones((1, 2, 2, 2))))
    bn.num_batches_tracked = np.array(1)
    x = np.random.default_rng(3).normal(size=(2, 2, 3, 3))
    np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1 + 1e-5))
    with pytest.raises(ShapeError):
        BatchNorm2d(1).train()(Tensor(np.ones((1, 1, 1, 1))))


def test_global_avg_pool(f64):
    x = parameter(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    y = ops.global_avg_pool(x)
    assert y.data[0, 0] == 2.5
    backward(ops.sum(y))
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))
    np.testing.assert_array_equal(ops.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 7.0))).data, 7.0)


def test_dropout_modes():
    x = Tensor(np.random.default_rng(4).normal(size=(5, 5)))
    assert Dropout(0.0)(x) is x
    drop = Dropout(0.5).eval()
    assert drop(x) is x
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_dropout_preserves_expectation(f64):
    x = Tensor(np.full(100_000, 2.0))
    y = ops.dropout(x, 0.3, make_rng(0, "mc"), training=True).data
    assert abs(y.mean() - 2.0) <= 0.02
    assert set(np.unique(y)) <= {0.0, 2.0 / 0.7}


def test_conv2d_output_shape():
    conv = Conv2d(3, 5, 3)
    assert conv(Tensor(np.ones((2, 3, 4, 6)))).shape == (2, 5, 4, 6)


def test_trunc_normal_bounds():
    vals = trunc_normal(make_rng(0), (10_000,), std=0.02)
    assert np.abs(vals).max() <= 0.04
    assert vals.std() == pytest.approx(0.02 * 0.88, rel=0.05)


class _Pair(Module):
    def __init__(self):
        super().__init__()
        self.a = Linear(2, 2)
        self.blocks = [Linear(2, 2), BatchNorm2d(2)]


def test_module_naming_and_keyed_init():
    m = _Pair()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["a.weight", "a.bias", "blocks.0.weight", "blocks.0.bias",
                     "blocks.1.weight", "blocks.1.bias"]
    assert [n for n, _ in m.named_buffers()] == [
        "blocks.1.running_mean", "blocks.1.running_var", "blocks.1.num_batches_tracked"]
    init_parameters(m, 5)
    lone = Linear(2, 2)
    init_parameters(lone, 5)
    # same seed, different qualified name -> different stream
    assert not np.array_equal(lone.weight.data, m.a.weight.data)
    again = _Pair()
    init_parameters(again, 5)
    np.testing.assert_array_equal(again.blocks[0].weight.data, m.blocks[0].weight.data)
