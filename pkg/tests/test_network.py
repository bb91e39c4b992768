import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spikemap.layers import Dense, Conv2d, Pool2d, POOL_MAX, POOL_MIN, StructureError
from spikemap.network import (
    NumericOverflowError,
    ReluNetwork,
    ShapeError,
    conv2d_direct,
    conv2d_fast,
    forward_batch,
    pool2d,
    predict,
    predict_batch,
    relu_forward,
)
from spikemap.tensor import Tensor, TensorError
from spikemap import zoo

from reference import conv_as_dense, naive_forward


def single_dense_net():
    return ReluNetwork(
        [Dense(weights=np.array([[1.0, -1.0]]), bias=np.array([0.0]), relu=False)],
        input_shape=(2,),
    )


def test_single_dense_positive():
    trace = relu_forward(single_dense_net(), np.array([0.3, 0.1]))
    assert trace.logits == pytest.approx([0.2])


def test_single_dense_rectified():
    net = ReluNetwork(
        [Dense(weights=np.array([[1.0, -1.0]]), bias=np.array([0.0]), relu=True),
         Dense(weights=np.eye(1), bias=np.zeros(1), relu=False)],
        input_shape=(2,),
    )
    trace = relu_forward(net, np.array([0.1, 0.3]))
    assert trace.activations[0] == pytest.approx([-0.2])
    assert trace.outputs[0] == pytest.approx([0.0])


def test_predict_argmax_and_ties():
    net = ReluNetwork(
        [Dense(weights=np.eye(3), bias=np.zeros(3), relu=False)],
        input_shape=(3,),
    )
    assert predict(net, np.array([0.1, 0.9, 0.3])) == 1
    net2 = ReluNetwork(
        [Dense(weights=np.eye(2), bias=np.zeros(2), relu=False)],
        input_shape=(2,),
    )
    assert predict(net2, np.array([0.5, 0.5])) == 0


def test_predict_deterministic(rng):
    net = zoo.make_mlp(7)
    x = rng.uniform(0, 1, (100, 16))
    assert np.array_equal(predict_batch(net, x), predict_batch(net, x))


@pytest.mark.parametrize("kind", ["mlp", "lenet", "vgg"])
def test_forward_matches_naive_loops(kind, rng):
    net = zoo.make_model(kind, 5)
    p, q = net.input_range
    for _ in range(3):
        x = rng.uniform(p, q, net.input_shape)
        _, logits = naive_forward(net, x)
        got = relu_forward(net, x).logits
        assert np.abs(got - logits).max() <= 1e-10 * max(1.0, np.abs(logits).max())


def test_conv_direct_matches_fast(rng):
    lay = Conv2d(weights=rng.normal(0, 0.5, (4, 3, 3, 3)),
                 bias=rng.normal(0, 0.3, 4), padding=(1, 1, 1, 1))
    x = rng.normal(0, 1, (2, 3, 6, 6))
    fast = conv2d_fast(x, lay)
    for b in range(2):
        direct = conv2d_direct(x[b], lay)
        assert np.abs(fast[b] - direct).max() <= 1e-13 * max(1.0, np.abs(direct).max())


def test_strided_conv_matches_dense_expansion(rng):
    lay = Conv2d(weights=rng.normal(0, 0.5, (3, 2, 3, 3)),
                 bias=rng.normal(0, 0.3, 3), stride=2, padding=(1, 1, 1, 1))
    in_shape = (2, 7, 7)
    mat, bias, out_shape = conv_as_dense(lay, in_shape)
    x = rng.normal(0, 1, in_shape)
    want = (mat @ x.reshape(-1) + bias).reshape(out_shape)
    got = conv2d_fast(x[None], lay)[0]
    assert np.allclose(got, want, atol=1e-12)
    assert np.allclose(conv2d_direct(x, lay), want, atol=1e-12)


def test_conv_padding_equals_explicit_dense(rng):
    lay = Conv2d(weights=rng.normal(0, 0.5, (2, 2, 3, 3)),
                 bias=rng.normal(0, 0.3, 2), padding=(1, 0, 2, 1))
    in_shape = (2, 5, 4)
    mat, bias, out_shape = conv_as_dense(lay, in_shape)
    x = rng.normal(0, 1, in_shape)
    dense_out = (mat @ x.reshape(-1) + bias).reshape(out_shape)
    conv_out = conv2d_fast(x[None], lay)[0]
    assert np.allclose(conv_out, dense_out, atol=1e-12)


def test_pool_modes(rng):
    lay = Pool2d(window=2, stride=2, modes=np.array([POOL_MAX, POOL_MIN]))
    x = rng.normal(0, 1, (1, 2, 4, 4))
    out = pool2d(x, lay)
    win = x.reshape(1, 2, 2, 2, 2, 2)
    assert np.array_equal(out[0, 0], win[0, 0].max(axis=(1, 3)))
    assert np.array_equal(out[0, 1], win[0, 1].min(axis=(1, 3)))


def test_relu_outputs_nonnegative(mlp_pipe):
    trace = forward_batch(mlp_pipe.net, mlp_pipe.eval.images[:50])
    for idx in mlp_pipe.net.hidden_param_indices():
        assert trace.outputs[idx].min() >= 0.0


def test_shape_mismatch_names_layer():
    net = zoo.make_mlp(0)
    with pytest.raises(ShapeError):
        relu_forward(net, np.zeros(5))
    bad = [Dense(weights=np.ones((3, 16)), bias=np.zeros(3)),
           Dense(weights=np.ones((2, 4)), bias=np.zeros(2), relu=False)]
    with pytest.raises(StructureError, match="layer 1"):
        ReluNetwork(bad, input_shape=(16,))


def test_overflow_names_layer():
    net = ReluNetwork(
        [Dense(weights=np.full((4, 4), 1e300), bias=np.zeros(4)),
         Dense(weights=np.full((2, 4), 1e300), bias=np.zeros(2), relu=False)],
        input_shape=(4,),
    )
    with np.errstate(over="ignore"), pytest.raises(NumericOverflowError, match="layer 1"):
        relu_forward(net, np.full(4, 1e5))


def test_readout_structure_enforced():
    with pytest.raises(StructureError):
        ReluNetwork([Dense(weights=np.eye(2), bias=np.zeros(2), relu=True)],
                    input_shape=(2,))
    with pytest.raises(StructureError):
        ReluNetwork([], input_shape=(2,))


class TestTensor:
    def test_shape_length_consistency(self):
        with pytest.raises(TensorError):
            Tensor(shape=(2, 3), data=np.zeros(5))

    def test_rejects_nonfinite(self):
        with pytest.raises(TensorError):
            Tensor.from_array(np.array([1.0, np.nan]))
        with pytest.raises(TensorError):
            Tensor.from_array(np.array([np.inf]))

    @given(st.lists(st.floats(-1e9, 1e9), min_size=1, max_size=30))
    def test_roundtrip_via_nd(self, values):
        t = Tensor.from_array(np.array(values))
        assert t.nd.tolist() == pytest.approx(values, nan_ok=False)
        assert int(np.prod(t.shape)) == t.data.size

    @given(st.integers(2, 5), st.integers(2, 5))
    @settings(max_examples=20)
    def test_row_major_layout(self, a, b):
        arr = np.arange(a * b, dtype=float).reshape(a, b)
        t = Tensor.from_array(arr)
        assert np.array_equal(t.data, arr.reshape(-1))
