import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from f2net import ops
from f2net.gradcheck import grad_check, numeric_grad
from f2net.optim import MomentumSGD, clip_gradients, global_norm, sgd_step
from f2net.tensor import GraphError, ShapeError, Tensor, backward, get_default_dtype, set_default_dtype


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- matmul -------------------------------------------------------------------

def test_matmul_identity_and_hand_values():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", range(10))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    r = Tensor(rng.normal(size=(3, 2)))
    assert grad_check(lambda a, b: ops.sum(ops.mul(ops.matmul(a, b), r)), [a, b]) < 1e-6


# -- softmax ------------------------------------------------------------------

def test_softmax_closed_forms():
    assert np.allclose(ops.softmax(Tensor(np.zeros(4))).data, 0.25, atol=0, rtol=1e-15)
    assert np.allclose(ops.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_survives_large_logits():
    y = ops.softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    assert np.all(np.isfinite(y)) and abs(y.sum() - 1.0) < 1e-12


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
def test_softmax_sums_to_one_and_ignores_shifts(values, shift):
    x = np.array(values)
    y = ops.softmax(Tensor(x)).data
    assert abs(y.sum() - 1.0) <= 1e-9
    assert np.all(y > 0)
    assert np.allclose(ops.softmax(Tensor(x + shift)).data, y, atol=1e-9, rtol=0)


@pytest.mark.parametrize("seed", range(10))
def test_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    x, r = leaf(rng.normal(size=5)), Tensor(rng.normal(size=5))
    assert grad_check(lambda x: ops.sum(ops.mul(ops.softmax(x), r)), x) < 1e-6


def test_softmax_rejects_bad_axis():
    with pytest.raises(ShapeError):
        ops.softmax(Tensor(np.zeros((2, 2))), axis=2)


# -- conv2d -------------------------------------------------------------------

def test_conv_identity_mixing():
    x = np.random.default_rng(0).normal(size=(4, 5, 3))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0] = np.eye(3)
    assert np.array_equal(ops.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_ones_hand_count():
    out = ops.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), pad=1).data[:, :, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


def test_conv_matches_loop_oracle_exactly():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(5, 5, 2)), rng.normal(size=(3, 3, 2, 3))
    bias = rng.normal(size=3)
    got = ops.conv2d(Tensor(x), Tensor(k), Tensor(bias), pad=1).data
    assert np.array_equal(got, oracles.conv2d(x, k, bias, pad=1))


def test_conv_tap_loop_path_matches_oracle(monkeypatch):
    monkeypatch.setattr(ops, "_ACCUMULATE_LIMIT", 0)
    rng = np.random.default_rng(4)
    x, k, bias = rng.normal(size=(6, 5, 3)), rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2)
    got = ops.conv2d(Tensor(x), Tensor(k), Tensor(bias), stride=2, pad=1).data
    assert np.array_equal(got, oracles.conv2d(x, k, bias, stride=2, pad=1))


@given(st.integers(0, 10_000), st.integers(3, 7), st.integers(3, 7), st.integers(1, 3), st.integers(1, 3),
       st.integers(1, 3), st.integers(0, 2), st.integers(1, 2), st.sampled_from([1, 3]))
def test_conv_geometries_match_oracle_bit_for_bit(seed, h, w, cin, cout, stride, pad, dilation, ksize):
    if (h + 2 * pad - dilation * (ksize - 1) - 1) < 0 or (w + 2 * pad - dilation * (ksize - 1) - 1) < 0:
        return
    rng = np.random.default_rng(seed)
    x, k = rng.normal(size=(h, w, cin)), rng.normal(size=(ksize, ksize, cin, cout))
    got = ops.conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad, dilation=dilation).data
    assert np.array_equal(got, oracles.conv2d(x, k, stride=stride, pad=pad, dilation=dilation))


@pytest.mark.parametrize("seed", range(10))
def test_conv_gradient(seed):
    rng = np.random.default_rng(seed)
    x, k, b = leaf(rng.normal(size=(5, 5, 2))), leaf(rng.normal(size=(3, 3, 2, 3))), leaf(rng.normal(size=3))
    r = Tensor(rng.normal(size=(3, 3, 3)))
    f = lambda x, k, b: ops.sum(ops.mul(ops.conv2d(x, k, b, stride=2, pad=1), r))  # noqa: E731
    assert grad_check(f, [x, k, b]) < 1e-6


def test_conv_output_size_and_geometry_error():
    assert ops.conv_output_size(8, 3, 2, 1, 1) == 4
    assert ops.conv_output_size(5, 3, 1, 0, 2) == 1
    with pytest.raises(ValueError, match="non-positive"):
        ops.conv2d(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 1, 1))))


# -- elementwise and structural ops ---------------------------------------------

def test_elementwise_trivia():
    assert ops.sigmoid(Tensor(0.0)).data == 0.5
    a = np.random.default_rng(1).normal(size=(2, 3, 4))
    assert np.array_equal(ops.mul(Tensor(a), Tensor(np.ones_like(a))).data, a)
    assert np.array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert np.all(np.isfinite(ops.sigmoid(Tensor([-800.0, 800.0])).data))


def test_channel_vector_broadcasts_over_map():
    x = np.arange(24.0).reshape(2, 3, 4)
    v = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 4)
    assert np.array_equal(ops.mul(Tensor(x), Tensor(v)).data, x * v)
    assert np.array_equal(ops.add(Tensor(v), Tensor(x)).data, x + v)
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((1, 1, 3))))


def test_concat_and_slice_are_inverse():
    rng = np.random.default_rng(2)
    parts = [rng.normal(size=(2, 2, c)) for c in (1, 3, 2)]
    joined = ops.concat([Tensor(p) for p in parts], axis=2)
    assert joined.shape == (2, 2, 6)
    assert np.array_equal(ops.slice(joined, 2, 1, 4).data, parts[1])
    with pytest.raises(ShapeError):
        ops.slice(joined, 2, 4, 4)
    with pytest.raises(ShapeError):
        ops.concat([Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((3, 2, 1)))], axis=2)


def test_global_avg_pool_values():
    assert np.allclose(ops.global_avg_pool(Tensor(np.full((3, 2, 2), 0.7))).data, np.full((1, 1, 2), 0.7), atol=1e-15)
    assert ops.global_avg_pool(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1))).data.item() == 2.5


def test_fully_connected_identity_and_zero():
    x = Tensor(np.array([1.0, -2.0, 3.0]).reshape(1, 1, 3))
    assert np.array_equal(ops.fully_connected(x, Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x.data)
    bias = np.array([0.5, 1.5])
    assert np.array_equal(ops.fully_connected(x, Tensor(np.zeros((3, 2))), Tensor(bias)).data[0, 0], bias)


def test_upsample_constant_replicate_and_ramp():
    const = ops.bilinear_upsample(Tensor(np.full((3, 2, 2), 1.25)), 4).data
    assert np.array_equal(const, np.full((12, 8, 2), 1.25))
    assert np.array_equal(ops.bilinear_upsample(Tensor(np.full((1, 1, 1), 3.0)), 8).data, np.full((8, 8, 1), 3.0))
    ramp = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1)
    got = ops.bilinear_upsample(Tensor(ramp), 2).data
    assert np.allclose(got, oracles.bilinear_upsample(ramp, 2), atol=1e-15, rtol=0)
    with pytest.raises(ValueError):
        ops.bilinear_upsample(Tensor(ramp), 3)


# -- per-op finite-difference checks on ten seeds ----------------------------------

OP_CASES = {
    "sigmoid": (lambda xs: ops.sigmoid(xs[0]), [(3, 4, 2)]),
    "relu": (lambda xs: ops.relu(xs[0]), [(3, 4, 2)]),
    "add": (lambda xs: ops.add(xs[0], xs[1]), [(3, 4, 2), (1, 1, 2)]),
    "mul": (lambda xs: ops.mul(xs[0], xs[1]), [(3, 4, 2), (3, 4, 1)]),
    "concat": (lambda xs: ops.concat([xs[0], xs[1]], axis=2), [(2, 3, 1), (2, 3, 2)]),
    "slice": (lambda xs: ops.slice(xs[0], 2, 1, 3), [(2, 3, 4)]),
    "transpose": (lambda xs: ops.transpose(xs[0]), [(3, 5)]),
    "reshape": (lambda xs: ops.reshape(xs[0], (6, 2)), [(2, 3, 2)]),
    "scale": (lambda xs: ops.scale(xs[0], -1.7), [(4, 2)]),
    "global_avg_pool": (lambda xs: ops.global_avg_pool(xs[0]), [(3, 4, 5)]),
    "fully_connected": (lambda xs: ops.fully_connected(xs[0], xs[1], xs[2]), [(1, 1, 4), (4, 3), (3,)]),
    "bilinear_upsample": (lambda xs: ops.bilinear_upsample(xs[0], 4), [(2, 3, 2)]),
    "softmax_axis0": (lambda xs: ops.softmax(xs[0], axis=0), [(3, 2, 2)]),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient(name, seed):
    fn, shapes = OP_CASES[name]
    rng = np.random.default_rng(seed)
    xs = [leaf(rng.normal(size=s)) for s in shapes]
    if name == "relu":
        # keep every input away from the kink at 0
        xs[0].data[np.abs(xs[0].data) < 0.05] += 0.1
    out_shape = fn([Tensor(x.data) for x in xs]).shape
    r = Tensor(rng.normal(size=out_shape))
    err = grad_check(lambda *a: ops.sum(ops.mul(fn(list(a)), r)), xs, step=1e-3)
    assert err < 1e-4, err


# -- backward -------------------------------------------------------------------

def test_backward_basics():
    x = leaf(np.arange(6.0).reshape(2, 3))
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = leaf(3.0)
    backward(ops.mul(y, y))
    assert y.grad == 6.0


def test_backward_errors():
    x = leaf(np.ones(3))
    with pytest.raises(ShapeError):
        backward(ops.scale(x, 2.0))
    loss = ops.sum(x)
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)
    with pytest.raises(GraphError):
        backward(ops.sum(Tensor(np.ones(3))))


def test_two_consumers_accumulate():
    rng = np.random.default_rng(5)
    x = leaf(rng.normal(size=(3, 3)))

    def f(x):
        return ops.sum(ops.add(ops.mul(ops.sigmoid(x), x), ops.matmul(x, x)))

    assert grad_check(f, x) < 1e-6
    backward(f(x))
    analytic = x.grad.copy()
    x.grad = None
    assert np.allclose(analytic, numeric_grad(lambda: f(x), x, 1e-5), rtol=1e-6, atol=1e-8)


def test_leaf_gradients_accumulate_until_cleared():
    x = leaf(np.ones(2))
    backward(ops.sum(x))
    backward(ops.sum(ops.scale(x, 2.0)))
    assert np.array_equal(x.grad, [3.0, 3.0])


@pytest.mark.parametrize("seed", range(10))
def test_conv_relu_pool_fc_chain(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(6, 6, 2)))
    k = leaf(rng.normal(size=(3, 3, 2, 4)))
    w, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))

    def f(x, k, w, b):
        h = ops.relu(ops.conv2d(x, k, pad=1))
        return ops.sum(ops.sigmoid(ops.fully_connected(ops.global_avg_pool(h), w, b)))

    with ops.record_branches() as log:
        f(x, k, w, b)
    assert log, "relu should report its mask"
    assert grad_check(f, [x, k, w, b], step=1e-5) < 1e-4


def test_forward_and_backward_are_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x, k = leaf(rng.normal(size=(6, 6, 3))), leaf(rng.normal(size=(3, 3, 3, 2)))
        y = ops.softmax(ops.reshape(ops.conv2d(x, k, pad=1), (36, 2)), axis=0)
        backward(ops.sum(ops.mul(y, Tensor(rng.normal(size=(36, 2))))))
        return y.data.tobytes(), x.grad.tobytes(), k.grad.tobytes()

    assert run() == run()


# -- grad_check itself ------------------------------------------------------------

def test_grad_check_linear_and_quadratic():
    rng = np.random.default_rng(0)
    c = Tensor(rng.normal(size=5))
    x = leaf(rng.normal(size=5))
    assert grad_check(lambda x: ops.sum(ops.mul(x, c)), x) < 1e-10
    assert grad_check(lambda x: ops.sum(ops.mul(x, x)), x) < 1e-8


def test_grad_check_catches_a_wrong_gradient():
    from f2net.tensor import make_op

    def bad_square(x):
        return make_op(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    x = leaf([1.0, 2.0])
    assert grad_check(lambda x: ops.sum(bad_square(x)), x) > 0.4


# -- optimizer and precision -------------------------------------------------------

def test_sgd_examples():
    p = leaf(1.0)
    p.grad = np.array(2.0)
    sgd_step([p], 0.5)
    assert p.data == 0.0 and p.grad is None
    q = leaf([1.0, 2.0])
    q.grad = np.array([5.0, 5.0])
    sgd_step([q], 0.0)
    assert np.array_equal(q.data, [1.0, 2.0])
    with pytest.raises(ValueError):
        sgd_step([q], 0.1)


def test_sgd_is_linear_in_fixed_gradients():
    g1, g2 = np.array([0.5, -1.0]), np.array([2.0, 0.25])
    a, b = leaf([1.0, 1.0]), leaf([1.0, 1.0])
    a.grad = g1
    sgd_step([a], 0.1)
    a.grad = g2
    sgd_step([a], 0.1)
    b.grad = g1 + g2
    sgd_step([b], 0.1)
    assert np.allclose(a.data, b.data, atol=1e-15)


def test_momentum_zero_is_plain_sgd_and_velocity_decays():
    a, b = leaf([1.0, -1.0]), leaf([1.0, -1.0])
    for g in ([1.0, 2.0], [-3.0, 0.5]):
        a.grad, b.grad = np.array(g), np.array(g)
        sgd_step([a], 0.1)
        MomentumSGD(0.1, momentum=0.0).step({"b": b})
    assert np.array_equal(a.data, b.data)
    opt = MomentumSGD(1.0, momentum=0.5)
    p = leaf(0.0)
    for _ in range(2):
        p.grad = np.array(1.0)
        opt.step({"p": p})
    # v1 = 0.5, v2 = 0.5*0.5 + 0.5 = 0.75
    assert p.data == -1.25
    with pytest.raises(ValueError):
        MomentumSGD(0.1, momentum=1.0)


def test_gradient_clipping():
    a, b = leaf([0.0, 0.0]), leaf(0.0)
    a.grad, b.grad = np.array([3.0, 0.0]), np.array(4.0)
    assert global_norm([a, b]) == 5.0
    assert clip_gradients([a, b], 10.0) == 5.0 and b.grad == 4.0
    clip_gradients([a, b], 1.0)
    assert np.allclose(a.grad, [0.6, 0.0]) and np.isclose(b.grad, 0.8)
    p = leaf(1.0)
    p.grad = np.array(100.0)
    MomentumSGD(0.5, momentum=0.0, clip_norm=2.0).step({"p": p})
    assert p.data == 0.0
    with pytest.raises(ValueError):
        MomentumSGD(0.1, clip_norm=-1.0)


def test_single_precision_switch():
    set_default_dtype(np.float32)
    assert Tensor([1.0]).data.dtype == np.float32
    assert get_default_dtype() is np.float32
    set_default_dtype(np.float64)
    with pytest.raises(ValueError):
        set_default_dtype(np.int32)
