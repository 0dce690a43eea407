import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import conv3d_loops
from pedforecast.autodiff import (
    AutodiffError,
    ConvSpec,
    ConvSpecError,
    NonFiniteError,
    RunningStats,
    ShapeError,
    Tensor,
    avg_pool,
    backward,
    batch_norm,
    conv3d,
    conv_transpose3d,
    count_macs,
    global_avg_pool,
    grad_check,
    load_named,
    load_tensor,
    no_grad,
    ops,
    save_named,
    save_tensor,
    upsample_nearest,
)
from pedforecast.autodiff.io import TensorFormatError


def rand(shape, seed=0, grad=True):
    return Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=grad)


# --- elementwise ----------------------------------------------------------

def test_add_and_mul_by_zero():
    assert np.array_equal(ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])
    x = rand((2, 3))
    assert np.array_equal(ops.mul(x, 0).data, np.zeros((2, 3)))


def test_elementwise_matches_scalar_loop():
    rng = np.random.default_rng(7)
    a_np, b_np = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    for kind, fwd, da, db in [
        ("add", lambda a, b: a + b, lambda a, b: 1.0, lambda a, b: 1.0),
        ("sub", lambda a, b: a - b, lambda a, b: 1.0, lambda a, b: -1.0),
        ("mul", lambda a, b: a * b, lambda a, b: b, lambda a, b: a),
    ]:
        a, b = Tensor(a_np, requires_grad=True), Tensor(b_np, requires_grad=True)
        out = ops.elementwise(kind, a, b)
        backward(ops.sum(out))
        for i, j in itertools.product(range(2), range(3)):
            x, y = a_np[i, j], b_np[i, j]
            assert abs(out.data[i, j] - fwd(x, y)) <= 1e-12
            assert abs(a.grad[i, j] - da(x, y)) <= 1e-12
            assert abs(b.grad[i, j] - db(x, y)) <= 1e-12
    a = Tensor(a_np, requires_grad=True)
    out = ops.elementwise("scalar_mul", a, 2.5)
    backward(ops.sum(ops.elementwise("scalar_add", out, -1.0)))
    assert np.allclose(out.data, a_np * 2.5, atol=1e-12)
    assert np.allclose(a.grad, 2.5, atol=1e-12)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        ops.elementwise("pow", Tensor([1.0]), Tensor([1.0]))


# --- activations ------------------------------------------------------------

def test_activation_values():
    assert ops.sigmoid(Tensor([0.0])).item() == 0.5
    assert ops.activation("leaky_relu", Tensor([-1.0])).item() == pytest.approx(-0.01)
    assert ops.activation("leaky_relu", Tensor([2.0])).item() == 2.0


def test_tanh_gradient_matches_finite_difference():
    x = Tensor([0.3], requires_grad=True)
    rep = grad_check(lambda: ops.sum(ops.tanh(x)), [x], tol=1e-6)
    assert rep.passed, rep


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (5,), elements=st.floats(-30, 30)))
def test_activation_ranges(v):
    s = ops.sigmoid(Tensor(v)).data
    t = ops.tanh(Tensor(v)).data
    assert ((s >= 0) & (s <= 1)).all()
    assert ((t >= -1) & (t <= 1)).all()
    small = np.abs(v) < 5
    assert ((s[small] > 0) & (s[small] < 1)).all()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        ops.scalar_mul(Tensor([1e308]), 10.0)


# --- reductions -------------------------------------------------------------

def test_reductions():
    assert ops.sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert ops.reduce("mean", Tensor(np.full((3, 4), 2.5))).item() == 2.5
    with pytest.raises(ValueError):
        ops.sum(Tensor([1.0]), axes=())


def test_mean_gradient_is_uniform():
    x = rand((3, 4))
    backward(ops.mean(x))
    assert np.allclose(x.grad, 1 / 12)
    x = rand((3, 4), seed=1)
    assert grad_check(lambda: ops.sum(ops.mean(ops.square(x), axes=1)), [x]).passed


# --- backward semantics -----------------------------------------------------

def test_backward_simple_cases():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 2)))
    x = Tensor([1.0, -2.0], requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, -4.0])


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = ops.add(ops.mul(x, x), ops.scalar_mul(x, 4.0))
    backward(ops.sum(y))
    assert x.grad[0] == pytest.approx(10.0)


def test_backward_errors():
    x = rand((2,))
    with pytest.raises(AutodiffError):
        backward(ops.scalar_mul(x, 2.0))
    loss = ops.sum(ops.square(x))
    backward(loss)
    with pytest.raises(AutodiffError):
        backward(loss)


def test_no_grad_records_nothing():
    x = rand((3,))
    with no_grad():
        y = ops.sum(ops.square(x))
    assert not y.requires_grad
    with pytest.raises(AutodiffError):
        backward(y)


def test_leaf_grads_accumulate_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(ops.sum(x))
    backward(ops.sum(x))
    assert np.array_equal(x.grad, [2.0, 2.0])


# --- gradient checker -------------------------------------------------------

def test_grad_check_sigmoid_and_constant():
    x = rand((6,))
    assert grad_check(lambda: ops.sum(ops.sigmoid(x)), [x], tol=1e-6).passed
    c = Tensor([0.5])
    rep = grad_check(lambda: ops.sum(ops.scalar_mul(c, 0.0)), [rand((2,))])
    assert rep.passed and rep.checked == 0


def test_grad_check_catches_wrong_rule():
    from pedforecast.autodiff import record_op

    def bad_square(t):
        return record_op("bad_square", t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    x = rand((4,), seed=3)
    assert not grad_check(lambda: ops.sum(bad_square(x)), [x]).passed


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "leaky_relu", "abs", "square", "clip"])
def test_pointwise_gradients(name):
    x = rand((2, 5), seed=11)
    x.data += np.sign(x.data) * 0.05  # keep away from kinks
    fn = {"sigmoid": ops.sigmoid, "tanh": ops.tanh, "leaky_relu": ops.leaky_relu, "abs": ops.abs,
          "square": ops.square, "clip": lambda t: ops.clip(t, -0.5, 0.5)}[name]
    w = rand((2, 5), seed=12, grad=False)
    assert grad_check(lambda: ops.sum(ops.mul(fn(x), w)), [x]).passed


def test_shape_op_gradients():
    a, b = rand((2, 3, 4), 1), rand((2, 2, 4), 2)
    w = rand((2, 5, 4), 3, grad=False)
    assert grad_check(lambda: ops.sum(ops.mul(ops.concat([a, b], 1), w)), [a, b]).passed
    assert grad_check(lambda: ops.sum(ops.square(ops.slice_axis(a, 1, 1, 3))), [a]).passed
    assert grad_check(lambda: ops.sum(ops.square(ops.select(a, 2, 1))), [a]).passed
    assert grad_check(lambda: ops.sum(ops.square(ops.stack([a, a], 1))), [a]).passed
    assert grad_check(lambda: ops.sum(ops.square(ops.repeat(a, 3, 1))), [a]).passed
    assert grad_check(lambda: ops.sum(ops.square(ops.reshape(a, (6, 4)))), [a]).passed
    p = Tensor(np.abs(a.data) + 0.5, requires_grad=True)
    assert grad_check(lambda: ops.sum(ops.log(p)), [p]).passed


def test_linear_and_matmul_gradients():
    x, w, b = rand((3, 4), 1), rand((2, 4), 2), rand((2,), 3)
    assert grad_check(lambda: ops.sum(ops.square(ops.linear(x, w, b))), [x, w, b]).passed
    m = rand((4, 5), 4)
    assert grad_check(lambda: ops.sum(ops.square(ops.matmul(x, m))), [x, m]).passed


# --- convolution --------------------------------------------------------------

def test_conv_ones_and_identity():
    spec = ConvSpec(1, 1, (1, 3, 3))
    out = conv3d(Tensor(np.ones((1, 1, 1, 3, 3))), Tensor(np.ones((1, 1, 1, 3, 3))), None, spec)
    assert out.shape == (1, 1, 1, 1, 1) and out.item() == 9.0
    k = np.zeros((1, 1, 1, 3, 3))
    k[0, 0, 0, 1, 1] = 1
    x = rand((1, 1, 2, 4, 5), grad=False)
    out = conv3d(x, Tensor(k), None, ConvSpec(1, 1, (1, 3, 3), padding=(0, 1, 1)))
    assert np.array_equal(out.data, x.data)


def test_conv_random_case_matches_loops_and_gradients():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 2, 4, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    spec = ConvSpec(2, 3, (2, 3, 3), stride=(1, 2, 2), dilation=(2, 1, 1))
    out = conv3d(x, w, b, spec)
    ref = conv3d_loops(x.data, w.data, b.data, (1, 2, 2), (2, 1, 1), ((0, 0),) * 3, 1)
    assert out.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) <= 1e-10
    assert grad_check(lambda: ops.sum(ops.square(conv3d(x, w, b, spec))), [x, w, b]).passed


@pytest.mark.parametrize("stride,dilation,groups", [
    (s, d, g) for s in (1, 2) for d in (1, 2, 3, 4) for g in ("one", "C")
])
def test_conv_grid_against_loops(stride, dilation, groups):
    C = 2
    G = 1 if groups == "one" else C
    rng = np.random.default_rng(stride * 10 + dilation)
    x = rng.standard_normal((1, C, 9, 9, 9))
    w = rng.standard_normal((2 * G if G > 1 else 3, C // G, 2, 2, 3))
    spec = ConvSpec(C, w.shape[0], (2, 2, 3), (stride,) * 3, (dilation,) * 3, 1, G)
    out = conv3d(Tensor(x), Tensor(w), None, spec).data
    ref = conv3d_loops(x, w, None, (stride,) * 3, (dilation,) * 3, ((1, 1),) * 3, G)
    assert np.max(np.abs(out - ref)) <= 1e-10


def test_conv_spec_errors():
    with pytest.raises(ConvSpecError):
        ConvSpec(1, 1, (1, 5, 5)).output_extent((1, 3, 3))
    with pytest.raises((ValueError, ConvSpecError)):
        ConvSpec(3, 4, (1, 1, 1), groups=2)
    with pytest.raises(ShapeError):
        conv3d(Tensor(np.zeros((1, 2, 1, 3, 3))), Tensor(np.zeros((1, 1, 1, 1, 1))), None, ConvSpec(1, 1, 1))


def test_conv_transpose_hand_case_and_bias():
    spec = ConvSpec(1, 1, (1, 2, 2), stride=(1, 2, 2))
    x = Tensor(np.arange(1.0, 5.0).reshape(1, 1, 1, 2, 2))
    out = conv_transpose3d(x, Tensor(np.ones((1, 1, 1, 2, 2))), None, spec)
    expect = np.kron(np.arange(1.0, 5.0).reshape(2, 2), np.ones((2, 2)))
    assert out.shape == (1, 1, 1, 4, 4)
    assert np.array_equal(out.data[0, 0, 0], expect)
    zero = conv_transpose3d(Tensor(np.zeros((1, 1, 1, 2, 2))), Tensor(np.ones((1, 2, 1, 2, 2))),
                            Tensor([0.5, -1.0]), ConvSpec(1, 2, (1, 2, 2), stride=(1, 2, 2)))
    assert np.array_equal(zero.data[0, 0], np.full((1, 4, 4), 0.5))
    assert np.array_equal(zero.data[0, 1], np.full((1, 4, 4), -1.0))


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(5)
    spec = ConvSpec(3, 2, (1, 4, 4), (1, 2, 2), (1, 1, 1), (0, 1, 1))
    w = rng.standard_normal(spec.weight_shape())
    x_small = rng.standard_normal((2, 2, 3, 4, 5))
    u_big = rng.standard_normal((2, 3, 3, 8, 10))
    # conv3d maps [.,3,.,8,10] -> [.,2,.,4,5]; its adjoint uses the same weights laid out [Cin=2 -> Cout=3]
    tspec = ConvSpec(2, 3, (1, 4, 4), (1, 2, 2), (1, 1, 1), (0, 1, 1))
    up = conv_transpose3d(Tensor(x_small), Tensor(w), None, tspec).data
    down = conv3d(Tensor(u_big), Tensor(w), None, spec).data
    assert abs(np.sum(up * u_big) - np.sum(x_small * down)) <= 1e-8


def test_conv_round_trip_restores_extent():
    down = ConvSpec.same(2, 2, (1, 3, 3), stride=(1, 2, 2))
    up = ConvSpec(2, 2, (1, 4, 4), (1, 2, 2), (1, 1, 1), (0, 1, 1))
    x = rand((1, 2, 2, 8, 12), grad=False)
    h = conv3d(x, rand(down.weight_shape(), 1, False), None, down)
    y = conv_transpose3d(h, rand(up.transpose_weight_shape(), 2, False), None, up)
    assert y.shape[3:] == x.shape[3:]


def test_conv_transpose_gradients():
    spec = ConvSpec(2, 3, (1, 4, 4), (1, 2, 2), (1, 1, 1), (0, 1, 1))
    x, w, b = rand((1, 2, 2, 3, 3), 1), rand(spec.transpose_weight_shape(), 2), rand((3,), 3)
    assert grad_check(lambda: ops.sum(ops.square(conv_transpose3d(x, w, b, spec))), [x, w, b]).passed


def test_even_kernel_same_padding_keeps_extent():
    spec = ConvSpec.same(1, 1, (4, 3, 3))
    assert spec.output_extent((8, 6, 6)) == (8, 6, 6)


def test_mac_counter_matches_formula():
    spec = ConvSpec.same(2, 4, (3, 3, 3))
    with count_macs() as box:
        conv3d(rand((2, 2, 3, 4, 5), grad=False), rand(spec.weight_shape(), grad=False), None, spec)
    assert box[0] == 2 * 3 * 4 * 5 * 4 * 2 * 27


# --- batch norm and pooling ---------------------------------------------------

def _bn_params(c):
    return Tensor(np.ones(c), requires_grad=True), Tensor(np.zeros(c), requires_grad=True), RunningStats(c)


def test_batch_norm_train_statistics():
    g, b, stats = _bn_params(3)
    x = rand((4, 3, 2, 5, 5), 9)
    out = batch_norm(x, g, b, stats, True)
    mean = out.data.mean(axis=(0, 2, 3, 4))
    var = out.data.var(axis=(0, 2, 3, 4))
    v = x.data.var(axis=(0, 2, 3, 4))
    assert np.all(np.abs(mean) <= 1e-10)
    assert np.allclose(var, v / (v + 1e-5), atol=1e-12)
    assert np.all(np.abs(var - 1) <= 1e-4)
    const = batch_norm(Tensor(np.full((2, 3, 1, 2, 2), 4.0)), g, b, stats, True)
    assert np.allclose(const.data, 0.0)


def test_batch_norm_affine():
    g = Tensor(np.full(2, 2.0))
    b = Tensor(np.full(2, 1.0))
    out = batch_norm(rand((8, 2, 3, 4, 4), 2, grad=False), g, b, RunningStats(2), True, eps=1e-12)
    assert np.allclose(out.data.mean(axis=(0, 2, 3, 4)), 1.0)
    assert np.allclose(out.data.std(axis=(0, 2, 3, 4)), 2.0)


def test_batch_norm_eval_requires_stats_and_momentum():
    g, b, stats = _bn_params(2)
    with pytest.raises(RuntimeError):
        batch_norm(rand((1, 2, 1, 2, 2)), g, b, stats, False)
    x = rand((3, 2, 2, 3, 3), 4, grad=False)
    batch_norm(x, g, b, stats, True)
    mu = x.data.mean(axis=(0, 2, 3, 4))
    assert np.allclose(stats.mean, 0.1 * mu)
    out = batch_norm(x, g, b, stats, False)
    assert out.shape == x.shape


def test_batch_norm_gradients():
    x = rand((2, 2, 2, 3, 3), 1)
    g = Tensor(np.array([1.5, 0.7]), requires_grad=True)
    b = Tensor(np.array([0.1, -0.2]), requires_grad=True)
    w = rand(x.shape, 2, grad=False)
    stats = RunningStats(2)
    assert grad_check(lambda: ops.sum(ops.mul(batch_norm(x, g, b, stats, True), w)), [x, g, b]).passed


def test_upsample_nearest():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 1, 2, 2), requires_grad=True)
    up = upsample_nearest(x, (1, 2, 2))
    assert np.array_equal(up.data[0, 0, 0], np.kron([[1, 2], [3, 4]], np.ones((2, 2))))
    assert np.array_equal(upsample_nearest(x, (1, 1, 1)).data, x.data)
    g = np.random.default_rng(0).standard_normal(up.shape)
    backward(ops.sum(ops.mul(up, Tensor(g))))
    block = g[0, 0, 0].reshape(2, 2, 2, 2).sum(axis=(1, 3))
    assert np.allclose(x.grad[0, 0, 0], block)


def test_pool_gradients():
    x = rand((2, 3, 2, 4, 6), 3)
    w = rand((2, 3, 2, 2, 3), 4, grad=False)
    assert grad_check(lambda: ops.sum(ops.mul(avg_pool(x), w)), [x]).passed
    assert grad_check(lambda: ops.sum(ops.square(global_avg_pool(x))), [x]).passed
    with pytest.raises(ShapeError):
        avg_pool(rand((1, 1, 1, 3, 4)))


# --- serialization --------------------------------------------------------------

def test_tensor_file_round_trip(tmp_path):
    for dtype in (np.float32, np.float64):
        a = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
        save_tensor(tmp_path / "a.bin", a)
        head = (tmp_path / "a.bin").read_bytes().split(b"\n", 1)[0]
        assert head == f"shape: 2 3 4 dtype: {'f32' if dtype == np.float32 else 'f64'}".encode()
        b = load_tensor(tmp_path / "a.bin")
        assert b.dtype == dtype and np.array_equal(a, b)


def test_named_container_round_trip_and_truncation(tmp_path):
    d = {"w": np.arange(6.0).reshape(2, 3), "b": np.ones(2, np.float32)}
    save_named(tmp_path / "p.bin", d)
    back = load_named(tmp_path / "p.bin")
    assert list(back) == ["w", "b"] and all(np.array_equal(d[k], back[k]) for k in d)
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-3])
    with pytest.raises(TensorFormatError):
        load_named(tmp_path / "bad.bin")


def test_forward_is_deterministic():
    spec = ConvSpec.same(2, 3, (3, 3, 3))
    x, w = rand((1, 2, 3, 4, 4), 1, False), rand(spec.weight_shape(), 2, False)
    a = conv3d(x, w, None, spec).data
    b = conv3d(x, w, None, spec).data
    assert a.tobytes() == b.tobytes()
