import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stereopose import attention
from stereopose.numkernel import (
    Adam, AdamState, Tensor, adam_step, backward, conv3d, instance_norm, layer_norm, no_grad, ops,
)
from stereopose.numkernel.conv import conv2d, conv_transpose3d, same_pad
from stereopose.numkernel.gradcheck import check_directional, check_gradients, numeric_grad, relative_error
from stereopose.numkernel.io import decode_tensor, encode_tensor, load_checkpoint, save_checkpoint
from stereopose.numkernel.layers import flatten_params
from stereopose.numkernel.tensor import make_node

from .oracles import conv3d_naive

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matmul_loops(A, B):
    m, k = A.shape
    _, n = B.shape
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += A[i, p] * B[p, j]
            C[i, j] = acc
    return C


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    M = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(ops.matmul(np.eye(3), M).data, M)


def test_matmul_scalar_case():
    assert ops.matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]


def test_matmul_triple_loop_oracle():
    rng = np.random.default_rng(0)
    A, B = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    assert np.max(np.abs(ops.matmul(A, B).data - matmul_loops(A, B))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        ops.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    assert np.allclose(ops.softmax([0.0, 0.0]).data, [0.5, 0.5], atol=0, rtol=1e-15)


def test_softmax_large_logits_stable():
    out = ops.softmax([1000.0, 0.0]).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0, abs=1e-15) and out[1] < 1e-300 + 1e-15


def test_softmax_extended_precision_oracle():
    x = np.random.default_rng(1).standard_normal(17) * 5
    xl = x.astype(np.longdouble)
    e = np.exp(xl - xl.max())
    ref = (e / e.sum()).astype(np.float64)
    assert np.max(np.abs(ops.softmax(x).data - ref)) < 1e-15


def test_softmax_empty_axis():
    with pytest.raises(ValueError):
        ops.softmax(np.zeros((3, 0)), axis=1)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.integers(0, 1))
def test_softmax_rows_sum_to_one(x, axis):
    out = ops.softmax(x, axis=axis).data
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=axis) - 1.0)) <= 1e-12


# ---------------------------------------------------------------- conv3d

def test_conv3d_delta_kernel_is_identity():
    x = np.random.default_rng(2).standard_normal((2, 4, 5, 3))
    k = np.zeros((2, 2, 3, 3, 3))
    k[0, 0, 1, 1, 1] = k[1, 1, 1, 1, 1] = 1.0
    assert np.array_equal(conv3d(x, k, pad=1).data, x)


def test_conv3d_ones_kernel_matches_sliding_sum():
    x = np.random.default_rng(3).standard_normal((1, 5, 5, 6))
    k = np.ones((1, 1, 3, 3, 3))
    out = conv3d(x, k).data
    assert out.shape == (1, 3, 3, 4)
    assert np.max(np.abs(out - conv3d_naive(x, k))) < 1e-12


def test_conv3d_depthwise_equals_per_channel():
    rng = np.random.default_rng(4)
    x, k = rng.standard_normal((3, 4, 4, 4)), rng.standard_normal((3, 1, 3, 3, 3))
    out = conv3d(x, k, pad=1, groups=3).data
    for c in range(3):
        ref = conv3d_naive(x[c:c + 1], k[c:c + 1], pad=1)
        assert np.max(np.abs(out[c:c + 1] - ref)) < 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(3, 6), st.sampled_from([1, 3]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 10_000))
def test_conv3d_matches_naive_oracle(c_in_per, groups, extent, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    c_in, c_out = c_in_per * groups, 2 * groups
    x = rng.standard_normal((c_in, extent, extent + 1, extent))
    w = rng.standard_normal((c_out, c_in_per, k, k, k))
    got = conv3d(x, w, stride=stride, pad=pad, groups=groups).data
    assert np.max(np.abs(got - conv3d_naive(x, w, stride, pad, groups))) < 1e-12


def test_conv3d_same_padding_preserves_extent():
    x = np.zeros((2, 5, 6, 7))
    assert conv3d(x, np.zeros((4, 2, 5, 3, 1)), pad=same_pad((5, 3, 1))).shape == (4, 5, 6, 7)


def test_conv3d_group_mismatch():
    with pytest.raises(ValueError):
        conv3d(np.zeros((3, 4, 4, 4)), np.zeros((4, 1, 3, 3, 3)), groups=2)


def test_conv2d_is_unit_depth_conv3d():
    rng = np.random.default_rng(5)
    x, k = rng.standard_normal((2, 6, 5)), rng.standard_normal((3, 2, 3, 3))
    ref = conv3d_naive(x[:, None], k[:, :, None], pad=(0, 1, 1))[:, 0]
    assert np.max(np.abs(conv2d(x, k, pad=1).data - ref)) < 1e-12


def test_conv_transpose_is_adjoint_of_strided_conv():
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((3, 2, 2, 2))
    k = rng.standard_normal((3, 2, 4, 4, 4))
    lhs = np.sum(conv3d(x, k, stride=2, pad=1).data * y)
    rhs = np.sum(x * conv_transpose3d(y, k, stride=2, pad=1).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


# ---------------------------------------------------------------- norms and activations

def test_layer_norm_constant_is_zero():
    assert np.array_equal(layer_norm(np.full(5, 3.7)).data, np.zeros(5))


def test_silu_zero():
    assert ops.silu([0.0]).data[0] == 0.0


def test_silu_definition():
    x = np.linspace(-4, 4, 9)
    assert np.allclose(ops.silu(x).data, x / (1 + np.exp(-x)), rtol=1e-14, atol=1e-15)


def test_instance_norm_moments():
    x = np.random.default_rng(7).standard_normal((3, 4, 5, 6)) * 4 + 2
    out = instance_norm(x).data.reshape(3, -1)
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    # eps = 1e-5 inside the root shrinks the std by var / (var + eps)
    var = x.reshape(3, -1).var(axis=1)
    assert np.max(np.abs(out.std(axis=1) - np.sqrt(var / (var + 1e-5)))) < 1e-12
    assert np.max(np.abs(out.std(axis=1) - 1)) < 1e-6


def test_empty_axis_rejected():
    with pytest.raises(ValueError):
        layer_norm(np.zeros((2, 0)), axis=1)
    with pytest.raises(ValueError):
        ops.mean(np.zeros((0,)))


def test_reductions_and_shapes():
    x = np.arange(24.0).reshape(2, 3, 4)
    assert np.array_equal(ops.max(x, axis=2).data, x.max(axis=2))
    assert np.array_equal(ops.permute(x, (2, 0, 1)).data, x.transpose(2, 0, 1))
    assert np.array_equal(ops.concat([x, x], axis=1).data, np.concatenate([x, x], axis=1))
    assert np.array_equal(ops.reshape(x, (6, 4)).data, x.reshape(6, 4))


def test_non_finite_is_an_error():
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        ops.log(Tensor([-1.0]))
    with pytest.raises(FloatingPointError):
        Tensor([np.inf])


# ---------------------------------------------------------------- backward

def test_sum_of_squares_gradient():
    x = Tensor(np.array([1.0, -2.0, 3.5]), requires_grad=True)
    backward(ops.sum(x * x))
    assert np.array_equal(x.grad, 2 * x.data)


def test_matmul_sum_gradient_pattern():
    rng = np.random.default_rng(8)
    A = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    B = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    fn = lambda: ops.sum(ops.matmul(A, B))
    backward(fn())
    assert np.allclose(A.grad, np.ones((3, 2)) @ B.data.T, rtol=1e-15)
    assert relative_error(A.grad, numeric_grad(fn, A, h=1e-5)) < 1e-6
    assert relative_error(B.grad, numeric_grad(fn, B, h=1e-5)) < 1e-6


def test_full_ecaa_gradients():
    rng = np.random.default_rng(9)
    p = attention.init_ecaa(rng, 5)
    fs, ft = Tensor(rng.standard_normal((7, 5)), requires_grad=True), Tensor(rng.standard_normal((7, 5)), requires_grad=True)
    w = rng.standard_normal((7, 5))
    errs = check_gradients(lambda: ops.sum(attention.ecaa(fs, ft, p) * w), {**p, "fs": fs, "ft": ft})
    assert max(errs.values()) < 1e-4


def test_fan_out_accumulates():
    x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    backward(ops.sum(x * x + x * 3.0))
    assert np.array_equal(x.grad, 2 * x.data + 3)


def test_non_scalar_root_rejected():
    with pytest.raises(ValueError):
        backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_disconnected_leaf_gets_zero_gradient():
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    backward(ops.sum(x), inputs=[x, unused])
    assert np.array_equal(unused.grad, np.zeros((2, 2)))
    assert np.array_equal(x.grad, np.ones(2))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.parents == ()


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite),
       st.sampled_from(["tanh", "sigmoid", "silu", "exp_small", "softmax"]))
def test_elementwise_gradients_match_differences(x, name):
    fns = {"tanh": ops.tanh, "sigmoid": ops.sigmoid, "silu": ops.silu,
           "exp_small": lambda t: ops.exp(t * 0.1), "softmax": lambda t: ops.softmax(t, axis=1)}
    t = Tensor(x.copy(), requires_grad=True)
    w = np.cos(np.arange(x.size)).reshape(x.shape)
    errs = check_gradients(lambda: ops.sum(fns[name](t) * w), {"x": t})
    assert errs["x"] < 1e-6


def test_directional_check_refines_past_nearby_kink():
    # kink 4e-6 from the probe point: a 1e-5 step straddles it, a 1e-6 step does not
    x = Tensor(np.zeros(1), requires_grad=True)
    fn = lambda: ops.sum(ops.relu(x + 4e-6) * 5.0 + x * x)
    assert check_directional(fn, {"x": x})["x"] < 1e-8
    wrong = Tensor(np.zeros(1), requires_grad=True)
    bad = lambda: make_node(np.array(5.0 * wrong.data[0]), (wrong,), lambda g: (g * np.array([4.0]),), "bad")
    assert check_directional(bad, {"w": wrong})["w"] > 0.1


def test_ops_are_deterministic():
    rng = np.random.default_rng(10)
    x, k = rng.standard_normal((2, 5, 5, 5)), rng.standard_normal((3, 2, 3, 3, 3))
    a = conv3d(x, k, pad=1).data
    b = conv3d(x, k, pad=1).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_keeps_params():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    state = AdamState(lr=0.1)
    adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_is_lr():
    p = {"w": Tensor(np.zeros(4), requires_grad=True)}
    adam_step(p, {"w": np.array([3.0, -0.2, 50.0, -7.0])}, AdamState(lr=0.01))
    assert np.allclose(np.abs(p["w"].data), 0.01, rtol=1e-6)


def test_adam_minimises_quadratic_bowl():
    target = np.array([1.5, -0.5, 3.0])
    w = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam({"w": w}, lr=1e-2)
    for _ in range(2000):
        opt.zero_grad()
        d = w - target
        backward(ops.sum(d * d))
        opt.step()
    assert float(np.sum((w.data - target) ** 2)) < 1e-6


def test_adam_rejects_non_positive_lr():
    with pytest.raises(ValueError):
        AdamState(lr=0.0)


# ---------------------------------------------------------------- serialisation

@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tensor_encoding_round_trip(x):
    back = decode_tensor(encode_tensor(x))
    assert back.shape == x.shape and back.tobytes() == np.array(x, order="C").tobytes()


def test_tensor_layout_is_little_endian_rank_extents_values():
    buf = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:12] == b"\x02\x00\x00\x00\x01\x00\x00\x00\x03\x00\x00\x00"
    assert np.frombuffer(buf[12:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_truncated_tensor_rejected():
    buf = encode_tensor(np.ones((2, 2)))
    with pytest.raises(ValueError):
        decode_tensor(buf[:-3])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    params = {"a": {"w": Tensor(rng.standard_normal((2, 3)))}, "b": Tensor(rng.standard_normal(4))}
    flat = flatten_params(params)
    save_checkpoint(tmp_path / "ck", flat)
    back = load_checkpoint(tmp_path / "ck")
    assert sorted(back) == ["a.w", "b"]
    for k in flat:
        assert np.array_equal(back[k].data, flat[k].data)
