import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereopose import stereo_network as S
from stereopose.checks import run_gradchecks
from stereopose.numkernel import Tensor, backward, ops
from stereopose.numkernel.layers import flatten_params

SMALL = S.TSCAConfig(channels=4, d_max=8, iters=2)


def shift_cols(f, d):
    out = np.zeros_like(f)
    out[..., :f.shape[-1] - d] = f[..., d:]
    return out


def test_context_net_scales():
    p = S.init_context_net(np.random.default_rng(0), SMALL)
    outs = S.context_net(np.random.default_rng(1).random((3, 64, 64)), SMALL, p)
    assert [o.shape[1:] for o in outs] == [(16, 16), (8, 8), (4, 4)]
    assert all(np.all(np.isfinite(o.data)) for o in outs)


def test_context_net_without_ta_is_residual_pyramid():
    cfg = S.TSCAConfig(channels=4, use_ta=False)
    p = S.init_context_net(np.random.default_rng(0), cfg)
    img = Tensor(np.random.default_rng(1).random((3, 32, 32)))
    outs = S.context_net(img, cfg, p)
    x = S._apply2d(img, p["stem"], stride=2)
    for i, o in enumerate(outs, start=1):
        x = S.residual_block(S._apply2d(x, p[f"down{i}"], stride=2), p[f"res{i}"])
        assert np.array_equal(o.data, x.data)


def test_context_net_rejects_indivisible():
    with pytest.raises(ValueError):
        S.context_net(np.zeros((3, 40, 64)), SMALL, S.init_context_net(np.random.default_rng(0), SMALL))


def test_correlation_argmax_zero_shift():
    f = np.random.default_rng(2).standard_normal((6, 5, 20))
    vol = S.correlation_volume(f, f, 8).data
    assert vol.shape == (1, 8, 5, 20)
    assert np.all(np.argmax(vol[0], axis=0) == 0)


def test_correlation_argmax_constructed_shift():
    f_right = np.random.default_rng(3).standard_normal((6, 5, 24))
    f_left = np.zeros_like(f_right)
    f_left[..., 3:] = f_right[..., :-3]          # left(u) = right(u - 3)
    vol = S.correlation_volume(f_left, f_right, 8).data[0]
    assert np.all(np.argmax(vol[:, :, 3:], axis=0) == 3)


def test_correlation_groups_and_errors():
    f = np.random.default_rng(4).standard_normal((8, 4, 10))
    assert S.correlation_volume(f, f, 6, groups=2).shape == (2, 6, 4, 10)
    with pytest.raises(ValueError):
        S.correlation_volume(f, f, 11)
    with pytest.raises(ValueError):
        S.correlation_volume(f, f[:, :, :9], 4)


def test_correlation_matches_cosine_loop():
    rng = np.random.default_rng(5)
    fl, fr = rng.standard_normal((3, 2, 7)), rng.standard_normal((3, 2, 7))
    vol = S.correlation_volume(fl, fr, 4).data[0]
    for d in range(4):
        for v in range(2):
            for u in range(7):
                if u - d < 0:
                    assert vol[d, v, u] == 0
                    continue
                a, b = fl[:, v, u], fr[:, v, u - d]
                ref = a @ b / (np.sqrt(a @ a + 1e-12) * np.sqrt(b @ b + 1e-12))
                assert abs(vol[d, v, u] - ref) < 1e-12


@pytest.mark.parametrize("use_seca", [True, False])
def test_regularize_shape_and_gradients_reach_params(use_seca):
    cfg = S.TSCAConfig(channels=4, d_max=8, use_seca=use_seca)
    rng = np.random.default_rng(6)
    p = S.init_regularizer(rng, cfg)
    for t in flatten_params(p).values():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    vol = Tensor(rng.standard_normal((1, 8, 8, 16)))
    out = S.regularize(vol, p, cfg)
    assert out.shape == (1, 8, 8, 16) and np.all(np.isfinite(out.data))
    flat = flatten_params(p)
    backward(ops.sum(out * rng.standard_normal(out.shape)), inputs=list(flat.values()))
    dead = [k for k, t in flat.items() if not np.any(t.grad)]
    assert not dead
    assert any("seca" in k for k in flat) == use_seca


def test_regularize_rejects_bad_extent():
    with pytest.raises(ValueError):
        S.regularize(np.zeros((1, 6, 8, 8)), S.init_regularizer(np.random.default_rng(0), SMALL), SMALL)


def test_soft_argmax_examples():
    one_hot = np.full((1, 8, 2, 3), -1e3)
    one_hot[0, 5] = 0.0
    assert np.allclose(S.soft_argmax_disparity(one_hot).data, 5.0, atol=1e-12)
    assert np.allclose(S.soft_argmax_disparity(np.zeros((1, 8, 2, 3))).data, 3.5, atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_soft_argmax_oracle_and_shift_invariance(seed, c):
    vol = np.random.default_rng(seed).standard_normal((1, 6, 3, 4)) * 3
    out = S.soft_argmax_disparity(vol).data
    ref = np.zeros((1, 3, 4))
    for v in range(3):
        for u in range(4):
            e = np.exp(vol[0, :, v, u] - vol[0, :, v, u].max())
            ref[0, v, u] = sum(d * e[d] for d in range(6)) / e.sum()
    assert np.max(np.abs(out - ref)) < 1e-12
    assert np.max(np.abs(S.soft_argmax_disparity(vol + c).data - out)) < 1e-12
    assert out.min() >= 0 and out.max() <= 5


def _gru_inputs(seed, c=4):
    rng = np.random.default_rng(seed)
    p = {g: S._conv(rng, c, 2 * c) for g in ("z", "r", "q")}
    h = Tensor(np.tanh(rng.standard_normal((c, 6, 6))))
    x = Tensor(rng.standard_normal((c, 6, 6)) * 5)
    ctx = tuple(Tensor(rng.standard_normal((c, 6, 6))) for _ in range(3))
    return h, x, ctx, p


@settings(max_examples=20)
@given(st.integers(0, 2**31))
def test_gru_hidden_bounded(seed):
    h, x, ctx, p = _gru_inputs(seed)
    for _ in range(3):
        h = S.convgru_step(h, x, ctx, p)
    assert np.all(np.abs(h.data) < 1)


def test_gru_zero_update_gate_keeps_hidden():
    h, x, ctx, p = _gru_inputs(7)
    assert np.array_equal(S.convgru_step(h, x, ctx, p, force_z=0.0).data, h.data)


def test_forward_iterates_and_range():
    rng = np.random.default_rng(8)
    params = S.init_tsca(SMALL, seed=0)
    its = S.tsca_forward(rng.random((32, 48, 3)), rng.random((32, 48, 3)), params, SMALL)
    assert len(its) == SMALL.iters + 1
    for d in its:
        assert d.shape == (1, 32, 48) and np.all(np.isfinite(d.data))
        assert d.data.min() >= 0 and d.data.max() <= SMALL.max_disparity + 1e-12


def test_forward_errors():
    params = S.init_tsca(SMALL)
    with pytest.raises(ValueError):
        S.tsca_forward(np.zeros((30, 32, 3)), np.zeros((30, 32, 3)), params, SMALL)
    with pytest.raises(ValueError):
        S.tsca_forward(np.zeros((32, 32, 3)), np.zeros((32, 48, 3)), params, SMALL)


def test_every_parameter_group_reachable():
    rng = np.random.default_rng(9)
    params = S.init_tsca(SMALL, seed=1)
    flat = flatten_params(params)
    for t in flat.values():
        t.data = t.data + 0.1 * rng.standard_normal(t.shape)
    its = S.tsca_forward(rng.random((32, 32, 3)), rng.random((32, 32, 3)), params, SMALL)
    backward(S.sequence_loss(its, np.full((32, 32), 6.0), np.ones((32, 32), bool)), inputs=list(flat.values()))
    groups = {}
    for k, t in flat.items():
        top = k.split(".")[0] + "." + k.split(".")[1]
        groups[top] = groups.get(top, False) or bool(np.any(t.grad))
    assert all(groups.values()), [g for g, ok in groups.items() if not ok]


def test_sequence_loss_examples():
    gt = np.random.default_rng(10).random((4, 5)) * 9
    mask = np.ones((4, 5), bool)
    mask[0, 0] = False
    assert S.sequence_loss([gt[None]] * 3, gt, mask).item() == 0.0
    d = gt[None] + 1.5
    assert S.sequence_loss([d], gt, mask, gamma=1.0).item() == pytest.approx(1.5, abs=1e-14)


def test_sequence_loss_hand_sum():
    rng = np.random.default_rng(11)
    gt = rng.random((3, 3))
    mask = rng.random((3, 3)) > 0.3
    its = [gt[None] + rng.standard_normal((1, 3, 3)) for _ in range(3)]
    ref = 0.0
    for k, d in enumerate(its):
        ref += 0.8 ** (2 - k) * np.abs(d[0] - gt)[mask].mean()
    assert S.sequence_loss(its, gt, mask, gamma=0.8).item() == pytest.approx(ref, abs=1e-14)


def test_sequence_loss_errors():
    with pytest.raises(ValueError):
        S.sequence_loss([np.zeros((1, 2, 2))], np.zeros((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        S.sequence_loss([np.zeros((1, 2, 2))], np.zeros((2, 2)), np.ones((2, 2), bool), gamma=0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        S.TSCAConfig(d_max=0)
    with pytest.raises(ValueError):
        S.TSCAConfig(channels=6, corr_groups=4)


def test_textured_pairs_are_consistent():
    pair = S.textured_plane_pairs(n=2, size=32, d_range=(4.0, 8.0))[1]
    d = 8
    assert np.allclose(pair.left[:, :-d], pair.right[:, d:], atol=1e-12)
    assert not pair.mask[:, :d].any() and pair.mask[:, d:].all()


def test_train_toy_deterministic_and_errors():
    pairs = S.textured_plane_pairs(n=2, size=32, d_range=(4.0, 12.0))
    a = S.train_toy(pairs, SMALL, steps=2, seed=3)
    b = S.train_toy(pairs, SMALL, steps=2, seed=3, schedule="cyclic")
    c = S.train_toy(pairs, SMALL, steps=2, seed=3)
    assert np.array(a.losses).tobytes() == np.array(c.losses).tobytes()
    assert a.losses[0] == b.losses[0]
    with pytest.raises(ValueError):
        S.train_toy([], SMALL, steps=1)


def test_stereo_gradients_match_differences():
    rows = run_gradchecks("stereo_network", seeds=[0])
    assert rows and all(r.passed for r in rows), [r for r in rows if not r.passed]


def test_gradient_suite_catches_wrong_relu_backward(monkeypatch):
    from stereopose.numkernel.tensor import as_tensor, make_node

    def leaky_grad_relu(a):
        a = as_tensor(a)
        mask = a.data > 0
        return make_node(a.data * mask, (a,), lambda g: (g * mask * 0.9,), "relu")

    monkeypatch.setattr(ops, "relu", leaky_grad_relu)
    rows = {r.op: r for r in run_gradchecks("stereo_network", seeds=[0])}
    assert not rows["tsca_sequence_loss"].passed
    assert not rows["regularize"].passed
