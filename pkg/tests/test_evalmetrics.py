import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stereopose.evalmetrics import (
    aggregate_disparity, bad_tau, d1, epe, evaluate_disparity, evaluate_pose, rmse, rotation_error,
    translation_error,
)
from stereopose.rigid import random_rotation, rodrigues, rot_z


def loops(D, G, M, fn):
    """Straight double loop over valid pixels, collecting fn(err, gt)."""
    vals = []
    for i in range(D.shape[0]):
        for j in range(D.shape[1]):
            if M[i, j]:
                vals.append(fn(D[i, j] - G[i, j], G[i, j]))
    return vals


def random_maps(seed, shape=(17, 23)):
    rng = np.random.default_rng(seed)
    G = rng.uniform(1, 60, shape)
    D = G + rng.standard_normal(shape) * 4
    M = rng.random(shape) > 0.3
    return D, G, M


def test_epe_examples():
    G = np.random.default_rng(0).random((4, 5)) * 10
    assert epe(G, G) == 0.0
    assert epe(G + 1, G) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_loop_oracles(seed):
    D, G, M = random_maps(seed)
    e = loops(D, G, M, lambda e, g: abs(e))
    assert abs(epe(D, G, M) - sum(e) / len(e)) < 1e-12
    sq = loops(D, G, M, lambda e, g: e * e)
    assert abs(rmse(D, G, M) - math.sqrt(sum(sq) / len(sq))) < 1e-12
    for tau in (1.0, 2.0, 3.0):
        assert bad_tau(D, G, M, tau) == sum(loops(D, G, M, lambda e, g: abs(e) > tau)) / len(e)
    out = loops(D, G, M, lambda e, g: abs(e) > 3 and abs(e) > 0.05 * g)
    assert d1(D, G, M) == sum(out) / len(out)


def test_rmse_examples():
    G = np.zeros((1, 2)) + 5
    assert rmse(G, G) == 0.0
    assert rmse(G + [[0.0, 2.0]], G) == pytest.approx(math.sqrt(2), abs=1e-15)


@settings(max_examples=200)
@given(st.integers(0, 2**31))
def test_rmse_dominates_epe(seed):
    D, G, M = random_maps(seed, (5, 6))
    M[0, 0] = True
    assert rmse(D, G, M) >= epe(D, G, M) - 1e-15


def test_bad_tau_examples():
    G = np.full((2, 2), 20.0)
    assert bad_tau(G, G, tau=2.0) == 0.0
    D = G + np.array([[4.0, 0.0], [4.0, 0.0]])
    assert bad_tau(D, G, tau=2.0) == 0.5
    assert bad_tau(G + 2.0, G, tau=2.0) == 0.0


def test_d1_conjunction():
    assert d1(np.array([[104.0]]), np.array([[100.0]])) == 0.0
    assert d1(np.array([[14.0]]), np.array([[10.0]])) == 1.0


def test_metric_errors():
    G = np.ones((3, 3))
    with pytest.raises(ValueError):
        epe(G, G, np.zeros((3, 3), bool))
    with pytest.raises(ValueError):
        rmse(G, np.ones((3, 4)))
    with pytest.raises(ValueError):
        bad_tau(G, G, tau=0.0)


def test_report_and_aggregation_equal_union():
    parts = [random_maps(s, (9, 11)) for s in range(3)]
    reports = [evaluate_disparity(*p) for p in parts]
    pooled = aggregate_disparity(reports)
    D = np.concatenate([p[0] for p in parts])
    G = np.concatenate([p[1] for p in parts])
    M = np.concatenate([p[2] for p in parts])
    union = evaluate_disparity(D, G, M)
    assert pooled.n == union.n
    for k, v in union.as_record().items():
        assert pooled.as_record()[k] == pytest.approx(v, abs=1e-12)
    r = reports[0]
    assert 0 <= r.d1 <= 1 and r.rmse >= r.epe and r.n > 0
    assert "epe=" in r.text()


def test_translation_error():
    t = np.array([1.0, 2.0, 3.0])
    assert translation_error(t, t) == 0.0
    assert translation_error(t, t + [3, 4, 0]) == 5.0
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        assert translation_error(a, b) == pytest.approx(math.sqrt(sum((a[i] - b[i]) ** 2 for i in range(3))), rel=1e-15)


def test_rotation_error_examples():
    R = random_rotation(np.random.default_rng(6))
    assert rotation_error(R, R) < 1e-15
    assert rotation_error(R, R @ rot_z(math.pi)) == pytest.approx(math.pi, abs=1e-12)


def test_rotation_error_rodrigues_sweep():
    rng = np.random.default_rng(7)
    for _ in range(100):
        R = random_rotation(rng)
        axis = rng.standard_normal(3)
        assert abs(rotation_error(R, R @ rodrigues(axis, 0.5)) - 0.5) < 1e-12


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_rotation_error_symmetry_and_left_invariance(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (random_rotation(rng) for _ in range(3))
    e = rotation_error(A, B)
    assert 0 <= e <= math.pi
    assert rotation_error(B, A) == pytest.approx(e, abs=1e-12)
    assert rotation_error(C @ A, C @ B) == pytest.approx(e, abs=1e-12)


def test_rotation_error_rejects_non_rotation():
    with pytest.raises(ValueError):
        rotation_error(np.eye(3), np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        rotation_error(np.eye(3) * 1.01, np.eye(3))


def test_rotation_error_resolves_tiny_angles():
    # the clamped arccos would round this to 0
    assert rotation_error(np.eye(3), rodrigues([0, 0, 1], 1e-9)) == pytest.approx(1e-9, rel=1e-6)


def test_pose_report_degrees():
    rep = evaluate_pose(np.eye(3), np.zeros(3), rodrigues([1, 0, 0], math.pi / 2), [0, 0, 1])
    assert rep.e_t == 1.0 and rep.e_R_deg == pytest.approx(90.0)
