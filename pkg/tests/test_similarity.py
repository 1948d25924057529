import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from conftest import pose_from_points, random_pose
from oracles import best_rotation_sweep, residual, umeyama
from poseforge.similarity import (DegenerateConfigurationError, SimTransform, apply, center,
                                  compose, covariance, dis_metric, fit_sequence, invert,
                                  kabsch_rotation, rotation_matrix, similarity_fit, svd2x2)
from poseforge.skeleton import PoseSequence

R90 = np.array([[0.0, -1.0], [1.0, 0.0]])
T_EX = SimTransform.from_params(math.pi / 2, 2.0, [1.0, 1.0])


def test_center_examples():
    c = center(np.array([[1.0, -1.0], [0.0, 0.0]]))
    assert c.centroid.tolist() == [0, 0]
    c = center(np.array([[2.0, 4.0], [2.0, 2.0]]))
    assert c.points.tolist() == [[-1, 1], [0, 0]] and c.centroid.tolist() == [3, 2]
    c = center(np.array([[5.0], [7.0]]))
    assert c.points.tolist() == [[0], [0]] and c.centroid.tolist() == [5, 7]
    with pytest.raises(ValueError):
        center(np.zeros((2, 0)))


def test_covariance_examples():
    X = np.array([[1.0, -1.0], [0.0, 0.0]])
    assert covariance(X, X).tolist() == [[2, 0], [0, 0]]
    assert covariance(np.zeros((2, 2)), X).tolist() == [[0, 0], [0, 0]]
    assert np.allclose(covariance(X, R90 @ X), [[0, 2], [0, 0]], atol=1e-15)
    with pytest.raises(ValueError, match="mismatch"):
        covariance(X, np.zeros((2, 3)))


def test_svd2x2_examples():
    U, s, Vt = svd2x2(np.eye(2))
    assert np.allclose(s, [1, 1]) and np.allclose(U @ Vt, np.eye(2))
    assert np.allclose(svd2x2([[2.0, 0.0], [0.0, 0.0]])[1], [2, 0])
    U, s, Vt = svd2x2(np.zeros((2, 2)))
    assert s.tolist() == [0, 0] and np.allclose(U, np.eye(2)) and np.allclose(Vt, np.eye(2))


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4))
def test_svd2x2_reconstructs_and_matches_lapack(vals):
    K = np.array(vals).reshape(2, 2)
    U, s, Vt = svd2x2(K)
    assert np.abs(U @ np.diag(s) @ Vt - K).max() <= 1e-12 * (1 + np.linalg.norm(K))
    assert s[0] >= s[1] >= 0
    assert np.allclose(U.T @ U, np.eye(2), atol=1e-12) and np.allclose(Vt @ Vt.T, np.eye(2), atol=1e-12)
    assert np.allclose(s, np.linalg.svd(K, compute_uv=False), atol=1e-12 * (1 + np.linalg.norm(K)))


def test_kabsch_examples():
    X = np.array([[1.0, -1.0, 0.0], [0.0, 0.0, 0.5]])
    X = center(X).points
    assert np.allclose(kabsch_rotation(covariance(X, X)), np.eye(2))
    Xd = np.array([[1.0, -1.0], [0.0, 0.0]])
    assert np.allclose(kabsch_rotation(covariance(Xd, R90 @ Xd)), R90, atol=1e-15)
    with pytest.raises(DegenerateConfigurationError):
        kabsch_rotation(np.zeros((2, 2)))


def test_reflection_gives_best_proper_rotation():
    rng = np.random.default_rng(5)
    Xd = center(rng.normal(size=(2, 7))).points
    Xr = np.diag([-1.0, 1.0]) @ Xd
    R = kabsch_rotation(covariance(Xd, Xr))
    assert abs(np.linalg.det(R) - 1) < 1e-12
    theta = math.atan2(R[1, 0], R[0, 0])
    best = best_rotation_sweep(Xd, Xr)
    assert abs(math.remainder(theta - best, 2 * math.pi)) < 2 * math.pi / 1e5


def test_worked_example():
    Pd = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    Pr = np.array([[1.0, 1.0, -1.0], [1.0, 3.0, 1.0]])
    T = similarity_fit(Pd, Pr)
    assert abs(T.theta - math.pi / 2) < 1e-9 and abs(T.scale - 2) < 1e-9
    assert np.allclose(T.translation, [1, 1], atol=1e-9)


def test_identity_fit():
    P = np.array([[0.1, 0.5, 0.3], [0.2, 0.1, 0.9]])
    assert similarity_fit(P, P).allclose(SimTransform.identity(), 1e-12)


def test_degenerate_inputs():
    with pytest.raises(DegenerateConfigurationError, match="degenerate configuration"):
        similarity_fit(np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([[0.0, 1.0], [0.0, 1.0]]))
    with pytest.raises(DegenerateConfigurationError, match="fewer than 2"):
        similarity_fit(np.array([[1.0], [2.0]]), np.array([[0.0], [0.0]]))


def test_pose_fit_uses_common_keypoints():
    rng = np.random.default_rng(0)
    ref = random_pose(rng)
    drv = apply(invert(T_EX), ref)
    drv[3, :2] = (100.0, -100.0)  # garbage coordinates on a missing keypoint
    drv[3, 2] = 0.0
    assert similarity_fit(drv, ref).allclose(T_EX, 1e-9)


def test_apply_examples():
    p = np.array([[1.0], [0.0]])
    assert np.allclose(apply(T_EX, p), [[1], [3]])
    assert np.array_equal(apply(SimTransform.identity(), p), p)
    assert np.allclose(apply(invert(T_EX), np.array([[1.0], [3.0]])), p, atol=1e-15)


def test_apply_passes_missing_keypoints_through():
    kp = pose_from_points([(0.2, 0.3)])
    kp[5] = (0.7, 0.8, 0.0)
    out = apply(T_EX, kp)
    assert out[5].tolist() == [0.7, 0.8, 0.0]
    assert np.allclose(out[0], [1 - 0.6, 1 + 0.4, 1.0])


def test_apply_to_sequence_keeps_metadata():
    seq = PoseSequence(np.ones((2, 18, 3)) * 0.5, 25, 1, 1)
    out = apply(T_EX, seq)
    assert isinstance(out, PoseSequence) and out.fps == 25 and out.n_frames == 2


def test_compose_identity_and_inverse():
    I = SimTransform.identity()
    assert compose(I, T_EX).allclose(T_EX, 1e-15)
    assert compose(T_EX, invert(T_EX)).allclose(I, 1e-12)


def test_dis_examples():
    P = np.array([[0.0], [0.0]])
    assert dis_metric(P, P) == 0
    assert dis_metric(P, np.array([[3.0], [4.0]])) == 5
    a = pose_from_points([(0, 0), (1, 1)])
    b = pose_from_points([(3, 4), (1, 1)])
    b[1, 2] = 0
    assert dis_metric(a, b) == 5
    with pytest.raises(ValueError, match="no comparable"):
        dis_metric(np.zeros((18, 3)), np.zeros((18, 3)))


def test_matches_lapack_umeyama_on_noisy_data():
    rng = np.random.default_rng(11)
    for _ in range(50):
        Pd = rng.normal(size=(2, 18))
        Pr = 1.3 * rotation_matrix(0.4) @ Pd + rng.normal(scale=0.05, size=(2, 18)) + 0.2
        T = similarity_fit(Pd, Pr)
        R, S, t = umeyama(Pd, Pr)
        assert np.allclose(T.rotation, R, atol=1e-12)
        assert abs(T.scale - S) < 1e-12 and np.allclose(T.translation, t, atol=1e-12)


def test_stack_mode_equals_first_for_a_static_sequence():
    rng = np.random.default_rng(2)
    ref = random_pose(rng)
    drv = apply(invert(T_EX), ref)
    seq = PoseSequence(np.stack([drv, drv, drv]), 30, 1, 1)
    assert fit_sequence(ref, seq, "stack").allclose(fit_sequence(ref, seq, "first"), 1e-12)
    with pytest.raises(ValueError):
        fit_sequence(ref, seq, "median")


angles = st.floats(-math.pi + 1e-6, math.pi)
scales = st.floats(0.25, 4.0)
shifts = st.floats(-1.0, 1.0)


@st.composite
def transforms(draw):
    return SimTransform.from_params(draw(angles), draw(scales), [draw(shifts), draw(shifts)])


@st.composite
def pointsets(draw, m=5):
    seed = draw(st.integers(0, 2**32 - 1))
    P = np.random.default_rng(seed).uniform(-1, 1, size=(2, m))
    d1, d2 = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]
    assume(abs(d1[0] * d2[1] - d1[1] * d2[0]) > 1e-3)
    return P


@given(transforms(), pointsets())
def test_exact_recovery(T, Pd):
    fit = similarity_fit(Pd, apply(T, Pd))
    assert abs(math.remainder(fit.theta - T.theta, 2 * math.pi)) < 1e-9
    assert abs(fit.scale - T.scale) < 1e-9
    assert np.abs(fit.translation - T.translation).max() < 1e-9


@given(pointsets(m=8), pointsets(m=8))
def test_trace_identity_and_proper_rotation(Pd, Pr):
    Xd, Xr = center(Pd), center(Pr)
    K = covariance(Xd, Xr)
    U, s, Vt = svd2x2(K)
    R = kabsch_rotation(K)
    assert np.abs(R.T @ R - np.eye(2)).max() < 1e-9
    assert 1 - 1e-9 <= np.linalg.det(R) <= 1 + 1e-9
    if np.linalg.det(Vt.T @ U.T) > 0:
        assert abs(np.trace(R @ K) - s.sum()) < 1e-9 * (1 + s.sum())


@given(transforms(), pointsets(), pointsets())
def test_equivariance(G, Pd, Pr):
    lhs = similarity_fit(Pd, apply(G, Pr))
    rhs = compose(G, similarity_fit(Pd, Pr))
    assert lhs.allclose(rhs, 1e-9 * max(1.0, G.scale * 10))


@given(transforms(), pointsets())
def test_inverse_round_trip(T, P):
    assert np.abs(apply(T, apply(invert(T), P)) - P).max() < 1e-12 * max(1, T.scale, 1 / T.scale) * 10


def test_fit_beats_random_candidates():
    rng = np.random.default_rng(8)
    Pd = rng.uniform(size=(2, 18))
    Pr = apply(T_EX, Pd) + rng.normal(scale=0.02, size=(2, 18))
    T = similarity_fit(Pd, Pr)
    best = residual(T.rotation, T.scale, T.translation, Pd, Pr)
    th = rng.uniform(-math.pi, math.pi, 2000)
    S = rng.uniform(0.5, 4, 2000)
    t = rng.uniform(-2, 2, (2000, 2))
    for k in range(2000):
        assert best <= residual(rotation_matrix(th[k]), S[k], t[k], Pd, Pr)
