import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfmsplat.errors import NonPositiveDepth
from sfmsplat.geomcore import (
    CameraIntrinsics,
    Pose,
    RobustKernel,
    hat,
    matrix_from_quat,
    project,
    quat_from_matrix,
    random_rotation,
    robust_loss,
    rotation_angle,
    se3_compose,
    se3_exp,
    se3_left_jacobian,
    se3_log,
    so3_exp,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    unproject,
)


def test_so3_log_identity_and_quarter_turn():
    assert np.array_equal(so3_log(np.eye(3)), np.zeros(3))
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(so3_log(Rz), [0, 0, np.pi / 2], atol=1e-15)


def test_so3_exp_quarter_turn():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))
    np.testing.assert_allclose(so3_exp([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_exp_log_roundtrip_random():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        R = random_rotation(rng)
        worst = max(worst, np.linalg.norm(so3_exp(so3_log(R)) - R))
    assert worst < 1e-9


@pytest.mark.parametrize("axis", [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, -2, 3]])
@pytest.mark.parametrize("gap", [0.0, 1e-12, 1e-7, 1e-3])
def test_log_near_pi(axis, gap):
    a = np.asarray(axis, float) / np.linalg.norm(axis)
    R = so3_exp((np.pi - gap) * a)
    w = so3_log(R)
    assert np.linalg.norm(w) <= np.pi + 1e-12
    assert np.linalg.norm(so3_exp(w) - R) < 1e-9


def test_log_at_pi_is_deterministic():
    R = np.diag([1.0, -1.0, -1.0])
    w1, w2 = so3_log(R), so3_log(R.copy())
    assert np.array_equal(w1, w2)
    np.testing.assert_allclose(np.abs(w1), [np.pi, 0, 0], atol=1e-12)


def test_small_angle_taylor_bound():
    rng = np.random.default_rng(1)
    for _ in range(200):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 1e-3) / np.linalg.norm(w)
        assert np.linalg.norm(so3_exp(w) - (np.eye(3) + hat(w))) <= np.linalg.norm(w) ** 2


def test_rotation_invariants():
    rng = np.random.default_rng(2)
    for _ in range(100):
        R = so3_exp(rng.normal(size=3) * 2)
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(R) - 1) < 1e-9


def test_so3_jacobians_against_finite_differences():
    rng = np.random.default_rng(3)
    for scale in (1e-6, 0.03, 1.0, 2.5):
        w = rng.normal(size=3)
        w *= scale / np.linalg.norm(w)
        Jl = so3_left_jacobian(w)
        h = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            dR = so3_exp(w + e) @ so3_exp(w).T
            np.testing.assert_allclose(so3_log(dR) / h, Jl[:, k], atol=1e-6)
        np.testing.assert_allclose(so3_left_jacobian_inv(w) @ Jl, np.eye(3), atol=1e-10)


def test_se3_left_jacobian_against_finite_differences():
    rng = np.random.default_rng(4)
    for scale in (0.0, 1e-3, 0.04, 0.06, 0.7, 2.0):
        xi = rng.normal(size=6)
        xi[:3] *= scale / max(np.linalg.norm(xi[:3]), 1e-300)
        J = se3_left_jacobian(xi)
        base = Pose(*se3_exp(xi))
        h = 1e-6
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            plus = Pose(*se3_exp(xi + e)).compose(base.inverse())
            minus = Pose(*se3_exp(xi - e)).compose(base.inverse())
            fd = (se3_log(plus) - se3_log(minus)) / (2 * h)
            np.testing.assert_allclose(fd, J[:, k], atol=1e-7)


def test_se3_compose_identity_and_translation():
    rng = np.random.default_rng(5)
    T = Pose(random_rotation(rng), rng.normal(size=3))
    assert se3_compose(T, np.zeros(6)) is T
    P = se3_compose(Pose.identity(), [0, 0, 0, 1, 2, 3])
    assert np.array_equal(P.R, np.eye(3))
    np.testing.assert_allclose(P.t, [1, 2, 3])


def test_se3_compose_inverse_roundtrip():
    rng = np.random.default_rng(6)
    for _ in range(50):
        T = Pose(random_rotation(rng), rng.normal(size=3))
        d = rng.normal(size=6) * 0.5
        Td = se3_compose(T, d)
        inv = se3_log(Pose(*se3_exp(d)).inverse())
        back = se3_compose(Td, inv)
        assert np.abs(back.R - T.R).max() < 1e-9
        assert np.abs(back.t - T.t).max() < 1e-9


def test_pose_inverse_composition():
    rng = np.random.default_rng(7)
    T = Pose(random_rotation(rng), rng.normal(size=3))
    I = T.compose(T.inverse())
    np.testing.assert_allclose(I.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(I.t, 0, atol=1e-12)
    np.testing.assert_allclose(T.center, -T.R.T @ T.t)


def test_pose_is_immutable():
    T = Pose.identity()
    with pytest.raises(ValueError):
        T.R[0, 0] = 2.0


def test_project_examples():
    K1 = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 10, 10)
    I = Pose.identity()
    np.testing.assert_allclose(project(K1, I, [0, 0, 2]), [0, 0])
    np.testing.assert_allclose(project(K1, I, [2, 4, 2]), [1, 2])
    K = CameraIntrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)
    np.testing.assert_allclose(project(K, I, [0.5, 0, 1]), [370, 240])
    with pytest.raises(NonPositiveDepth):
        project(K, I, [0, 0, -1])
    with pytest.raises(NonPositiveDepth):
        project(K, I, [0, 0, 0])


@settings(max_examples=300, deadline=None)
@given(
    st.floats(50, 500),
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    st.floats(-20, 20),
    st.floats(-20, 20),
    st.floats(0.5, 20),
)
def test_projection_reprojection(f, w, t, u, v, depth):
    K = CameraIntrinsics.simple(f, 64, 64)
    T = Pose(so3_exp(w), t)
    uv = np.array([32 + u, 32 + v])
    X = unproject(K, T, uv, depth)
    np.testing.assert_allclose(project(K, T, X), uv, atol=1e-9)


def test_robust_loss_examples():
    gm = RobustKernel("geman_mcclure", 0.3)
    assert robust_loss(gm, 0.09)[0] == pytest.approx(0.5)
    hub = RobustKernel("huber", 1.0)
    assert robust_loss(hub, 0.25) == (0.25, 1.0)
    assert robust_loss(hub, 4.0)[0] == pytest.approx(3.0)


def _huber_scalar(r, d):
    # textbook Huber on the residual norm, doubled so it matches s below the knee
    r = abs(r)
    return r * r if r <= d else 2 * d * r - d * d


@given(st.floats(0, 100), st.floats(0.1, 5))
def test_huber_matches_scalar_reference(r, d):
    v, _ = robust_loss(RobustKernel("huber", d), r * r)
    assert v == pytest.approx(_huber_scalar(r, d), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("kind", ["huber", "geman_mcclure", "cauchy"])
@given(scale=st.floats(0.01, 10), s=st.lists(st.floats(0, 1e6), min_size=2, max_size=20))
def test_kernel_properties(kind, scale, s):
    k = RobustKernel(kind, scale)
    assert robust_loss(k, 0.0)[0] == 0.0
    s = np.sort(np.asarray(s))
    v, w = robust_loss(k, s)
    assert np.all(np.diff(v) >= -1e-12 * np.abs(v[1:]))
    assert np.all((w > 0) & (w <= 1))
    if kind == "huber":
        inside = s <= scale * scale
        assert np.array_equal(v[inside], s[inside])
    if kind == "geman_mcclure":
        assert np.all(v < 1)


def test_weights_vanish_for_redescending_kernels():
    for kind in ("geman_mcclure", "cauchy"):
        _, w = robust_loss(RobustKernel(kind, 1.0), 1e12)
        assert w < 1e-6
    assert robust_loss(RobustKernel("huber", 1.0), 0.0)[1] == 1.0


def test_weights_match_derivative():
    for kind in ("huber", "cauchy"):
        k = RobustKernel(kind, 1.5)
        for s in (0.5, 3.0, 40.0):
            h = 1e-6
            fd = (robust_loss(k, s + h)[0] - robust_loss(k, s - h)[0]) / (2 * h)
            assert robust_loss(k, s)[1] == pytest.approx(fd, rel=1e-6)


def test_quaternion_roundtrip():
    rng = np.random.default_rng(8)
    for _ in range(200):
        R = random_rotation(rng)
        q = quat_from_matrix(R)
        assert q[0] >= 0
        np.testing.assert_allclose(matrix_from_quat(q), R, atol=1e-12)
    np.testing.assert_array_equal(quat_from_matrix(np.eye(3)), [1, 0, 0, 0])


def test_rotation_angle():
    assert rotation_angle(so3_exp([0, 0.3, 0])) == pytest.approx(0.3)
