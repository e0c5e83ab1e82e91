import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfmsplat.errors import DegenerateAlignment
from sfmsplat.geomcore import Pose, random_rotation, so3_exp
from sfmsplat.metrics import align_similarity, ate, psnr, rotation_error, ssim, umeyama


def test_psnr_closed_forms():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)
    assert psnr(a, a + np.sqrt(0.001)) == pytest.approx(30.0, abs=1e-12)
    assert psnr(a, a) == 99.0


def test_psnr_with_sparse_error_pattern():
    # 4 of 16 pixels off by 0.2: mean squared error 4 * 0.04 / 16 = 0.01
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    b[0, :] = 0.2
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)


def test_ssim_of_identical_images():
    im = np.random.default_rng(0).uniform(size=(20, 20, 3))
    assert ssim(im, im) == pytest.approx(1.0, abs=1e-12)


def random_traj(rng, n):
    return [Pose(random_rotation(rng), rng.normal(size=3) * 2) for _ in range(n)]


def transform(poses, s, G, c):
    """Apply the world similarity x -> s G x + c to world-to-camera poses."""
    return [Pose(P.R @ G.T, s * P.t - P.R @ G.T @ c) for P in poses]


def test_rotation_error_identical_is_zero():
    p = random_traj(np.random.default_rng(1), 6)
    assert rotation_error(p, p).mean == pytest.approx(0.0, abs=1e-6)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_rotation_error_is_gauge_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = random_traj(rng, 7)
    est = [Pose(so3_exp(rng.normal(0, 0.02, 3)) @ P.R, P.t) for P in gt]
    moved = transform(est, 1.0, random_rotation(rng), rng.normal(size=3))
    a, b = rotation_error(est, gt), rotation_error(moved, gt)
    np.testing.assert_allclose(a.per_camera, b.per_camera, atol=1e-6)
    assert rotation_error(transform(gt, 1.0, random_rotation(rng), np.zeros(3)), gt).mean < 1e-6


def test_rotation_error_planted_camera():
    rng = np.random.default_rng(2)
    gt = random_traj(rng, 20)
    est = list(gt)
    axis = rng.normal(size=3)
    est[4] = Pose(so3_exp(np.radians(5.0) * axis / np.linalg.norm(axis)) @ gt[4].R, gt[4].t)
    e = rotation_error(est, gt).per_camera
    # the global alignment shifts by 5/n degrees; the planted camera keeps most of it
    assert e[4] == pytest.approx(5.0, abs=5.0 / 20 * 1.5)
    assert np.delete(e, 4).max() < 0.5


def test_rotation_error_length_mismatch():
    p = random_traj(np.random.default_rng(3), 3)
    with pytest.raises(ValueError):
        rotation_error(p, p[:2])


def test_ate_identical_is_zero():
    p = random_traj(np.random.default_rng(4), 5)
    assert ate(p, p) == pytest.approx(0.0, abs=1e-12)


@given(seed=st.integers(0, 10_000), s=st.floats(0.1, 10.0))
@settings(max_examples=30, deadline=None)
def test_ate_is_similarity_invariant(seed, s):
    rng = np.random.default_rng(seed)
    gt = random_traj(rng, 8)
    assert ate(transform(gt, s, random_rotation(rng), rng.normal(size=3)), gt) < 1e-9 * max(1.0, s)


def test_ate_global_scale_two():
    gt = random_traj(np.random.default_rng(5), 6)
    assert ate(transform(gt, 2.0, np.eye(3), np.zeros(3)), gt) == pytest.approx(0.0, abs=1e-12)


def test_ate_planted_displacement():
    # a large ring: aligning n cameras with one displaced by d leaves an RMS close to d / sqrt(n)
    n, d = 50, 0.01
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    centers = np.stack([10 * np.cos(ang), 10 * np.sin(ang), 0.3 * np.sin(3 * ang)], axis=1)
    est = centers.copy()
    est[7] += [0, 0, d]
    assert ate(est, centers) == pytest.approx(d / np.sqrt(n), rel=0.05)


def test_ate_degenerate_inputs():
    line = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    with pytest.raises(DegenerateAlignment):
        ate(line, line)
    with pytest.raises(DegenerateAlignment):
        ate(line[:2], line[:2])


def test_umeyama_recovers_similarity():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(30, 3))
    G = random_rotation(rng)
    Y = 1.7 * X @ G.T + [1, 2, 3]
    s, R, t = umeyama(X, Y)
    assert s == pytest.approx(1.7, rel=1e-12)
    np.testing.assert_allclose(R, G, atol=1e-12)
    np.testing.assert_allclose(align_similarity(X, Y), Y, atol=1e-12)
    _, R2, _ = umeyama(X, X @ G.T, with_scale=False)
    np.testing.assert_allclose(R2, G, atol=1e-12)
