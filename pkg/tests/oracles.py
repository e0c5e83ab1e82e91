"""Independent oracles shared by the unit and acceptance suites.

Finite-difference checks of every analytic derivative, the dense normal-equation
solve that the Schur step must reproduce, and fundamental matrices built from a
known calibration.
"""

import numpy as np

from sfmsplat.ba import BAOptions, Reconstruction, _Problem, _state_from, dense_step, reprojection_jacobians
from sfmsplat.ba import reprojection_residual, schur_step
from sfmsplat.geomcore import CameraIntrinsics, Pose, hat, se3_compose, so3_exp
from sfmsplat.jointopt import JointConfig, JointState, joint_ba_loss
from sfmsplat.splatrender import GaussianSet, RenderConfig, render, render_with_gradients
from sfmsplat.synthscene import generate_scene
from sfmsplat.tracks import Observation, Track
from sfmsplat.viewgraph import FocalEdge

# Without hard cutoffs the rendered image is a smooth function of every parameter,
# which is what a difference quotient can check.
SMOOTH = RenderConfig(sigma_cutoff=8.0, alpha_min=0.0, t_min=0.0)


def rel_err(fd, an):
    fd, an = np.ravel(fd), np.ravel(an)
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(fd), np.linalg.norm(an), 1e-300))


def random_splat_scene(seed, n=12, size=32):
    rng = np.random.default_rng(seed)
    deg = seed % 4
    g = GaussianSet(
        rng.normal(size=(n, 3)) * 0.4,
        np.log(rng.uniform(0.08, 0.25, (n, 3))),
        rng.normal(size=(n, 4)),
        rng.normal(size=n) * 0.5,
        rng.normal(size=(n, (deg + 1) ** 2, 3)) * 0.15,
    )
    K = CameraIntrinsics.simple(1.25 * size, size, size)
    T = Pose(so3_exp(rng.normal(0, 0.1, 3)), np.array([0.0, 0.0, 3.0]) + rng.normal(0, 0.1, 3))
    twist = rng.normal(0, 0.02, 6)
    # keep every residual far from zero so the absolute-value term has no kink nearby
    base = render(g, K, se3_compose(T, twist), cfg=SMOOTH).rgb
    target = base + rng.choice([-0.3, 0.3], size=base.shape)
    return g, K, T, twist, target


def renderer_gradient_errors(seed, h=1e-6, per_block=12, lambda_ssim=0.2):
    """Relative error of every analytic gradient block against central differences."""
    g, K, T, twist, target = random_splat_scene(seed)
    out = render_with_gradients(g, K, T, target, lambda_ssim, twist=twist, cfg=SMOOTH)

    def loss(gg, tw):
        return render_with_gradients(gg, K, T, target, lambda_ssim, twist=tw, cfg=SMOOTH).loss

    errs = {}
    rng = np.random.default_rng(seed + 7)
    an_blocks = out.gaussians.as_dict()
    for name, arr in g.params().items():
        idx = rng.choice(arr.size, min(per_block, arr.size), replace=False)
        fd = []
        for i in idx:
            gp, gm = g.copy(), g.copy()
            gp.params()[name].reshape(-1)[i] += h
            gm.params()[name].reshape(-1)[i] -= h
            fd.append((loss(gp, twist) - loss(gm, twist)) / (2 * h))
        errs[name] = rel_err(fd, an_blocks[name].reshape(-1)[idx])
    fd = []
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        fd.append((loss(g, twist + e) - loss(g, twist - e)) / (2 * h))
    errs["pose"] = rel_err(fd, out.pose)
    return errs


def joint_state_near_optimum(seed, n_cameras=6, n_points=80, angle_deg=0.5, camera=2):
    """Ground-truth state with one camera's twist rotated by a small angle."""
    s = generate_scene(n_cameras, n_points, "orbit", seed)
    st = JointState.initialize(GaussianSet.empty(), s.poses, s.tracks, s.intrinsics)
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    st.pose_adjustments[camera, :3] = np.radians(angle_deg) * axis / np.linalg.norm(axis)
    st.pose_adjustments[camera, 3:] = rng.normal(0, 1e-3, 3)
    return s, st


def ba_gradient_errors(state, config=JointConfig(), batch=None, h=1e-6):
    """Relative errors of the reprojection-loss gradient w.r.t. twists and track points."""
    res = joint_ba_loss(state, batch, config)

    def loss(st):
        return joint_ba_loss(st, batch, config).loss

    fd_tw = np.zeros_like(state.pose_adjustments)
    for c in range(state.n_cameras):
        for i in range(6):
            sp, sm = state.copy(), state.copy()
            sp.pose_adjustments[c, i] += h
            sm.pose_adjustments[c, i] -= h
            fd_tw[c, i] = (loss(sp) - loss(sm)) / (2 * h)
    fd_pt = np.zeros((min(10, len(state.track_points)), 3))
    for k in range(len(fd_pt)):
        for i in range(3):
            sp, sm = state.copy(), state.copy()
            sp.track_points[k, i] += h
            sm.track_points[k, i] -= h
            fd_pt[k, i] = (loss(sp) - loss(sm)) / (2 * h)
    return rel_err(fd_tw, res.grad_twists), rel_err(fd_pt, res.grad_points[: len(fd_pt)]), fd_tw, res


def ba_jacobian_error(seed, h=1e-6):
    """Worst relative error of the pose, point and focal Jacobians of one random observation."""
    rng = np.random.default_rng(seed)
    f = rng.uniform(100, 1000)
    K = CameraIntrinsics(f, f, rng.uniform(0, 640), rng.uniform(0, 480), 640, 480)
    T = Pose(so3_exp(rng.normal(0, 1, 3)), rng.normal(0, 1, 3))
    X = T.inverse().apply(np.array([*rng.uniform(-1, 1, 2), rng.uniform(2, 6)]))
    x_obs = rng.uniform(0, 500, 2)
    Jt, Jx, Jf = reprojection_jacobians(K, T, X)

    def num(fun, n):
        return np.stack([(fun(h * e) - fun(-h * e)) / (2 * h) for e in np.eye(n)], axis=1)

    nt = num(lambda d: reprojection_residual(K, se3_compose(T, d), X, x_obs), 6)
    nx = num(lambda d: reprojection_residual(K, T, X + d, x_obs), 3)
    nf = num(lambda d: reprojection_residual(K.with_focal(f + d[0]), T, X, x_obs), 1)
    return max(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0) for a, b in ((Jt, nt), (Jx, nx), (Jf, nf)))


def schur_dense_gap(seed, n_cam, n_pt, focal):
    """Max difference between the Schur-reduced and the dense damped step, relative to the step size."""
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics.simple(300.0, 128, 128)
    poses = {c: Pose(so3_exp(rng.normal(0, 0.1, 3)), np.array([c * 0.5, 0.0, 0.0]) + rng.normal(0, 0.05, 3))
             for c in range(n_cam)}
    tracks = []
    for k in range(n_pt):
        X = rng.uniform(-1, 1, 3) + [0.5 * n_cam / 2, 0, 5]
        obs = [Observation(c, rng.uniform(0, 128, 2), k) for c in range(n_cam) if c == 0 or c == 1 or rng.random() < 0.7]
        tracks.append(Track(k, obs, X))
    rec = Reconstruction({c: K for c in poses}, poses, tracks)
    prob = _Problem(rec, BAOptions(optimize_intrinsics=focal))
    st = _state_from(rec, prob)
    lam = 10.0 ** rng.uniform(-4, 0)
    dz_s, dx_s = schur_step(prob, st, lam)
    dz_d, dx_d = dense_step(prob, st, lam)
    scale = max(np.abs(dz_d).max(), np.abs(dx_d).max(), 1.0)
    return max(np.abs(dz_s - dz_d).max(), np.abs(dx_s - dx_d).max()) / scale


def fetzer_edges(f, n_edges, seed=0, size=(640, 480)):
    """Chain of fundamental matrices ``K^-T [t]x R K^-1`` from one known calibration."""
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics.simple(f, *size)
    edges = []
    for k in range(n_edges):
        R = so3_exp(rng.normal(0, 0.3, 3))
        t = rng.normal(size=3)
        F = K.K_inv.T @ hat(t / np.linalg.norm(t)) @ R @ K.K_inv
        edges.append(FocalEdge(k, k + 1, F / np.linalg.norm(F)))
    pp = {c: (K.cx, K.cy) for c in range(n_edges + 1)}
    return edges, pp
