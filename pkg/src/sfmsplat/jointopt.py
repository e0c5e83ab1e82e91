"""Joint optimization of Gaussians, camera pose adjustments and persistent track points.

Every iteration renders one training image from ``exp(dT_i) T_i0``, takes the
photometric loss against the reference image, adds ``lambda_ba`` times a
Huber reprojection loss over all observations of the tracks seen in that image,
and applies Adam to three parameter blocks:

* Gaussians receive the photometric gradient only;
* pose twists receive both gradients (the anchor camera stays frozen);
* track points receive the reprojection gradient only.

Ablations: ``frozen_poses`` drops the pose gradient, ``photometric_only`` drops
the reprojection term, ``merged_tracks`` replaces each track point by the mean
of the Gaussian initialized from the same SfM point.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import Divergence
from .geomcore import (
    DEPTH_EPSILON,
    CameraIntrinsics,
    Pose,
    RobustKernel,
    robust_loss,
    se3_compose,
    se3_left_jacobian,
    transform_points,
)
from .metrics import ate, psnr, rotation_error
from .splatrender import GaussianSet, RenderConfig, render, render_with_gradients, ssim
from .tracks import Observation, Track

ABLATIONS = ("full", "frozen_poses", "photometric_only", "merged_tracks")

# Pose learning rate used by the desk-scale pipeline. With Adam the per-step
# change of a twist component is bounded by the learning rate, so the long-run
# rate of 1e-5 cannot undo a 1 degree / 1% perturbation within a few thousand steps.
DESK_POSE_LR = 5e-4


@dataclass(frozen=True)
class JointConfig:
    iterations: int = 3000
    lambda_ba: float = 1e-4
    huber_delta: float = 1.0  # px, at the resolution of the track observations
    lambda_ssim: float = 0.2
    lr_pose: float = 1e-5
    lr_means: float = 1.6e-4  # multiplied by the scene extent
    lr_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_track: float = 1e-4  # multiplied by the scene extent
    extent: float = 1.0
    batch_size: int = 1
    ablation: str = "full"
    seed: int = 0
    divergence_factor: float = 10.0
    cheirality_penalty_px: float = 100.0
    render_size: tuple = (128, 128)
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-15

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        rates = [self.lr_pose, self.lr_means, self.lr_scales, self.lr_quats, self.lr_opacity, self.lr_sh, self.lr_track]
        if min(rates) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("bad batch size or iteration count")


@dataclass
class JointState:
    gaussians: GaussianSet
    base_poses: list[Pose]
    pose_adjustments: np.ndarray  # (n_cam, 6) twists
    track_points: np.ndarray  # (n_tracks, 3)
    tracks: list[Track]  # observations reference camera positions 0..n_cam-1
    intrinsics: list[CameraIntrinsics]
    track_gaussian: np.ndarray  # (n_tracks,) Gaussian born from the same SfM point, -1 if none
    anchor: int = 0
    iteration: int = 0

    def __post_init__(self):
        n = len(self.base_poses)
        self.pose_adjustments = np.asarray(self.pose_adjustments, dtype=float).reshape(n, 6)
        self.track_points = np.asarray(self.track_points, dtype=float).reshape(-1, 3)
        self.track_gaussian = np.asarray(self.track_gaussian, dtype=np.int64).reshape(-1)
        if len(self.intrinsics) != n:
            raise ValueError("one intrinsics record per camera expected")
        if len(self.track_points) != len(self.tracks) or len(self.track_gaussian) != len(self.tracks):
            raise ValueError("track points must be indexed 1:1 with tracks")

    @classmethod
    def initialize(cls, gaussians, poses, tracks, intrinsics, track_gaussian=None, anchor=0) -> "JointState":
        pts = np.array([t.point for t in tracks], dtype=float).reshape(-1, 3)
        tg = np.arange(len(tracks)) if track_gaussian is None else track_gaussian
        return cls(gaussians.copy(), list(poses), np.zeros((len(poses), 6)), pts, [t.copy() for t in tracks],
                   list(intrinsics), tg, anchor)

    @property
    def n_cameras(self) -> int:
        return len(self.base_poses)

    def pose(self, i) -> Pose:
        return se3_compose(self.base_poses[i], self.pose_adjustments[i])

    def poses(self) -> list[Pose]:
        return [self.pose(i) for i in range(self.n_cameras)]

    def copy(self) -> "JointState":
        return JointState(
            self.gaussians.copy(), list(self.base_poses), self.pose_adjustments.copy(), self.track_points.copy(),
            [t.copy() for t in self.tracks], list(self.intrinsics), self.track_gaussian.copy(), self.anchor,
            self.iteration,
        )


# ---------------------------------------------------------------------------
# reprojection term


class _TrackIndex:
    """Flat observation arrays and, per camera, the observations of the tracks it sees."""

    def __init__(self, state: JointState):
        cam, trk, uv = [], [], []
        for k, t in enumerate(state.tracks):
            for o in t.observations:
                cam.append(o.image)
                trk.append(k)
                uv.append(o.uv)
        self.cam = np.array(cam, dtype=np.int64)
        self.trk = np.array(trk, dtype=np.int64)
        self.uv = np.array(uv, dtype=float).reshape(-1, 2)
        self.by_camera = []
        for i in range(state.n_cameras):
            seen = np.zeros(len(state.tracks), dtype=bool)
            seen[self.trk[self.cam == i]] = True
            self.by_camera.append(np.nonzero(seen[self.trk])[0])

    def batch(self, cameras) -> np.ndarray:
        if len(cameras) == 1:
            return self.by_camera[cameras[0]]
        return np.unique(np.concatenate([self.by_camera[c] for c in cameras]))


@dataclass
class BALossResult:
    loss: float
    grad_points: np.ndarray  # (n_tracks, 3)
    grad_twists: np.ndarray  # (n_cam, 6)
    n_observations: int


def _ba_terms(state: JointState, points, obs, index: _TrackIndex, delta: float, penalty_px: float) -> BALossResult:
    kernel = RobustKernel("huber", delta)
    n_cam = state.n_cameras
    g_pts = np.zeros_like(points)
    g_tw = np.zeros((n_cam, 6))
    if len(obs) == 0:
        return BALossResult(0.0, g_pts, g_tw, 0)
    cam, trk, uv = index.cam[obs], index.trk[obs], index.uv[obs]
    poses = state.poses()
    R = np.array([p.R for p in poses])
    t = np.array([p.t for p in poses])
    fx = np.array([K.fx for K in state.intrinsics])
    fy = np.array([K.fy for K in state.intrinsics])
    cx = np.array([K.cx for K in state.intrinsics])
    cy = np.array([K.cy for K in state.intrinsics])
    p = transform_points(R[cam], t[cam], points[trk])
    z = p[:, 2]
    ok = z > DEPTH_EPSILON
    zs = np.where(ok, z, 1.0)
    r = np.stack([fx[cam] * p[:, 0] / zs + cx[cam], fy[cam] * p[:, 1] / zs + cy[cam]], axis=1) - uv
    s = np.sum(r * r, axis=1)
    val, w = robust_loss(kernel, s)
    cap, _ = robust_loss(kernel, penalty_px**2)
    val = np.where(ok, val, cap)
    loss = float(np.sum(val))

    # d rho / d r = 2 w r ; zero for cheirality failures
    gr = np.where(ok[:, None], 2.0 * w[:, None] * r, 0.0)
    gp = np.empty((len(obs), 3))
    gp[:, 0] = gr[:, 0] * fx[cam] / zs
    gp[:, 1] = gr[:, 1] * fy[cam] / zs
    gp[:, 2] = -(gr[:, 0] * fx[cam] * p[:, 0] + gr[:, 1] * fy[cam] * p[:, 1]) / zs**2
    np.add.at(g_pts, trk, np.einsum("nji,nj->ni", R[cam], gp))
    # left perturbation: dp/domega = -[p]x, dp/drho = I
    g_xi = np.concatenate([np.cross(p, gp), gp], axis=1)
    np.add.at(g_tw, cam, g_xi)
    for i in np.unique(cam):
        if np.any(state.pose_adjustments[i]):
            g_tw[i] = se3_left_jacobian(state.pose_adjustments[i]).T @ g_tw[i]
    return BALossResult(loss, g_pts, g_tw, len(obs))


def _points_for(state: JointState, ablation: str) -> np.ndarray:
    if ablation != "merged_tracks":
        return state.track_points
    pts = state.track_points.copy()
    m = state.track_gaussian >= 0
    pts[m] = state.gaussians.means[state.track_gaussian[m]]
    return pts


def joint_ba_loss(state: JointState, batch_cameras=None, config: JointConfig = JointConfig(), _index=None) -> BALossResult:
    """Huber reprojection loss over every observation of the tracks seen by ``batch_cameras``.

    ``batch_cameras=None`` uses all cameras. Gradients are w.r.t. the track points
    and the pose twists (before any masking of frozen cameras).
    """
    index = _index or _TrackIndex(state)
    cams = list(range(state.n_cameras)) if batch_cameras is None else list(batch_cameras)
    obs = index.batch(cams) if cams else np.zeros(0, dtype=np.int64)
    pts = _points_for(state, config.ablation)
    return _ba_terms(state, pts, obs, index, config.huber_delta, config.cheirality_penalty_px)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps=1e-15):
        self.b1, self.b2 = betas
        self.eps = eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, name, param, grad, lr):
        """In-place Adam update of ``param``; zero gradients leave untouched entries unchanged."""
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        k = self.t[name]
        m, v = self.m[name], self.v[name]
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        v += (1 - self.b2) * grad * grad
        mhat = m / (1 - self.b1**k)
        vhat = v / (1 - self.b2**k)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"m": self.m, "v": self.v, "t": self.t}


# ---------------------------------------------------------------------------
# one iteration


@dataclass
class StepGradients:
    photo_loss: float
    ba_loss: float
    total: float
    gaussians: dict
    twists: np.ndarray
    track_points: np.ndarray
    photo_twists: np.ndarray
    ba_twists: np.ndarray


def _render_K(state: JointState, i, config: JointConfig):
    K = state.intrinsics[i]
    w, h = config.render_size
    return K if K.size == (w, h) else K.resized(w, h)


def joint_gradients(state: JointState, images, batch, config: JointConfig = JointConfig(), _index=None,
                    render_cfg: RenderConfig = RenderConfig()) -> StepGradients:
    """Loss parts and the combined gradient of every parameter block for one batch."""
    n_cam = state.n_cameras
    lam = 0.0 if config.ablation == "photometric_only" else config.lambda_ba
    g = state.gaussians
    gsum = {k: np.zeros_like(v) for k, v in g.params().items()}
    photo_tw = np.zeros((n_cam, 6))
    photo = 0.0
    for i in batch:
        rg = render_with_gradients(
            g, _render_K(state, i, config), state.base_poses[i], images[i], config.lambda_ssim,
            twist=state.pose_adjustments[i], cfg=render_cfg,
        )
        photo += rg.loss / len(batch)
        for k, v in rg.gaussians.as_dict().items():
            gsum[k] += v / len(batch)
        photo_tw[i] += rg.pose / len(batch)

    ba = joint_ba_loss(state, batch, config, _index)
    twists = photo_tw + lam * ba.grad_twists
    g_points = lam * ba.grad_points
    if config.ablation == "merged_tracks":
        m = state.track_gaussian >= 0
        np.add.at(gsum["means"], state.track_gaussian[m], g_points[m])
        g_points = np.where(m[:, None], 0.0, g_points)
    twists[state.anchor] = 0.0
    if config.ablation == "frozen_poses":
        twists[:] = 0.0
    return StepGradients(photo, ba.loss, photo + lam * ba.loss, gsum, twists, g_points, photo_tw, ba.grad_twists)


@dataclass
class TraceRow:
    iteration: int
    photo: float
    ba: float
    total: float


@dataclass
class JointResult:
    state: JointState
    trace: list[TraceRow] = field(default_factory=list)


def _batches(rng, cameras, batch_size):
    while True:
        perm = rng.permutation(cameras)
        for k in range(0, len(perm) - batch_size + 1, batch_size):
            yield [int(c) for c in perm[k : k + batch_size]]


def joint_optimize(
    state: JointState,
    images,
    config: JointConfig = JointConfig(),
    train_cameras=None,
    callback=None,
    checkpoint_every: int = 0,
    checkpoint_path=None,
    render_cfg: RenderConfig = RenderConfig(),
) -> JointResult:
    """Run ``config.iterations`` steps and return the final state and the loss trace.

    ``images[i]`` is the reference image of camera ``i`` at ``config.render_size``;
    only ``train_cameras`` (default: all) are sampled as batches. ``callback(it, state)``
    is called after every update.
    """
    st = state.copy()
    index = _TrackIndex(st)
    cams = list(range(st.n_cameras)) if train_cameras is None else sorted(train_cameras)
    rng = np.random.default_rng(config.seed)
    batches = _batches(rng, np.array(cams), min(config.batch_size, len(cams)))
    opt = Adam(config.adam_betas, config.adam_eps)
    lrs = {
        "means": config.lr_means * config.extent,
        "log_scales": config.lr_scales,
        "quats": config.lr_quats,
        "opacity_logits": config.lr_opacity,
        "sh": config.lr_sh,
    }
    trace = []
    initial = None
    for it in range(config.iterations):
        batch = next(batches)
        gr = joint_gradients(st, images, batch, config, index, render_cfg)
        if initial is None:
            initial = max(gr.total, 1e-300)
        elif gr.total > config.divergence_factor * initial or not np.isfinite(gr.total):
            raise Divergence(f"iteration {it}: loss {gr.total:.4g} exceeds {config.divergence_factor}x initial {initial:.4g}")
        trace.append(TraceRow(st.iteration, gr.photo_loss, gr.ba_loss, gr.total))
        params = st.gaussians.params()
        for k, lr in lrs.items():
            opt.step(k, params[k], gr.gaussians[k], lr)
        if config.ablation != "frozen_poses":
            opt.step("twists", st.pose_adjustments, gr.twists, config.lr_pose)
        if config.ablation == "merged_tracks":
            m = st.track_gaussian >= 0
            st.track_points[m] = st.gaussians.means[st.track_gaussian[m]]
            free = ~m
            if free.any():
                opt.step("tracks", st.track_points, np.where(free[:, None], gr.track_points, 0.0), config.lr_track * config.extent)
        elif config.ablation != "photometric_only":
            opt.step("tracks", st.track_points, gr.track_points, config.lr_track * config.extent)
        st.iteration += 1
        if callback is not None:
            callback(st.iteration, st)
        if checkpoint_every and checkpoint_path and st.iteration % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, st)
    return JointResult(st, trace)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRecord:
    psnr_db: list[float]
    ssim: list[float]
    mean_psnr_db: float
    mean_ssim: float
    rotation_error_deg_mean: float | None = None
    rotation_error_deg_median: float | None = None
    ate: float | None = None


def evaluate_state(state: JointState, images, cameras=None, gt_poses=None, render_size=None,
                   render_cfg: RenderConfig = RenderConfig()) -> EvalRecord:
    """Image metrics on ``cameras`` (default: all) and pose errors against ``gt_poses`` when given."""
    cams = list(range(state.n_cameras)) if cameras is None else list(cameras)
    ps, ss = [], []
    for i in cams:
        target = np.asarray(images[i], dtype=float)
        h, w = target.shape[:2]
        size = render_size or (w, h)
        K = state.intrinsics[i]
        K = K if K.size == tuple(size) else K.resized(*size)
        img = np.clip(render(state.gaussians, K, state.pose(i), cfg=render_cfg).rgb, 0.0, 1.0)
        ps.append(psnr(img, target))
        ss.append(float(ssim(img, target)))
    rec = EvalRecord(ps, ss, float(np.mean(ps)) if ps else float("nan"), float(np.mean(ss)) if ss else float("nan"))
    if gt_poses is not None:
        est = state.poses()
        re = rotation_error(est, gt_poses)
        rec.rotation_error_deg_mean = re.mean
        rec.rotation_error_deg_median = re.median
        rec.ate = ate(est, gt_poses) if len(est) >= 3 else None
    return rec


# ---------------------------------------------------------------------------
# files


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "L_photo", "L_BA", "total"])
        for r in trace:
            w.writerow([r.iteration, repr(float(r.photo)), repr(float(r.ba)), repr(float(r.total))])


def read_trace_csv(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TraceRow(int(r["iteration"]), float(r["L_photo"]), float(r["L_BA"]), float(r["total"])) for r in rows]


def save_checkpoint(path, state: JointState) -> None:
    """``.npz`` archive: one array per parameter block plus flattened track observations."""
    obs = [(k, o.image, o.uv[0], o.uv[1], o.keypoint) for k, t in enumerate(state.tracks) for o in t.observations]
    obs = np.array(obs, dtype=float).reshape(-1, 5)
    g = state.gaussians
    np.savez(
        path,
        means=g.means, log_scales=g.log_scales, quats=g.quats, opacity_logits=g.opacity_logits, sh=g.sh,
        base_R=np.array([p.R for p in state.base_poses]).reshape(-1, 3, 3),
        base_t=np.array([p.t for p in state.base_poses]).reshape(-1, 3),
        pose_adjustments=state.pose_adjustments,
        track_points=state.track_points,
        track_ids=np.array([t.id for t in state.tracks], dtype=np.int64),
        track_gaussian=state.track_gaussian,
        observations=obs,
        intrinsics=np.array([[K.fx, K.fy, K.cx, K.cy, K.width, K.height] for K in state.intrinsics]).reshape(-1, 6),
        anchor=np.array(state.anchor),
        iteration=np.array(state.iteration),
    )


def load_checkpoint(path) -> JointState:
    z = np.load(path)
    g = GaussianSet(z["means"], z["log_scales"], z["quats"], z["opacity_logits"], z["sh"])
    poses = [Pose(R, t) for R, t in zip(z["base_R"], z["base_t"])]
    intr = [CameraIntrinsics(a, b, c, d, int(w), int(h)) for a, b, c, d, w, h in z["intrinsics"]]
    ids = z["track_ids"]
    obs = [[] for _ in ids]
    for k, img, u, v, kp in z["observations"]:
        obs[int(k)].append(Observation(int(img), [u, v], int(kp)))
    pts = z["track_points"]
    tracks = [Track(int(i), o, pts[k].copy()) for k, (i, o) in enumerate(zip(ids, obs))]
    return JointState(g, poses, z["pose_adjustments"], pts, tracks, intr, z["track_gaussian"], int(z["anchor"]),
                      int(z["iteration"]))
