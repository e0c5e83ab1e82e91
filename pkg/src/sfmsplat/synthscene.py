"""Synthetic scenes with known ground truth.

Stands in for feature extraction and matching: cameras, coloured 3D points,
exact tracks, corrupted pairwise matches with labelled outliers, perturbed
poses, and reference images rendered from a ground-truth Gaussian set.

Randomness comes from per-entity streams (:func:`stream`), so e.g. the pixel
noise of camera 3 does not depend on how many cameras the scene has.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleLayout
from .geomcore import CameraIntrinsics, Pose, project_points, so3_exp
from .splatrender import GaussianSet, RenderConfig, init_gaussians_from_points, render, rgb_to_sh0
from .tracks import Observation, Track
from .viewgraph import PairMatches

LAYOUTS = ("orbit", "forward", "random")

# keypoint ids at or above this offset mark spurious (outlier) keypoints
SPURIOUS_KEYPOINT_BASE = 10_000_000


def stream(seed: int, kind: str, index: int = 0) -> np.random.Generator:
    """Independent PCG64 stream keyed by ``(seed, kind, index)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(kind.encode()), int(index)])
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Scene:
    cameras: list[tuple[CameraIntrinsics, Pose]]
    points: np.ndarray  # (n, 3)
    colors: np.ndarray  # (n, 3) in [0, 1]
    tracks: list[Track]
    seed: int
    extent: float = 1.0
    layout: str = "orbit"

    @property
    def n_cameras(self) -> int:
        return len(self.cameras)

    @property
    def poses(self) -> list[Pose]:
        return [T for _, T in self.cameras]

    @property
    def intrinsics(self) -> list[CameraIntrinsics]:
        return [K for K, _ in self.cameras]


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    outlier_fraction: float = 0.0
    pose_rotation_perturb: float = 0.0  # degrees
    pose_translation_perturb: float = 0.0  # fraction of scene extent
    seed: int = 0

    def __post_init__(self):
        for name in ("pixel_sigma", "outlier_fraction", "pose_rotation_perturb", "pose_translation_perturb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.outlier_fraction >= 0.5:
            raise ValueError("outlier_fraction must be < 0.5")


def _look_at(center, target, up) -> Pose:
    z = target - center
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Pose(R, -R @ center)


def _camera_centers(layout, n, rng, distance):
    if layout == "orbit":
        # small rigs stay on one side of the cloud so neighbours share points
        step = min(2 * np.pi / n, np.pi / 4)
        ang = step * np.arange(n) + rng.uniform(-0.1, 0.1, n)
        elev = 0.35 * np.sin(3 * ang + rng.uniform(0, 2 * np.pi))
        return np.stack([np.cos(ang) * np.cos(elev), np.sin(elev), np.sin(ang) * np.cos(elev)], axis=1) * distance
    if layout == "forward":
        xs = np.linspace(-1.2, 1.2, n) + rng.uniform(-0.05, 0.05, n)
        ys = 0.3 * np.sin(np.arange(n)) + rng.uniform(-0.05, 0.05, n)
        return np.stack([xs, ys, np.full(n, -distance)], axis=1)
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True) * distance


def _sample_points(layout, n, rng):
    if layout == "forward":
        p = rng.uniform(-1, 1, size=(n, 3)) * [1.0, 0.7, 0.4]
    else:
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        p = v * rng.uniform(0.2, 1.0, size=(n, 1)) ** (1 / 3)
    return p


def _visibility(points, normals, cameras, margin, max_view_angle):
    vis = np.zeros((len(cameras), len(points)), dtype=bool)
    uvs = np.zeros((len(cameras), len(points), 2))
    cos_max = np.cos(np.radians(max_view_angle))
    for i, (K, T) in enumerate(cameras):
        uv, z = project_points(K, T, points)
        to_cam = T.center - points
        facing = np.sum(normals * to_cam, axis=1) / np.linalg.norm(to_cam, axis=1) > cos_max
        inside = (
            (uv[:, 0] >= margin)
            & (uv[:, 0] <= K.width - 1 - margin)
            & (uv[:, 1] >= margin)
            & (uv[:, 1] <= K.height - 1 - margin)
        )
        vis[i] = (z > 0.1) & facing & np.nan_to_num(inside, nan=False)
        uvs[i] = uv
    return vis, uvs


def generate_scene(
    n_cameras: int,
    n_points: int,
    layout: str = "orbit",
    seed: int = 0,
    image_size: tuple[int, int] = (512, 512),
    camera_distance: float = 3.0,
    max_view_angle: float = 80.0,
    margin: float = 2.0,
    max_retries: int = 20,
) -> Scene:
    """Cameras looking at a unit-radius point cloud; every point seen by >= 2 cameras.

    Points carry an outward normal and are visible only within ``max_view_angle``
    of it, which keeps tracks from spanning every camera.
    """
    if n_cameras < 2 or n_points < 8:
        raise ValueError("need at least 2 cameras and 8 points")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    w, h = image_size
    crng = stream(seed, "cameras")
    centers = _camera_centers(layout, n_cameras, crng, camera_distance)
    half_fov = np.arcsin(1.0 / camera_distance) * 1.15
    f = 0.5 * min(w, h) / np.tan(half_fov)
    cameras = []
    for i, c in enumerate(centers):
        target = np.array([0.0, 0.0, 0.0]) + crng.normal(scale=0.05, size=3)
        up = np.array([0.0, 1.0, 0.0]) + crng.normal(scale=0.1, size=3)
        if layout == "forward":
            target = c + np.array([0.0, 0.0, camera_distance]) + crng.normal(scale=0.2, size=3)
        cameras.append((CameraIntrinsics.simple(f, w, h), _look_at(c, target, up)))

    prng = stream(seed, "points")
    points = np.zeros((0, 3))
    kept_vis = np.zeros((n_cameras, 0), dtype=bool)
    kept_uv = np.zeros((n_cameras, 0, 2))
    for _ in range(max_retries):
        need = n_points - len(points)
        cand = _sample_points(layout, 2 * need + 8, prng)
        if layout == "forward":
            normals = np.tile([0.0, 0.0, -1.0], (len(cand), 1))
        else:
            normals = cand / np.linalg.norm(cand, axis=1, keepdims=True)
        vis, uv = _visibility(cand, normals, cameras, margin, max_view_angle)
        good = np.nonzero(vis.sum(axis=0) >= 2)[0][:need]
        points = np.vstack([points, cand[good]])
        kept_vis = np.hstack([kept_vis, vis[:, good]])
        kept_uv = np.concatenate([kept_uv, uv[:, good]], axis=1)
        if len(points) == n_points:
            break
    else:
        raise InfeasibleLayout(f"only {len(points)} of {n_points} points visible in >= 2 views")

    colors = stream(seed, "colors").uniform(0.05, 0.95, size=(n_points, 3))
    tracks = []
    for k in range(n_points):
        obs = [Observation(i, kept_uv[i, k], k) for i in np.nonzero(kept_vis[:, k])[0]]
        tracks.append(Track(k, obs, points[k].copy(), colors[k].copy()))
    return Scene(cameras, points, colors, tracks, seed, 1.0, layout)


def observation_table(scene: Scene) -> dict[tuple[int, int], np.ndarray]:
    """``(image, point) -> pixel`` for every ground-truth observation."""
    return {(o.image, t.id): o.uv for t in scene.tracks for o in t.observations}


def corrupt_observations(scene: Scene, spec: NoiseSpec) -> dict[tuple[int, int], PairMatches]:
    """Noisy pairwise matches for every co-visible image pair.

    Each observation is perturbed once (so all matches sharing it agree), then
    ``round(outlier_fraction * total)`` correspondences, drawn over all pairs, get
    their second pixel replaced by a uniform random pixel carried by a fresh
    spurious keypoint. ``PairMatches.is_outlier`` labels them.
    """
    n_cam = scene.n_cameras
    noisy = {}
    for i in range(n_cam):
        noise = stream(spec.seed, "pixel_noise", i).normal(scale=1.0, size=(len(scene.points), 2))
        K = scene.cameras[i][0]
        for t in scene.tracks:
            for o in t.observations:
                if o.image == i:
                    uv = o.uv + spec.pixel_sigma * noise[t.id]
                    noisy[(i, t.id)] = np.clip(uv, 0.0, [K.width - 1, K.height - 1])

    per_image = [[] for _ in range(n_cam)]
    for t in scene.tracks:
        for o in t.observations:
            per_image[o.image].append(t.id)
    per_image = [set(v) for v in per_image]

    pairs = {}
    for a in range(n_cam):
        for b in range(a + 1, n_cam):
            common = sorted(per_image[a] & per_image[b])
            if not common:
                continue
            kp = np.array(common, dtype=np.int64)
            pa = np.array([noisy[(a, k)] for k in common])
            pb = np.array([noisy[(b, k)] for k in common])
            pairs[(a, b)] = PairMatches(a, b, pa, pb, kp, kp.copy(), np.zeros(len(kp), dtype=bool))

    total = sum(len(m) for m in pairs.values())
    n_out = int(round(spec.outlier_fraction * total))
    if n_out:
        orng = stream(spec.seed, "outliers")
        chosen = np.sort(orng.choice(total, size=n_out, replace=False))
        offsets = np.cumsum([0] + [len(m) for m in pairs.values()])
        for pi, (key, m) in enumerate(pairs.items()):
            lo, hi = offsets[pi], offsets[pi + 1]
            sel = chosen[(chosen >= lo) & (chosen < hi)] - lo
            if len(sel) == 0:
                continue
            K = scene.cameras[m.image_b][0]
            m.pts_b[sel] = orng.uniform([0, 0], [K.width - 1, K.height - 1], size=(len(sel), 2))
            m.kp_b[sel] = SPURIOUS_KEYPOINT_BASE + lo + sel
            m.is_outlier[sel] = True
    return pairs


def perturb_poses(scene: Scene, spec: NoiseSpec) -> list[Pose]:
    """Rotate each camera by exactly ``pose_rotation_perturb`` degrees about a random
    axis and move its center by exactly ``pose_translation_perturb * extent``.
    Camera 0 is the gauge anchor and stays exact."""
    out = [scene.cameras[0][1]]
    angle = np.radians(spec.pose_rotation_perturb)
    shift = spec.pose_translation_perturb * scene.extent
    for i in range(1, scene.n_cameras):
        T = scene.cameras[i][1]
        if angle == 0 and shift == 0:
            out.append(T)
            continue
        rng = stream(spec.seed, "pose_perturb", i)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        R = so3_exp(angle * axis) @ T.R
        c = T.center + shift * d
        out.append(Pose(R, -R @ c))
    return out


def appearance_gaussians(scene: Scene, seed: int | None = None, jitter: float = 0.03, opacity: float = 0.85) -> GaussianSet:
    """Ground-truth appearance model used to render reference images.

    One anisotropic, fairly opaque primitive per scene point, displaced by a small
    random offset so that feature points and appearance are not identical.
    """
    seed = scene.seed if seed is None else seed
    rng = stream(seed, "appearance")
    g = init_gaussians_from_points(scene.points, scene.colors, opacity=opacity)
    n = len(g)
    g.means = g.means + rng.normal(scale=jitter * scene.extent, size=(n, 3))
    g.log_scales = g.log_scales + np.log(0.6) + rng.normal(scale=0.25, size=(n, 3))
    g.quats = rng.normal(size=(n, 4))
    g.sh[:, 0, :] = rgb_to_sh0(scene.colors)
    return g


def render_reference_images(scene: Scene, gaussians: GaussianSet, size=None, cfg: RenderConfig = RenderConfig()):
    """One image per camera, rendered with the ground-truth pose."""
    images = []
    for K, T in scene.cameras:
        if size is not None and tuple(size) != K.size:
            K = K.resized(*size)
        images.append(np.clip(render(gaussians, K, T, cfg=cfg).rgb, 0.0, 1.0))
    return images
