"""Reusable synthetic experiments (used by ``scripts/`` and the acceptance tests).

Each function builds its inputs from a seed, runs one or more optimizations and
returns a small dataclass of numbers; nothing is written to disk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .ba import Reconstruction
from .jointopt import DESK_POSE_LR, JointConfig, JointState, evaluate_state, joint_optimize
from .metrics import ate, rotation_error
from .pipeline import (
    SceneConfig,
    SfmConfig,
    assign_track_colors,
    joint_state_from_reconstruction,
    point_extent,
    run_sfm,
)
from .splatrender import init_gaussians_from_points
from .synthscene import (
    SPURIOUS_KEYPOINT_BASE,
    NoiseSpec,
    appearance_gaussians,
    corrupt_observations,
    generate_scene,
    perturb_poses,
    render_reference_images,
)


@dataclass
class PoseErrors:
    rotation_deg: float
    ate: float  # scene-extent units

    @classmethod
    def of(cls, poses, gt, extent=1.0) -> "PoseErrors":
        return cls(rotation_error(poses, gt).mean, ate(poses, gt) / extent)


@dataclass
class SfmRun:
    seconds: float
    errors: PoseErrors
    rms_px: float
    registered: int
    outliers_left: int
    reconstruction: Reconstruction


def sfm_accuracy(seed=42, n_cameras=20, n_points=1000, pixel_sigma=0.5, outlier_fraction=0.1,
                 scene: SceneConfig = SceneConfig(), sfm: SfmConfig = SfmConfig()) -> SfmRun:
    """Synthetic scene through global SfM; errors against ground truth."""
    t0 = time.perf_counter()
    s = generate_scene(n_cameras, n_points, scene.layout, seed, tuple(scene.image_size), scene.camera_distance)
    pairs = corrupt_observations(s, NoiseSpec(pixel_sigma, outlier_fraction, seed=seed))
    res = run_sfm(pairs, dict(enumerate(s.intrinsics)), sfm, seed)
    dt = time.perf_counter() - t0
    rec = res.reconstruction
    cams = rec.cameras
    err = PoseErrors.of([rec.poses[c] for c in cams], [s.cameras[c][1] for c in cams], s.extent)
    left = sum(o.keypoint >= SPURIOUS_KEYPOINT_BASE for t in rec.tracks for o in t.observations)
    return SfmRun(dt, err, rec.rms(), len(cams), int(left), rec)


@dataclass
class PoseRecoveryRun:
    initial: PoseErrors
    final: PoseErrors
    iterations: int
    seconds: float
    trace: list


def _perturbed_state(s, gaussians, seed, rot_deg, trans_frac):
    pert = perturb_poses(s, NoiseSpec(pose_rotation_perturb=rot_deg, pose_translation_perturb=trans_frac, seed=seed))
    return JointState.initialize(gaussians, pert, s.tracks, s.intrinsics)


def pose_recovery(seed=42, n_cameras=10, n_points=1000, iterations=3000, ablation="full", render_size=(128, 128),
                  rot_deg=1.0, trans_frac=0.01, lr_pose=DESK_POSE_LR, callback=None) -> PoseRecoveryRun:
    """Perturb ground-truth poses and optimize with ground-truth Gaussians and tracks."""
    s = generate_scene(n_cameras, n_points, "orbit", seed)
    g = appearance_gaussians(s)
    images = render_reference_images(s, g, render_size)
    st = _perturbed_state(s, g, seed, rot_deg, trans_frac)
    gt = s.poses
    cfg = JointConfig(iterations=iterations, ablation=ablation, lr_pose=lr_pose, render_size=tuple(render_size),
                      seed=seed, extent=s.extent)
    t0 = time.perf_counter()
    res = joint_optimize(st, images, cfg, callback=callback)
    dt = time.perf_counter() - t0
    return PoseRecoveryRun(PoseErrors.of(st.poses(), gt, s.extent), PoseErrors.of(res.state.poses(), gt, s.extent),
                           iterations, dt, res.trace)


@dataclass
class AnchoringRun:
    full: PoseErrors
    photometric_only: PoseErrors
    initial: PoseErrors


def anchoring_ablation(seed, n_cameras=10, n_points=500, iterations=1000, render_size=(64, 64),
                       rot_deg=1.0, trans_frac=0.01) -> AnchoringRun:
    """Early-phase comparison: Gaussians freshly initialized from the sparse points (not yet fitted).

    Both modes start from the same perturbed poses and the same Gaussians and
    differ only in whether the reprojection term is active.
    """
    s = generate_scene(n_cameras, n_points, "orbit", seed)
    images = render_reference_images(s, appearance_gaussians(s), render_size)
    g0 = init_gaussians_from_points(s.points, s.colors)
    out = {}
    for mode in ("full", "photometric_only"):
        st = _perturbed_state(s, g0, seed, rot_deg, trans_frac)
        cfg = JointConfig(iterations=iterations, ablation=mode, lr_pose=DESK_POSE_LR, render_size=tuple(render_size),
                          seed=seed, extent=s.extent)
        res = joint_optimize(st, images, cfg)
        out[mode] = PoseErrors.of(res.state.poses(), s.poses, s.extent)
    init = PoseErrors.of(_perturbed_state(s, g0, seed, rot_deg, trans_frac).poses(), s.poses, s.extent)
    return AnchoringRun(out["full"], out["photometric_only"], init)


@dataclass
class SeparationRun:
    full_psnr: float
    merged_psnr: float
    full_errors: PoseErrors
    merged_errors: PoseErrors


def track_separation_ablation(seed, iterations=1000, render_size=(64, 64), holdout_every=8,
                              scene: SceneConfig = SceneConfig(), sfm: SfmConfig = SfmConfig()) -> SeparationRun:
    """Standard synthetic config through SfM, then joint optimization with separate vs merged tracks.

    Held-out cameras (every ``holdout_every``-th) are not rendered during
    training; PSNR is their mean after optimization.
    """
    s = generate_scene(scene.n_cameras, scene.n_points, scene.layout, seed, tuple(scene.image_size), scene.camera_distance)
    pairs = corrupt_observations(s, NoiseSpec(scene.pixel_sigma, scene.outlier_fraction, seed=seed))
    recon = run_sfm(pairs, dict(enumerate(s.intrinsics)), sfm, seed).reconstruction
    images_all = render_reference_images(s, appearance_gaussians(s), render_size)
    cams = recon.cameras
    images = [images_all[c] for c in cams]
    assign_track_colors(recon, dict(zip(cams, images)), tuple(render_size))
    st, cams = joint_state_from_reconstruction(recon)
    train = [k for k, c in enumerate(cams) if c % holdout_every != 0]
    held = [k for k, c in enumerate(cams) if c % holdout_every == 0]
    gt = [s.cameras[c][1] for c in cams]
    res = {}
    for mode in ("full", "merged_tracks"):
        cfg = JointConfig(iterations=iterations, ablation=mode, lr_pose=DESK_POSE_LR, render_size=tuple(render_size),
                          seed=seed, extent=point_extent(st.track_points))
        r = joint_optimize(st, images, cfg, train_cameras=train)
        ev = evaluate_state(r.state, images, held, gt)
        res[mode] = (ev.mean_psnr_db, PoseErrors(ev.rotation_error_deg_mean, ev.ate / s.extent))
    return SeparationRun(res["full"][0], res["merged_tracks"][0], res["full"][1], res["merged_tracks"][1])


def summarize(values) -> str:
    v = np.asarray(values, dtype=float)
    return f"mean {v.mean():.4g}  min {v.min():.4g}  max {v.max():.4g}"
