"""End-to-end orchestration: ingest or synthesize, global SfM, joint optimization, evaluation, export.

Every stage reads its inputs from and writes its outputs to a single run
directory, so ``--stage sfm`` followed by ``--stage joint`` performs exactly the
same computation as ``--stage full``::

    out/
      config.json         resolved configuration
      scene.json          ground truth (synthetic input only)
      matches.txt         correspondences (copied in for match-file input)
      images/0000.png     reference images at the render resolution
      sfm.json            SfM reconstruction checkpoint
      joint.npz           joint-optimization checkpoint
      loss_trace.csv      iteration, L_photo, L_BA, total
      sparse/             COLMAP text export of the final reconstruction
      metrics.json        evaluation record (deterministic given the seed)
      timings.json        wall-clock seconds per stage (not deterministic)
"""

from __future__ import annotations

import dataclasses
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .ba import BAOptions, Reconstruction, iterate_ba_with_filtering
from .errors import SfmSplatError, StageError
from .geomcore import CameraIntrinsics, Pose
from .globalpos import DirectionEdge, PositioningProblem, solve_positions
from .jointopt import (
    DESK_POSE_LR,
    JointConfig,
    JointState,
    evaluate_state,
    joint_optimize,
    load_checkpoint,
    save_checkpoint,
    write_trace_csv,
)
from .metrics import ate, rotation_error
from .rotavg import RotationAveragingProblem, solve_rotations
from .splatrender import init_gaussians_from_points
from .synthscene import (
    NoiseSpec,
    appearance_gaussians,
    corrupt_observations,
    generate_scene,
    render_reference_images,
)
from .tracks import Observation, Track, build_tracks
from .viewgraph import (
    FocalEdge,
    TwoViewOptions,
    build_view_graph,
    estimate_focal_fetzer,
    estimate_fundamental_ransac,
    estimate_two_view_geometry,
    group_matches,
    inlier_matches,
    read_matches,
    write_matches,
)

log = logging.getLogger(__name__)

STAGES = ("full", "sfm", "joint")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SceneConfig:
    n_cameras: int = 20
    n_points: int = 1000
    layout: str = "orbit"
    image_size: tuple = (512, 512)  # feature/sensor resolution
    render_size: tuple = (128, 128)  # photometric resolution
    camera_distance: float = 3.0
    pixel_sigma: float = 0.5
    outlier_fraction: float = 0.1


@dataclass
class SfmConfig:
    min_matches_per_pair: int = 16
    ransac_threshold_px: float = 2.0
    ransac_iters: int = 1000
    min_parallax_deg: float = 1.0
    rotation_sigma_deg: float = 5.0
    rotation_final_sigma_deg: float = 1.0
    min_track_length: int = 3
    huber_delta: float = 2.0
    filter_thresholds: tuple = (8.0, 4.0, 2.0)
    estimate_focal: bool = False  # match-file input without focal lengths
    shared_intrinsics: bool = True


@dataclass
class PipelineConfig:
    stage: str = "full"
    seed: int = 42
    out: str = "run"
    match_dir: str | None = None  # directory with matches.txt and cameras.json; None = synthetic
    image_format: str = "png"
    holdout_every: int = 8
    gaussian_opacity: float = 0.1
    checkpoint_every: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    sfm: SfmConfig = field(default_factory=SfmConfig)
    joint: JointConfig = field(default_factory=lambda: JointConfig(lr_pose=DESK_POSE_LR))

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.image_format not in ("png", "ppm"):
            raise ValueError("image_format must be png or ppm")
        if self.match_dir is not None:
            d = Path(self.match_dir)
            for name in ("matches.txt", "cameras.json"):
                if not (d / name).exists():
                    raise FileNotFoundError(d / name)

    def validate(self) -> None:
        """Check invariants after overrides have been applied."""
        self.__post_init__()
        JointConfig(**asdict(self.joint))


def _build(cls, data):
    """Instantiate a (possibly nested) dataclass from a plain dict, rejecting unknown keys."""
    if data is None:
        return cls()
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        default = names[k].default_factory() if names[k].default_factory is not dataclasses.MISSING else names[k].default
        if dataclasses.is_dataclass(default):
            kw[k] = _build(type(default), v)
        elif isinstance(default, tuple) and isinstance(v, list):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


def config_from_dict(d: dict) -> PipelineConfig:
    return _build(PipelineConfig, d)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return asdict(cfg)


def load_config(path) -> PipelineConfig:
    return config_from_dict(formats.load_json(path))


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    """Copy of ``cfg`` with top-level fields replaced; ``ablation`` and ``seed`` also reach the joint section."""
    kw = {k: v for k, v in kw.items() if v is not None}
    joint = cfg.joint
    if "ablation" in kw:
        joint = dataclasses.replace(joint, ablation=kw.pop("ablation").replace("-", "_"))
    if "seed" in kw:
        joint = dataclasses.replace(joint, seed=kw["seed"])
    return dataclasses.replace(cfg, joint=joint, **kw)


# ---------------------------------------------------------------------------
# results


@dataclass
class MetricsRecord:
    n_cameras: int
    n_registered: int
    n_points: int
    reprojection_rms_px: float
    sfm_rotation_error_deg: dict | None = None
    sfm_ate: dict | None = None
    rotation_error_deg: dict | None = None  # {"mean", "median"} of the final poses
    ate: dict | None = None  # {"extent", "absolute"}
    psnr_db: float | None = None
    ssim: float | None = None
    heldout_cameras: list = field(default_factory=list)
    ablation: str = "full"
    timings: dict = field(default_factory=dict)  # written to timings.json, not metrics.json

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("timings")
        return d


@dataclass
class SfmResult:
    reconstruction: Reconstruction
    intrinsics: dict
    timings: dict


# ---------------------------------------------------------------------------
# SfM


def _focal_from_matches(graph, intrinsics, cfg: SfmConfig, seed):
    edges = []
    for k, e in enumerate(graph.edges):
        try:
            F, _ = estimate_fundamental_ransac(graph.matches[e.pair], cfg.ransac_threshold_px, cfg.ransac_iters, seed + k)
        except SfmSplatError:
            continue
        edges.append(FocalEdge(e.i, e.j, F))
    pp = {c: (K.cx, K.cy) for c, K in intrinsics.items()}
    f0 = {c: K.fx for c, K in intrinsics.items()}
    focals = estimate_focal_fetzer(edges, f0, pp, shared_intrinsics=cfg.shared_intrinsics)
    return {c: K.with_focal(focals[c]) for c, K in intrinsics.items()}


def run_sfm(pairs, intrinsics: dict, cfg: SfmConfig = SfmConfig(), seed: int = 0) -> SfmResult:
    """Global SfM: view graph, rotation averaging, tracks, positioning, iterated BA."""
    timings = {}

    def stage(name, fn, *a, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*a, **kw)
        except SfmSplatError as exc:
            raise StageError(name, exc) from exc
        finally:
            timings[name] = time.perf_counter() - t0

    graph = stage("view_graph", build_view_graph, pairs, cfg.min_matches_per_pair, intrinsics)
    if cfg.estimate_focal:
        intrinsics = stage("focal", _focal_from_matches, graph, intrinsics, cfg, seed)
    opts = TwoViewOptions(cfg.min_matches_per_pair, cfg.ransac_threshold_px, cfg.ransac_iters,
                          min_parallax_deg=cfg.min_parallax_deg)
    g2 = stage("two_view", estimate_two_view_geometry, graph, intrinsics, opts, seed)
    prob = RotationAveragingProblem.from_view_graph(
        g2, sigma=np.radians(cfg.rotation_sigma_deg), final_sigma=np.radians(cfg.rotation_final_sigma_deg)
    )
    rots, _ = stage("rotation_averaging", solve_rotations, prob)
    tracks = stage("tracks", build_tracks, inlier_matches(g2), cfg.min_track_length)
    dirs = [DirectionEdge(e.i, e.j, e.t, float(e.inlier_count)) for e in g2.edges if not e.low_parallax]
    pos = stage("positioning", solve_positions, PositioningProblem(rots, tracks, intrinsics, dirs, anchor=prob.anchor))
    byid = {t.id: t for t in tracks}
    placed = []
    for tid, X in zip(pos.track_ids, pos.points):
        t = byid[tid].copy()
        t.point = X
        placed.append(t)
    recon = Reconstruction(
        {c: intrinsics[c] for c in rots}, {c: Pose(rots[c], pos.translations[c]) for c in rots}, placed
    )
    ba_opts = BAOptions(cfg.huber_delta, tuple(cfg.filter_thresholds), anchor=prob.anchor, scale_camera=pos.scale_camera)
    recon = stage("bundle_adjustment", iterate_ba_with_filtering, recon, ba_opts)
    return SfmResult(recon, intrinsics, timings)


# ---------------------------------------------------------------------------
# helpers shared by the stages


def _image_path(out: Path, i: int, fmt: str) -> Path:
    return out / "images" / formats.image_name(i, fmt)


def _load_images(out: Path, cams, fmt):
    return [formats.read_image(_image_path(out, c, fmt)) for c in cams]


def assign_track_colors(recon: Reconstruction, images: dict, render_size):
    """Mean reference-image color at every track's observations (nearest pixel at render resolution)."""
    w, h = render_size
    for t in recon.tracks:
        cols = []
        for o in t.observations:
            img = images.get(o.image)
            if img is None:
                continue
            K = recon.intrinsics[o.image]
            u = (o.uv[0] + 0.5) * w / K.width - 0.5
            v = (o.uv[1] + 0.5) * h / K.height - 0.5
            x, y = int(np.clip(np.round(u), 0, w - 1)), int(np.clip(np.round(v), 0, h - 1))
            cols.append(img[y, x])
        t.color = np.mean(cols, axis=0) if cols else np.full(3, 0.5)


def joint_state_from_reconstruction(recon: Reconstruction, opacity: float = 0.1) -> tuple[JointState, list[int]]:
    """Gaussians initialized from the SfM points; cameras re-indexed ``0..n-1`` in id order."""
    cams = recon.cameras
    col = {c: k for k, c in enumerate(cams)}
    tracks = []
    for t in recon.tracks:
        obs = [Observation(col[o.image], o.uv.copy(), o.keypoint) for o in t.observations if o.image in col]
        tracks.append(Track(t.id, obs, np.array(t.point, dtype=float), t.color))
    pts = np.array([t.point for t in tracks])
    colors = np.array([t.color if t.color is not None else np.full(3, 0.5) for t in tracks])
    g = init_gaussians_from_points(pts, colors, opacity=opacity)
    state = JointState.initialize(
        g, [recon.poses[c] for c in cams], tracks, [recon.intrinsics[c] for c in cams], np.arange(len(tracks)), anchor=0
    )
    return state, cams


def point_extent(points) -> float:
    """Radius of the point cloud around its centroid (90th percentile distance)."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    return float(np.percentile(np.linalg.norm(P - P.mean(axis=0), axis=1), 90))


def _pose_errors(poses, gt, extent):
    if gt is None or len(poses) < 3:
        return None, None
    re = rotation_error(poses, gt)
    a = ate(poses, gt)
    return {"mean": re.mean, "median": re.median}, {"absolute": a, "extent": a / extent}


# ---------------------------------------------------------------------------
# stages


def stage_ingest(cfg: PipelineConfig, out: Path):
    """Synthesize (or copy in) matches, intrinsics and reference images."""
    formats.ensure_dir(out / "images")
    if cfg.match_dir is None:
        sc = cfg.scene
        scene = generate_scene(sc.n_cameras, sc.n_points, sc.layout, cfg.seed, tuple(sc.image_size), sc.camera_distance)
        formats.write_scene(out / "scene.json", scene)
        pairs = corrupt_observations(scene, NoiseSpec(sc.pixel_sigma, sc.outlier_fraction, seed=cfg.seed))
        write_matches(out / "matches.txt", pairs)
        imgs = render_reference_images(scene, appearance_gaussians(scene), tuple(sc.render_size))
        for i, im in enumerate(imgs):
            formats.write_image(_image_path(out, i, cfg.image_format), im)
        formats.dump_json(out / "cameras.json", {str(i): formats._intr_to(K) for i, K in enumerate(scene.intrinsics)})
    else:
        src = Path(cfg.match_dir)
        if src.resolve() != out.resolve():
            shutil.copyfile(src / "matches.txt", out / "matches.txt")
            shutil.copyfile(src / "cameras.json", out / "cameras.json")
            if (src / "images").is_dir():
                shutil.copytree(src / "images", out / "images", dirs_exist_ok=True)
            if (src / "scene.json").exists():
                shutil.copyfile(src / "scene.json", out / "scene.json")


def _read_intrinsics(out: Path, cfg: PipelineConfig) -> dict:
    raw = formats.load_json(out / "cameras.json")
    intr = {}
    for k, d in raw.items():
        w, h = int(d["width"]), int(d["height"])
        f = d.get("fx") or 1.2 * max(w, h)
        intr[int(k)] = CameraIntrinsics(f, d.get("fy") or f, d.get("cx", w / 2), d.get("cy", h / 2), w, h)
    return intr


def stage_sfm(cfg: PipelineConfig, out: Path) -> dict:
    pairs = group_matches(read_matches(out / "matches.txt"))
    intr = _read_intrinsics(out, cfg)
    res = run_sfm(pairs, intr, cfg.sfm, cfg.seed)
    recon = res.reconstruction
    cams = [c for c in recon.cameras if _image_path(out, c, cfg.image_format).exists()]
    assign_track_colors(recon, dict(zip(cams, _load_images(out, cams, cfg.image_format))), tuple(cfg.scene.render_size))
    formats.write_reconstruction(out / "sfm.json", recon)
    return res.timings


def _ground_truth(out: Path):
    p = out / "scene.json"
    return formats.read_scene(p) if p.exists() else None


def stage_joint(cfg: PipelineConfig, out: Path):
    recon = formats.read_reconstruction(out / "sfm.json")
    cams = recon.cameras
    images = {c: im for c, im in zip(cams, _load_images(out, cams, cfg.image_format))}
    state, cams = joint_state_from_reconstruction(recon, cfg.gaussian_opacity)
    train = [k for k, c in enumerate(cams) if c % cfg.holdout_every != 0]
    jc = dataclasses.replace(cfg.joint, extent=point_extent(state.track_points), render_size=tuple(cfg.scene.render_size))
    ckpt = out / "joint.npz"
    result = joint_optimize(
        state, [images[c] for c in cams], jc, train_cameras=train,
        checkpoint_every=cfg.checkpoint_every, checkpoint_path=ckpt if cfg.checkpoint_every else None,
    )
    save_checkpoint(ckpt, result.state)
    write_trace_csv(out / "loss_trace.csv", result.trace)


def final_reconstruction(out: Path) -> Reconstruction:
    """SfM checkpoint with poses and points replaced by the joint result when one exists."""
    recon = formats.read_reconstruction(out / "sfm.json")
    ckpt = out / "joint.npz"
    if not ckpt.exists():
        return recon
    st = load_checkpoint(ckpt)
    cams = recon.cameras
    poses = {c: st.pose(k) for k, c in enumerate(cams)}
    tracks = []
    for t, X in zip(recon.tracks, st.track_points):
        t = t.copy()
        t.point = X.copy()
        tracks.append(t)
    return Reconstruction(recon.intrinsics, poses, tracks, recon.history)


def stage_eval(cfg: PipelineConfig, out: Path) -> MetricsRecord:
    recon = formats.read_reconstruction(out / "sfm.json")
    cams = recon.cameras
    scene = _ground_truth(out)
    n_total = scene.n_cameras if scene is not None else len(formats.load_json(out / "cameras.json"))
    gt = [scene.cameras[c][1] for c in cams] if scene is not None else None
    extent = scene.extent if scene is not None else 1.0
    sfm_re, sfm_ate = _pose_errors([recon.poses[c] for c in cams], gt, extent)
    rec = MetricsRecord(
        n_cameras=n_total, n_registered=len(cams), n_points=len(recon.tracks),
        reprojection_rms_px=recon.rms(), sfm_rotation_error_deg=sfm_re, sfm_ate=sfm_ate,
        rotation_error_deg=sfm_re, ate=sfm_ate, ablation=cfg.joint.ablation,
    )
    ckpt = out / "joint.npz"
    if ckpt.exists():
        st = load_checkpoint(ckpt)
        held = [k for k, c in enumerate(cams) if c % cfg.holdout_every == 0]
        images = _load_images(out, cams, cfg.image_format)
        ev = evaluate_state(st, images, held, gt)
        rec.heldout_cameras = [cams[k] for k in held]
        rec.psnr_db = ev.mean_psnr_db
        rec.ssim = ev.mean_ssim
        if gt is not None:
            rec.rotation_error_deg, rec.ate = _pose_errors(st.poses(), gt, extent)
    return rec


def stage_export(cfg: PipelineConfig, out: Path) -> None:
    recon = final_reconstruction(out)
    names = {c: formats.image_name(c, cfg.image_format) for c in recon.cameras}
    formats.export_colmap_text(recon, out / "sparse", names)


def write_metrics(out: Path, rec: MetricsRecord) -> None:
    formats.dump_json(out / "metrics.json", rec.to_json())
    formats.dump_json(out / "timings.json", rec.timings)


def run_pipeline(cfg: PipelineConfig) -> MetricsRecord:
    """Run the stages selected by ``cfg.stage`` inside ``cfg.out`` and write all artifacts.

    ``full`` = ingest, sfm, joint, eval, export; ``sfm`` = ingest, sfm, eval, export;
    ``joint`` = joint, eval, export on a directory that already holds an SfM checkpoint.
    """
    cfg.validate()
    out = formats.ensure_dir(cfg.out)
    formats.dump_json(out / "config.json", config_to_dict(cfg))
    timings = {}

    def timed(name, fn):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            r = fn(cfg, out)
        except StageError:
            raise
        except SfmSplatError as exc:
            raise StageError(name, exc) from exc
        timings[name] = time.perf_counter() - t0
        return r

    if cfg.stage in ("full", "sfm"):
        timed("ingest", stage_ingest)
        sub = timed("sfm", stage_sfm)
        timings.update({f"sfm.{k}": v for k, v in sub.items()})
    if cfg.stage in ("full", "joint"):
        if not (out / "sfm.json").exists():
            raise StageError("joint", FileNotFoundError(out / "sfm.json"))
        timed("joint", stage_joint)
    elif (out / "joint.npz").exists():
        (out / "joint.npz").unlink()  # a fresh SfM run invalidates an older joint result
    rec = timed("eval", stage_eval)
    timed("export", stage_export)
    rec.timings = timings
    write_metrics(out, rec)
    return rec
