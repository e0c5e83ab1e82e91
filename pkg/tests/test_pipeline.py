import json

import numpy as np
import pytest

from sfmsplat import cli, formats
from sfmsplat.ba import Reconstruction
from sfmsplat.errors import StageError
from sfmsplat.geomcore import CameraIntrinsics, Pose, random_rotation
from sfmsplat.pipeline import (
    PipelineConfig,
    SceneConfig,
    config_from_dict,
    config_to_dict,
    load_config,
    run_pipeline,
    with_overrides,
)
from sfmsplat.tracks import Observation, Track

SMALL = dict(
    scene=dict(n_cameras=9, n_points=250, image_size=[256, 256], render_size=[32, 32]),
    joint=dict(iterations=30),
    holdout_every=4,
)


def small_config(out, **kw):
    d = json.loads(json.dumps(SMALL))
    for k, v in kw.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    d["out"] = str(out)
    return config_from_dict(d)


# ---------------------------------------------------------------------------
# configuration


def test_config_round_trip(tmp_path):
    cfg = small_config(tmp_path / "r")
    path = tmp_path / "cfg.json"
    formats.dump_json(path, config_to_dict(cfg))
    assert load_config(path) == cfg
    assert cfg.scene.image_size == (256, 256)


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ValueError):
        config_from_dict({"nope": 1})
    with pytest.raises(ValueError):
        config_from_dict({"scene": {"n_camera": 3}})
    with pytest.raises(ValueError):
        PipelineConfig(stage="everything")
    with pytest.raises(FileNotFoundError):
        PipelineConfig(match_dir=str(tmp_path))


def test_overrides_reach_the_joint_section():
    cfg = with_overrides(PipelineConfig(), seed=7, ablation="frozen-poses", out=None)
    assert cfg.seed == 7 and cfg.joint.seed == 7
    assert cfg.joint.ablation == "frozen_poses"
    assert cfg.out == "run"


def test_default_config_matches_the_standard_scene():
    sc = SceneConfig()
    assert (sc.n_cameras, sc.n_points, sc.pixel_sigma, sc.outlier_fraction) == (20, 1000, 0.5, 0.1)
    assert PipelineConfig().seed == 42


# ---------------------------------------------------------------------------
# COLMAP text export


def one_point_recon():
    K = CameraIntrinsics(510.25, 498.5, 255.5, 240.125, 512, 480)
    rng = np.random.default_rng(0)
    T = Pose(random_rotation(rng), np.array([0.1, -0.25, 2.0]))
    X = T.inverse().apply(np.array([0.1, 0.2, 3.0]))
    uv = np.array([300.125, 200.75])
    return Reconstruction({0: K}, {0: T}, [Track(0, [Observation(0, uv, 0)], X, np.array([1.0, 0.5, 0.0]))])


def records(path):
    return [ln for ln in path.read_text().splitlines() if ln and not ln.startswith("#")]


def test_colmap_one_camera_one_point_round_trip(tmp_path):
    rec = one_point_recon()
    files = formats.export_colmap_text(rec, tmp_path)
    assert [f.name for f in files] == ["cameras.txt", "images.txt", "points3D.txt"]
    assert len(records(files[0])) == 1
    assert len(records(files[1])) == 2  # pose line plus observation line
    assert len(records(files[2])) == 1
    back = formats.read_colmap_text(tmp_path)
    K, K2 = rec.intrinsics[0], back.intrinsics[0]
    for a in ("fx", "fy", "cx", "cy"):
        assert abs(getattr(K, a) - getattr(K2, a)) < 1e-9
    np.testing.assert_allclose(back.poses[0].R, rec.poses[0].R, atol=1e-9)
    np.testing.assert_allclose(back.poses[0].t, rec.poses[0].t, atol=1e-9)
    np.testing.assert_allclose(back.tracks[0].point, rec.tracks[0].point, atol=1e-9)
    np.testing.assert_allclose(back.tracks[0].observations[0].uv, rec.tracks[0].observations[0].uv, atol=1e-9)
    assert records(files[0])[0].split()[:4] == ["1", "PINHOLE", "512", "480"]


def test_colmap_identity_pose(tmp_path):
    K = CameraIntrinsics.simple(100.0, 64, 64)
    rec = Reconstruction({0: K}, {0: Pose(np.eye(3), np.zeros(3))}, [])
    formats.export_colmap_text(rec, tmp_path, {0: "a.png"})
    f = records(tmp_path / "images.txt")[0].split()
    assert [float(v) for v in f[1:5]] == [1.0, 0.0, 0.0, 0.0]
    assert [float(v) for v in f[5:8]] == [0.0, 0.0, 0.0]
    assert f[8:] == ["1", "a.png"]


def test_colmap_quaternion_is_hamilton_world_to_camera(tmp_path):
    # 90 degrees about +z: x_cam = R x_world with R = Rz(90)
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    rec = Reconstruction({0: CameraIntrinsics.simple(100.0, 64, 64)}, {0: Pose(R, np.zeros(3))}, [])
    formats.export_colmap_text(rec, tmp_path)
    q = np.array([float(v) for v in records(tmp_path / "images.txt")[0].split()[1:5]])
    np.testing.assert_allclose(q, [np.sqrt(0.5), 0.0, 0.0, np.sqrt(0.5)], atol=1e-15)


def test_colmap_empty_reconstruction(tmp_path):
    formats.export_colmap_text(Reconstruction({}, {}, []), tmp_path)
    for name in ("cameras.txt", "images.txt", "points3D.txt"):
        text = (tmp_path / name).read_text()
        assert text.startswith("#")
        assert records(tmp_path / name) == []


# ---------------------------------------------------------------------------
# end to end


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    rec = run_pipeline(small_config(out))
    return out, rec


def test_full_pipeline_writes_all_artifacts(full_run):
    out, rec = full_run
    for name in ("config.json", "scene.json", "matches.txt", "cameras.json", "sfm.json", "joint.npz",
                 "loss_trace.csv", "metrics.json", "timings.json", "sparse/cameras.txt", "sparse/images.txt",
                 "sparse/points3D.txt", "images/" + formats.image_name(0)):
        assert (out / name).exists(), name
    m = formats.load_json(out / "metrics.json")
    assert m["n_registered"] == 9 and m["heldout_cameras"] == [0, 4, 8]
    vals = [m["reprojection_rms_px"], m["psnr_db"], m["ssim"], *m["rotation_error_deg"].values(), *m["ate"].values()]
    assert all(np.isfinite(v) and v >= 0 for v in vals)
    assert len(formats.load_json(out / "timings.json")) >= 5
    assert rec.rotation_error_deg["mean"] < 1.0


def test_same_seed_gives_identical_artifacts(full_run, tmp_path):
    out, _ = full_run
    run_pipeline(small_config(tmp_path))
    for name in ("metrics.json", "sparse/cameras.txt", "sparse/images.txt", "sparse/points3D.txt", "loss_trace.csv"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_stage_split_equals_full_run(full_run, tmp_path):
    out, _ = full_run
    run_pipeline(small_config(tmp_path, stage="sfm"))
    assert not (tmp_path / "joint.npz").exists()
    run_pipeline(small_config(tmp_path, stage="joint"))
    assert (out / "metrics.json").read_bytes() == (tmp_path / "metrics.json").read_bytes()
    assert (out / "sparse/images.txt").read_bytes() == (tmp_path / "sparse/images.txt").read_bytes()


def test_noise_free_sfm_is_exact(tmp_path):
    cfg = small_config(tmp_path, stage="sfm", scene=dict(pixel_sigma=0.0, outlier_fraction=0.0))
    rec = run_pipeline(cfg)
    assert rec.reprojection_rms_px < 1e-6
    assert rec.sfm_rotation_error_deg["mean"] < 1e-5


def test_joint_stage_needs_sfm_output(tmp_path):
    with pytest.raises(StageError) as ei:
        run_pipeline(small_config(tmp_path, stage="joint"))
    assert ei.value.stage == "joint"


def test_stage_failure_is_labelled(tmp_path):
    # two cameras cannot be positioned with any meaningful gauge
    cfg = small_config(tmp_path, stage="sfm", scene=dict(n_cameras=2, n_points=40))
    with pytest.raises(StageError) as ei:
        run_pipeline(cfg)
    # failures inside SfM carry the name of the sub-stage that raised
    assert ei.value.stage == "positioning"
    assert "positioning" in str(ei.value)


# ---------------------------------------------------------------------------
# command line


def test_cli_subcommands(tmp_path, capsys):
    cfgp = tmp_path / "cfg.json"
    formats.dump_json(cfgp, SMALL)
    out = tmp_path / "run"
    base = ["--config", str(cfgp), "--out", str(out), "--seed", "3"]
    assert cli.main(["synth", *base]) == 0
    assert (out / "matches.txt").exists()
    assert cli.main(["sfm", *base]) == 0
    assert (out / "sfm.json").exists()
    assert cli.main(["joint", *base, "--ablation", "frozen-poses", "--iterations", "5"]) == 0
    assert cli.main(["eval", *base, "--ablation", "frozen-poses"]) == 0
    assert formats.load_json(out / "metrics.json")["ablation"] == "frozen_poses"
    assert cli.main(["export", *base]) == 0
    assert (out / "sparse" / "points3D.txt").exists()
    assert formats.load_json(out / "config.json")["seed"] == 3


def test_cli_pipeline_and_errors(tmp_path, capsys):
    cfgp = tmp_path / "cfg.json"
    formats.dump_json(cfgp, SMALL)
    out = tmp_path / "run"
    assert cli.main(["pipeline", "--config", str(cfgp), "--out", str(out), "--stage", "sfm"]) == 0
    assert "metrics.json" in capsys.readouterr().out
    assert cli.main(["joint", "--config", str(cfgp), "--out", str(tmp_path / "empty")]) == 1
    with pytest.raises(SystemExit):
        cli.main(["pipeline", "--ablation", "bogus"])
    bad = tmp_path / "bad.json"
    formats.dump_json(bad, {"scene": {"unknown": 1}})
    assert cli.main(["synth", "--config", str(bad), "--out", str(out)]) == 1
