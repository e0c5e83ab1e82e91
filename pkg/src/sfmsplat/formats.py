"""On-disk interchange formats.

* scene JSON: ground-truth cameras, points, colors and tracks of a synthetic scene;
* reconstruction JSON: the SfM checkpoint handed from the sfm stage to the joint stage;
* images: 8-bit PNG or binary PPM (P6) through Pillow;
* COLMAP text triple ``cameras.txt`` / ``images.txt`` / ``points3D.txt``.

Floats are written with ``repr`` precision so JSON round trips are exact.
Pixel coordinates inside the library put pixel centers at integers; the COLMAP
files use COLMAP's convention (pixel centers at +0.5) and the writer/reader pair
converts on the way out and in.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .ba import Reconstruction, RoundStats
from .geomcore import CameraIntrinsics, Pose, matrix_from_quat, quat_from_matrix
from .synthscene import Scene
from .tracks import Observation, Track

# ---------------------------------------------------------------------------
# JSON helpers


def dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _intr_to(K: CameraIntrinsics) -> dict:
    return {"fx": float(K.fx), "fy": float(K.fy), "cx": float(K.cx), "cy": float(K.cy), "width": int(K.width), "height": int(K.height)}


def _intr_from(d) -> CameraIntrinsics:
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def _pose_to(T: Pose) -> dict:
    return {"R": np.asarray(T.R).tolist(), "t": np.asarray(T.t).tolist()}


def _pose_from(d) -> Pose:
    return Pose(np.array(d["R"], dtype=float), np.array(d["t"], dtype=float))


def _track_to(t: Track) -> dict:
    return {
        "id": int(t.id),
        "point": None if t.point is None else np.asarray(t.point).tolist(),
        "color": None if t.color is None else np.asarray(t.color).tolist(),
        "observations": [[int(o.image), float(o.uv[0]), float(o.uv[1]), int(o.keypoint)] for o in t.observations],
    }


def _track_from(d) -> Track:
    obs = [Observation(int(i), [u, v], int(k)) for i, u, v, k in d["observations"]]
    pt = None if d["point"] is None else np.array(d["point"], dtype=float)
    col = None if d.get("color") is None else np.array(d["color"], dtype=float)
    return Track(int(d["id"]), obs, pt, col)


# ---------------------------------------------------------------------------
# scene


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": "sfmsplat-scene/1",
        "seed": int(scene.seed),
        "extent": float(scene.extent),
        "layout": scene.layout,
        "cameras": [{"intrinsics": _intr_to(K), "pose": _pose_to(T)} for K, T in scene.cameras],
        "points": np.asarray(scene.points).tolist(),
        "colors": np.asarray(scene.colors).tolist(),
        "tracks": [_track_to(t) for t in scene.tracks],
    }


def scene_from_dict(d) -> Scene:
    cams = [(_intr_from(c["intrinsics"]), _pose_from(c["pose"])) for c in d["cameras"]]
    return Scene(
        cams,
        np.array(d["points"], dtype=float).reshape(-1, 3),
        np.array(d["colors"], dtype=float).reshape(-1, 3),
        [_track_from(t) for t in d["tracks"]],
        int(d["seed"]),
        float(d["extent"]),
        d["layout"],
    )


def write_scene(path, scene: Scene) -> None:
    dump_json(path, scene_to_dict(scene))


def read_scene(path) -> Scene:
    return scene_from_dict(load_json(path))


# ---------------------------------------------------------------------------
# reconstruction checkpoint


def reconstruction_to_dict(recon: Reconstruction) -> dict:
    return {
        "format": "sfmsplat-reconstruction/1",
        "intrinsics": {str(c): _intr_to(K) for c, K in sorted(recon.intrinsics.items())},
        "poses": {str(c): _pose_to(T) for c, T in sorted(recon.poses.items())},
        "tracks": [_track_to(t) for t in recon.tracks],
        "history": [vars(h) for h in recon.history],
    }


def reconstruction_from_dict(d) -> Reconstruction:
    return Reconstruction(
        {int(c): _intr_from(k) for c, k in d["intrinsics"].items()},
        {int(c): _pose_from(p) for c, p in d["poses"].items()},
        [_track_from(t) for t in d["tracks"]],
        [RoundStats(**h) for h in d.get("history", [])],
    )


def write_reconstruction(path, recon: Reconstruction) -> None:
    dump_json(path, reconstruction_to_dict(recon))


def read_reconstruction(path) -> Reconstruction:
    return reconstruction_from_dict(load_json(path))


# ---------------------------------------------------------------------------
# images


def image_name(i: int, ext: str = "png") -> str:
    return f"{i:04d}.{ext}"


def write_image(path, rgb) -> None:
    """Save a float RGB image in [0, 1] as 8-bit; the format follows the extension (.png / .ppm)."""
    a = np.clip(np.round(np.asarray(rgb, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


# ---------------------------------------------------------------------------
# COLMAP text


def export_colmap_text(recon: Reconstruction, directory, names=None) -> list[Path]:
    """Write ``cameras.txt``, ``images.txt`` and ``points3D.txt`` (PINHOLE cameras).

    One camera record per image. COLMAP ids are library ids plus one. Points
    without a 3D position are skipped.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cams = recon.cameras
    names = names or {c: image_name(c) for c in cams}
    pts = [t for t in recon.tracks if t.point is not None]

    # per image: list of (uv, point3d id) in a fixed order, and the 2D index used by the tracks
    obs2d = {c: [] for c in cams}
    track_refs = []
    for t in pts:
        refs = []
        for o in t.observations:
            if o.image not in obs2d:
                continue
            refs.append((o.image, len(obs2d[o.image])))
            obs2d[o.image].append((o.uv, t.id))
        track_refs.append(refs)

    with open(d / "cameras.txt", "w") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        fh.write(f"# Number of cameras: {len(cams)}\n")
        for c in cams:
            K = recon.intrinsics[c]
            fh.write(f"{c + 1} PINHOLE {K.width} {K.height} {float(K.fx)!r} {float(K.fy)!r} {float(K.cx) + 0.5!r} {float(K.cy) + 0.5!r}\n")

    with open(d / "images.txt", "w") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        fh.write(f"# Number of images: {len(cams)}\n")
        for c in cams:
            T = recon.poses[c]
            q = quat_from_matrix(T.R)
            vals = " ".join(repr(float(v)) for v in (*q, *T.t))
            fh.write(f"{c + 1} {vals} {c + 1} {names[c]}\n")
            fh.write(" ".join(f"{float(uv[0]) + 0.5!r} {float(uv[1]) + 0.5!r} {pid + 1}" for uv, pid in obs2d[c]) + "\n")

    with open(d / "points3D.txt", "w") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        fh.write(f"# Number of points: {len(pts)}\n")
        for t, refs in zip(pts, track_refs):
            rgb = np.zeros(3) if t.color is None else np.asarray(t.color)
            rgb = np.clip(np.round(rgb * 255), 0, 255).astype(int)
            err = _track_error(recon, t)
            xyz = " ".join(repr(float(v)) for v in t.point)
            tr = " ".join(f"{img + 1} {k}" for img, k in refs)
            fh.write(f"{t.id + 1} {xyz} {rgb[0]} {rgb[1]} {rgb[2]} {err!r} {tr}".rstrip() + "\n")
    return [d / "cameras.txt", d / "images.txt", d / "points3D.txt"]


def _track_error(recon, t) -> float:
    errs = []
    for o in t.observations:
        if o.image not in recon.poses:
            continue
        p = recon.poses[o.image].apply(t.point)
        if p[2] <= 0:
            continue
        K = recon.intrinsics[o.image]
        uv = np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])
        errs.append(np.linalg.norm(uv - o.uv))
    return float(np.mean(errs)) if errs else 0.0


def _data_lines(path):
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            yield line.rstrip("\n")


def read_colmap_text(directory) -> Reconstruction:
    """Minimal reader for files written by :func:`export_colmap_text` (PINHOLE only)."""
    d = Path(directory)
    intr = {}
    for line in _data_lines(d / "cameras.txt"):
        f = line.split()
        if not f:
            continue
        if f[1] != "PINHOLE":
            raise ValueError(f"unsupported camera model {f[1]}")
        fx, fy, cx, cy = map(float, f[4:8])
        intr[int(f[0]) - 1] = CameraIntrinsics(fx, fy, cx - 0.5, cy - 0.5, int(f[2]), int(f[3]))

    poses, intr_by_image, points2d = {}, {}, {}
    lines = list(_data_lines(d / "images.txt"))
    for head, pts in zip(lines[0::2], lines[1::2]):
        f = head.split()
        img = int(f[0]) - 1
        q = np.array([float(v) for v in f[1:5]])
        t = np.array([float(v) for v in f[5:8]])
        poses[img] = Pose(matrix_from_quat(q), t)
        intr_by_image[img] = intr[int(f[8]) - 1]
        v = pts.split()
        points2d[img] = [(float(v[k]) - 0.5, float(v[k + 1]) - 0.5, int(v[k + 2])) for k in range(0, len(v), 3)]

    tracks = []
    for line in _data_lines(d / "points3D.txt"):
        f = line.split()
        if not f:
            continue
        pid = int(f[0])
        X = np.array([float(v) for v in f[1:4]])
        rgb = np.array([int(v) for v in f[4:7]], dtype=float) / 255.0
        refs = [(int(f[k]) - 1, int(f[k + 1])) for k in range(8, len(f), 2)]
        obs = []
        for img, k in refs:
            u, v, p = points2d[img][k]
            if p != pid:
                raise ValueError(f"inconsistent track reference for point {pid}")
            obs.append(Observation(img, [u, v], k))
        tracks.append(Track(pid - 1, obs, X, rgb))
    return Reconstruction(intr_by_image, poses, tracks)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
