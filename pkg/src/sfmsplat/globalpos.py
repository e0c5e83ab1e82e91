"""Camera centers and 3D points from fixed rotations by minimizing ray distances.

For every observation of point ``X`` by camera ``i`` with world bearing ``b``,
the residual is ``(I - b b^T)(X - c_i)``, the perpendicular offset of ``X`` from
the viewing ray. With rotations fixed this is linear in ``(c, X)`` apart from
the gauge: the anchor center is pinned to the origin and the center farthest
from it (in the initialization) lives on the unit sphere.

Levenberg-Marquardt eliminates the point blocks with a Schur complement and
solves the small dense camera system.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraph, RankDeficient
from .geomcore import CameraIntrinsics


def bearing(K: CameraIntrinsics, R, x) -> np.ndarray:
    """World-frame unit ray through pixel(s) ``x`` of a camera with rotation ``R``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    d = np.stack([(x[:, 0] - K.cx) / K.fx, (x[:, 1] - K.cy) / K.fy, np.ones(len(x))], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    b = d @ np.asarray(R)
    return b[0] if single else b


def ray_residual(b, X, c) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    d = np.asarray(X, dtype=float) - np.asarray(c, dtype=float)
    return d - b * (b @ d)


@dataclass
class DirectionEdge:
    i: int
    j: int
    t: np.ndarray  # unit t_ij, x_j = R_ij x_i + t_ij
    weight: float = 1.0


@dataclass
class PositioningProblem:
    rotations: dict[int, np.ndarray]
    tracks: list  # tracks.Track
    intrinsics: dict[int, CameraIntrinsics]
    directions: list[DirectionEdge] = field(default_factory=list)
    anchor: int | None = None
    min_parallax_deg: float = 1.0

    def __post_init__(self):
        if self.anchor is None:
            self.anchor = min(self.rotations)


@dataclass
class PositioningResult:
    centers: dict[int, np.ndarray]
    translations: dict[int, np.ndarray]
    points: np.ndarray  # (n_kept, 3)
    track_ids: list[int]  # ids of the tracks the points belong to
    objective: list[float]
    scale_camera: int


def _chain_centers(problem: PositioningProblem, cams):
    """Centers from spanning-tree chaining of pairwise directions with unit baselines."""
    parent = {c: c for c in cams}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    adj = {c: [] for c in cams}
    order = sorted(range(len(problem.directions)), key=lambda k: (-problem.directions[k].weight, k))
    for k in order:
        e = problem.directions[k]
        if e.i not in parent or e.j not in parent:
            continue
        a, b = find(e.i), find(e.j)
        if a == b:
            continue
        parent[max(a, b)] = min(a, b)
        # c_j - c_i = -R_j^T t_ij (up to positive scale)
        d = -problem.rotations[e.j].T @ e.t
        adj[e.i].append((e.j, d))
        adj[e.j].append((e.i, -d))
    centers = {problem.anchor: np.zeros(3)}
    queue = deque([problem.anchor])
    while queue:
        u = queue.popleft()
        for v, d in adj[u]:
            if v not in centers:
                centers[v] = centers[u] + d
                queue.append(v)
    if len(centers) != len(cams):
        return None
    return centers


def _tangent_basis(u):
    a = np.eye(3)[int(np.argmin(np.abs(u)))]
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1)
    return np.stack([e1, np.cross(u, e1)], axis=1)


class _Layout:
    """Observation arrays and the per-point pair structure used by the Schur step."""

    def __init__(self, problem, cams, tracks):
        col = {c: k for k, c in enumerate(cams)}
        cam, pt, bear = [], [], []
        for p, t in enumerate(tracks):
            for o in t.observations:
                cam.append(col[o.image])
                pt.append(p)
                bear.append(bearing(problem.intrinsics[o.image], problem.rotations[o.image], o.uv))
        self.cam = np.array(cam, dtype=np.int64)
        self.pt = np.array(pt, dtype=np.int64)
        self.b = b = np.array(bear)
        self.P = np.eye(3)[None] - b[:, :, None] * b[:, None, :]
        self.n_pt = len(tracks)
        self.n_cam = len(cams)
        starts = np.searchsorted(self.pt, np.arange(self.n_pt))
        ends = np.append(starts[1:], len(self.pt))
        pa, pb = [], []
        for s, e in zip(starts, ends):
            idx = np.arange(s, e)
            pa.append(np.repeat(idx, e - s))
            pb.append(np.tile(idx, e - s))
        self.pair_a = np.concatenate(pa)
        self.pair_b = np.concatenate(pb)
        self.pair_pt = self.pt[self.pair_a]


def _objective(L: _Layout, C, X):
    d = X[L.pt] - C[L.cam]
    return float(np.einsum("ni,nij,nj->", d, L.P, d))


def _gauge_map(n_cam, anchor_col, far_col, far_dir, fix_far):
    """Columns: 3 per free camera, 2 tangent coordinates for the scale camera (none if fixed)."""
    blocks = []
    n = 0
    for c in range(n_cam):
        if c == anchor_col:
            continue
        if c == far_col:
            if fix_far:
                continue
            blocks.append((c, _tangent_basis(far_dir), n))
            n += 2
        else:
            blocks.append((c, np.eye(3), n))
            n += 3
    T = np.zeros((3 * n_cam, n))
    for c, B, k in blocks:
        T[3 * c : 3 * c + 3, k : k + B.shape[1]] = B
    return T


def _lm_step(L: _Layout, C, X, T, lam):
    d = X[L.pt] - C[L.cam]
    r = np.einsum("nij,nj->ni", L.P, d)  # P d (= P^T P d)
    gX = np.zeros((L.n_pt, 3))
    np.add.at(gX, L.pt, r)
    gC = np.zeros((L.n_cam, 3))
    np.add.at(gC, L.cam, -r)
    HX = np.zeros((L.n_pt, 3, 3))
    np.add.at(HX, L.pt, L.P)
    HC = np.zeros((L.n_cam, 3, 3))
    np.add.at(HC, L.cam, L.P)
    HX = HX + lam * np.einsum("pii->pi", HX)[:, :, None] * np.eye(3)[None]
    try:
        HXinv = np.linalg.inv(HX)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient("a point block is singular") from exc

    S = np.zeros((3 * L.n_cam, 3 * L.n_cam))
    for c in range(L.n_cam):
        S[3 * c : 3 * c + 3, 3 * c : 3 * c + 3] = HC[c]
    red = T.T @ S @ T
    red[np.diag_indices_from(red)] *= 1.0 + lam

    blocks = np.einsum("nij,njk,nkl->nil", L.P[L.pair_a], HXinv[L.pair_pt], L.P[L.pair_b])
    full = np.zeros((L.n_cam, L.n_cam, 3, 3))
    np.add.at(full, (L.cam[L.pair_a], L.cam[L.pair_b]), blocks)
    sub = full.transpose(0, 2, 1, 3).reshape(3 * L.n_cam, 3 * L.n_cam)
    red -= T.T @ sub @ T

    rhs_c = -gC.copy()
    corr = np.einsum("nij,njk,nk->ni", L.P, HXinv[L.pt], gX[L.pt])
    np.add.at(rhs_c, L.cam, -corr)
    rhs = T.T @ rhs_c.ravel()
    try:
        chol = np.linalg.cholesky(red)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient("gauge-fixed camera system is singular") from exc
    dz = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    if not np.all(np.isfinite(dz)) or np.linalg.cond(red) > 1e14:
        raise RankDeficient("gauge-fixed camera system is ill-conditioned")
    dC = (T @ dz).reshape(L.n_cam, 3)
    back = np.zeros((L.n_pt, 3))
    np.add.at(back, L.pt, np.einsum("nij,nj->ni", L.P, dC[L.cam]))
    dX = np.einsum("pij,pj->pi", HXinv, -gX + back)
    return dC, dX


def _max_parallax_deg(bearings):
    B = np.asarray(bearings)
    cos = np.clip(B @ B.T, -1.0, 1.0)
    return float(np.degrees(np.arccos(cos.min())))


def solve_positions(
    problem: PositioningProblem,
    max_iters: int = 100,
    tol: float = 1e-10,
    lambda_init: float = 1e-4,
) -> PositioningResult:
    cams = sorted(problem.rotations)
    col = {c: k for k, c in enumerate(cams)}
    tracks = []
    for t in problem.tracks:
        obs = [o for o in t.observations if o.image in col]
        if len(obs) < 2:
            continue
        bs = [bearing(problem.intrinsics[o.image], problem.rotations[o.image], o.uv) for o in obs]
        if _max_parallax_deg(bs) < problem.min_parallax_deg:
            continue
        tracks.append(type(t)(t.id, obs))
    if not tracks:
        raise RankDeficient("no track with enough parallax")
    seen = {o.image for t in tracks for o in t.observations}
    if seen != set(cams):
        raise DisconnectedGraph(f"cameras without usable observations: {sorted(set(cams) - seen)}")

    L = _Layout(problem, cams, tracks)
    anchor = col[problem.anchor]
    chained = _chain_centers(problem, cams) if problem.directions else None
    if chained is None:
        chained = {c: np.eye(3)[k % 3] * (1 + k) for k, c in enumerate(cams)}
        chained[problem.anchor] = np.zeros(3)
    dist = {c: np.linalg.norm(chained[c] - chained[problem.anchor]) for c in cams}
    far_cam = max((c for c in cams if c != problem.anchor), key=lambda c: (dist[c], -c))
    far = col[far_cam]
    C = np.array([chained[c] for c in cams], dtype=float)
    C -= C[anchor]
    C /= max(np.linalg.norm(C[far]), 1e-12)

    # with the scale camera pinned the problem is linear: one undamped step solves it
    X = np.zeros((L.n_pt, 3))
    T = _gauge_map(L.n_cam, anchor, far, C[far], fix_far=True)
    dC, dX = _lm_step(L, C, X, T, 0.0)
    C, X = C + dC, X + dX
    obj = _objective(L, C, X)
    trace = [obj]
    lam = lambda_init
    for _ in range(max_iters):
        T = _gauge_map(L.n_cam, anchor, far, C[far], fix_far=False)
        dC, dX = _lm_step(L, C, X, T, lam)
        Cn, Xn = C + dC, X + dX
        Cn[far] /= np.linalg.norm(Cn[far])
        new = _objective(L, Cn, Xn)
        if new <= obj:
            rel = (obj - new) / max(obj, 1e-300)
            C, X, obj = Cn, Xn, new
            trace.append(obj)
            lam *= 0.5
            if rel < tol or obj < 1e-28:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break

    # the objective cannot tell a scene from its reflection through the anchor; keep
    # the one that puts most points in front of the cameras
    if np.sum(np.sign(np.einsum("ni,ni->n", L.b, X[L.pt] - C[L.cam]))) < 0:
        C, X = -C, -X

    centers = {c: C[col[c]].copy() for c in cams}
    translations = {c: -problem.rotations[c] @ centers[c] for c in cams}
    return PositioningResult(centers, translations, X, [t.id for t in tracks], trace, far_cam)
