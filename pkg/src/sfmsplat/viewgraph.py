"""Two-view layer: match ingestion, view-graph construction, fundamental and
essential matrix estimation inside RANSAC, and focal estimation from
fundamental matrices.

Relative poses follow the world-to-camera convention of :mod:`geomcore`:
for an edge ``(i, j)``, ``x_j = R_ij x_i + t_ij`` with ``R_ij = R_j R_i^T``
and ``t_ij`` of unit length. Fundamental matrices satisfy ``x_j^T F x_i = 0``.
"""

from __future__ import annotations

import itertools
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import CheiralityAmbiguous, DegenerateConfiguration, EmptyGraph, NoConvergence
from .geomcore import CameraIntrinsics, hat, so3_exp

THREADS_ENV = "SFMSPLAT_NUM_THREADS"


def num_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# matches


@dataclass
class Match:
    image_a: int
    image_b: int
    point_a: np.ndarray
    point_b: np.ndarray
    kp_a: int = -1
    kp_b: int = -1

    def __post_init__(self):
        if self.image_a == self.image_b:
            raise ValueError("a match must join two different images")
        self.point_a = np.asarray(self.point_a, dtype=float).reshape(2)
        self.point_b = np.asarray(self.point_b, dtype=float).reshape(2)


@dataclass
class PairMatches:
    """All correspondences between one ordered image pair, stored column-wise."""

    image_a: int
    image_b: int
    pts_a: np.ndarray  # (n, 2)
    pts_b: np.ndarray  # (n, 2)
    kp_a: np.ndarray  # (n,) int
    kp_b: np.ndarray  # (n,) int
    is_outlier: np.ndarray | None = None  # ground-truth labels when known

    def __post_init__(self):
        self.pts_a = np.asarray(self.pts_a, dtype=float).reshape(-1, 2)
        self.pts_b = np.asarray(self.pts_b, dtype=float).reshape(-1, 2)
        n = len(self.pts_a)
        self.kp_a = np.asarray(self.kp_a, dtype=np.int64).reshape(n)
        self.kp_b = np.asarray(self.kp_b, dtype=np.int64).reshape(n)
        if self.is_outlier is not None:
            self.is_outlier = np.asarray(self.is_outlier, dtype=bool).reshape(n)

    def __len__(self):
        return len(self.pts_a)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.image_a, self.image_b)

    def subset(self, idx) -> "PairMatches":
        lab = None if self.is_outlier is None else self.is_outlier[idx]
        return PairMatches(self.image_a, self.image_b, self.pts_a[idx], self.pts_b[idx], self.kp_a[idx], self.kp_b[idx], lab)

    def swapped(self) -> "PairMatches":
        lab = None if self.is_outlier is None else self.is_outlier.copy()
        return PairMatches(self.image_b, self.image_a, self.pts_b.copy(), self.pts_a.copy(), self.kp_b.copy(), self.kp_a.copy(), lab)


def group_matches(matches) -> dict[tuple[int, int], PairMatches]:
    """Group individual :class:`Match` records by unordered pair (stored with ``a < b``).

    Missing keypoint ids are replaced by the match's running index within its image.
    """
    buckets = defaultdict(list)
    for m in matches:
        if m.image_a < m.image_b:
            buckets[(m.image_a, m.image_b)].append((m.point_a, m.point_b, m.kp_a, m.kp_b))
        else:
            buckets[(m.image_b, m.image_a)].append((m.point_b, m.point_a, m.kp_b, m.kp_a))
    next_kp = defaultdict(lambda: 1 << 40)
    out = {}
    for key in sorted(buckets):
        rows = buckets[key]
        kp_a, kp_b = [], []
        for _, _, ka, kb in rows:
            if ka < 0:
                ka = next_kp[key[0]]
                next_kp[key[0]] += 1
            if kb < 0:
                kb = next_kp[key[1]]
                next_kp[key[1]] += 1
            kp_a.append(ka)
            kp_b.append(kb)
        out[key] = PairMatches(key[0], key[1], [r[0] for r in rows], [r[1] for r in rows], kp_a, kp_b)
    return out


MATCH_HEADER = "# image_a image_b xa ya xb yb kp_a kp_b"


def write_matches(path, pairs) -> None:
    """Write matches as text, one correspondence per line.

    ``image_a image_b xa ya xb yb kp_a kp_b`` with pixel coordinates printed with
    ``repr`` precision; ``#`` starts a comment line.
    """
    with open(path, "w") as fh:
        fh.write(MATCH_HEADER + "\n")
        for key in sorted(pairs):
            m = pairs[key]
            for k in range(len(m)):
                fh.write(
                    f"{m.image_a} {m.image_b} {float(m.pts_a[k, 0])!r} {float(m.pts_a[k, 1])!r} "
                    f"{float(m.pts_b[k, 0])!r} {float(m.pts_b[k, 1])!r} {m.kp_a[k]} {m.kp_b[k]}\n"
                )


def read_matches(path) -> list[Match]:
    """Parse the text format of :func:`write_matches`; keypoint columns are optional."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            f = line.split()
            if len(f) not in (6, 8):
                raise ValueError(f"{path}:{lineno}: expected 6 or 8 fields, got {len(f)}")
            ka, kb = (int(f[6]), int(f[7])) if len(f) == 8 else (-1, -1)
            out.append(Match(int(f[0]), int(f[1]), [float(f[2]), float(f[3])], [float(f[4]), float(f[5])], ka, kb))
    return out


# ---------------------------------------------------------------------------
# view graph


@dataclass
class ViewGraphEdge:
    i: int
    j: int
    F: np.ndarray | None = None
    R: np.ndarray | None = None  # R_ij
    t: np.ndarray | None = None  # unit t_ij
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    low_parallax: bool = False
    median_angle_deg: float = float("nan")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)

    @property
    def inlier_count(self) -> int:
        return len(self.inliers)


@dataclass
class ViewGraph:
    vertices: dict[int, CameraIntrinsics | None]
    edges: list[ViewGraphEdge]
    matches: dict[tuple[int, int], PairMatches] = field(default_factory=dict)

    def neighbours(self) -> dict[int, list[int]]:
        adj = {v: [] for v in self.vertices}
        for e in self.edges:
            adj[e.i].append(e.j)
            adj[e.j].append(e.i)
        return adj

    def components(self) -> list[list[int]]:
        adj = self.neighbours()
        seen, comps = set(), []
        for v in sorted(adj):
            if v in seen:
                continue
            stack, comp = [v], []
            seen.add(v)
            while stack:
                u = stack.pop()
                comp.append(u)
                for w in adj[u]:
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
            comps.append(sorted(comp))
        return comps

    def is_connected(self) -> bool:
        return len(self.components()) <= 1

    def largest_component(self) -> "ViewGraph":
        comps = self.components()
        if len(comps) <= 1:
            return self
        keep = set(max(comps, key=lambda c: (len(c), -c[0])))
        return ViewGraph(
            {v: k for v, k in self.vertices.items() if v in keep},
            [e for e in self.edges if e.i in keep],
            {p: m for p, m in self.matches.items() if p[0] in keep},
        )

    def edge(self, i, j) -> ViewGraphEdge:
        for e in self.edges:
            if e.pair == (i, j):
                return e
        raise KeyError((i, j))


def build_view_graph(matches, min_matches_per_pair: int = 16, intrinsics=None) -> ViewGraph:
    """One edge per unordered pair with at least ``min_matches_per_pair`` matches.

    ``matches`` is a list of :class:`Match` or a dict of :class:`PairMatches`.
    Edges carry no geometry yet.
    """
    if isinstance(matches, dict):
        pairs = {}
        for key in sorted(matches):
            m = matches[key]
            pairs[(m.image_a, m.image_b)] = m if m.image_a < m.image_b else m.swapped()
    else:
        matches = list(matches)
        if not matches:
            raise EmptyGraph("no matches given")
        pairs = group_matches(matches)
    kept = {p: m for p, m in sorted(pairs.items()) if len(m) >= min_matches_per_pair}
    if not kept:
        raise EmptyGraph(f"no image pair has >= {min_matches_per_pair} matches")
    verts = sorted({v for p in kept for v in p})
    intrinsics = intrinsics or {}
    return ViewGraph(
        {v: (intrinsics[v] if v in intrinsics else None) for v in verts},
        [ViewGraphEdge(i, j) for (i, j) in kept],
        kept,
    )


# ---------------------------------------------------------------------------
# fundamental matrix


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return T


def _homog(pts):
    return np.hstack([pts, np.ones((len(pts), 1))])


def eight_point(pa, pb):
    """Normalized 8-point fundamental matrix (rank 2) or None for degenerate input."""
    Ta, Tb = _hartley(pa), _hartley(pb)
    xa = _homog(pa) @ Ta.T
    xb = _homog(pb) @ Tb.T
    A = np.einsum("ni,nj->nij", xb, xa).reshape(len(pa), 9)
    _, s, Vt = np.linalg.svd(A)
    if len(s) < 8 or s[7] < 1e-10 * s[0]:
        return None
    F = Vt[-1].reshape(3, 3)
    U, s, Vt = np.linalg.svd(F)
    F = U @ np.diag([s[0], s[1], 0.0]) @ Vt
    F = Tb.T @ F @ Ta
    n = np.linalg.norm(F)
    return F / n if n > 0 else None


def sampson_error(F, pa, pb):
    """Sampson distance in pixels for ``x_b^T F x_a = 0``."""
    xa, xb = _homog(pa), _homog(pb)
    Fx = xa @ F.T
    Ftx = xb @ F
    num = np.einsum("ni,ni->n", xb, Fx)
    den = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Ftx[:, 0] ** 2 + Ftx[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def _ransac_iterations(inlier_ratio, sample_size, confidence):
    if inlier_ratio >= 1.0:
        return 1
    if inlier_ratio <= 0.0:
        return np.inf
    denom = np.log(1.0 - inlier_ratio**sample_size)
    return np.log(1.0 - confidence) / denom if denom < 0 else np.inf


def estimate_fundamental_ransac(
    pm: PairMatches, threshold_px: float = 1.0, max_iters: int = 1000, seed: int = 0, confidence: float = 0.999
):
    """Robust fundamental matrix of one pair: returns ``(F, inlier indices)``."""
    n = len(pm)
    if n < 8:
        raise DegenerateConfiguration(f"need >= 8 matches, got {n}")
    rng = np.random.default_rng(seed)
    th2 = threshold_px**2
    best, best_score = None, np.inf
    need, it, valid = max_iters, 0, 0
    while it < min(max_iters, need):
        it += 1
        idx = rng.choice(n, 8, replace=False)
        F = eight_point(pm.pts_a[idx], pm.pts_b[idx])
        if F is None:
            continue
        valid += 1
        e2 = sampson_error(F, pm.pts_a, pm.pts_b) ** 2
        score = np.minimum(e2, th2).sum()
        count = int((e2 < th2).sum())
        if score < best_score:
            best, best_score = F, score
            need = _ransac_iterations(count / n, 8, confidence)
    if best is None:
        raise DegenerateConfiguration("every sample was degenerate")
    inl = np.nonzero(sampson_error(best, pm.pts_a, pm.pts_b) < threshold_px)[0]
    if len(inl) >= 8:
        F = eight_point(pm.pts_a[inl], pm.pts_b[inl])
        if F is not None:
            inl2 = np.nonzero(sampson_error(F, pm.pts_a, pm.pts_b) < threshold_px)[0]
            if len(inl2) >= len(inl):
                best, inl = F, inl2
    return best, inl


# ---------------------------------------------------------------------------
# focal length from fundamental matrices


def _fetzer_residual(F, fa, fb, ppa, ppb):
    Ka = np.array([[fa, 0, ppa[0]], [0, fa, ppa[1]], [0, 0, 1.0]])
    Kb = np.array([[fb, 0, ppb[0]], [0, fb, ppb[1]], [0, 0, 1.0]])
    E = Kb.T @ F @ Ka
    s = np.linalg.svd(E, compute_uv=False)
    # ||E||^2 / (s1 s2) - 2 = (s1 - s2)^2 / (s1 s2); take its square root as the residual
    return (s[0] - s[1]) / np.sqrt(max(s[0] * s[1], 1e-300))


@dataclass
class FocalEdge:
    i: int
    j: int
    F: np.ndarray  # x_j^T F x_i = 0


def fetzer_objective(edges, focals, principal_points, cauchy_scale: float = 1.0) -> float:
    """Robust sum over edges of Cauchy(essential-ness residual^2)."""
    c2 = cauchy_scale**2
    total = 0.0
    for e in edges:
        r = _fetzer_residual(e.F, focals[e.i], focals[e.j], principal_points[e.i], principal_points[e.j])
        total += c2 * np.log1p(r * r / c2)
    return total


def estimate_focal_fetzer(
    edges,
    initial_focal,
    principal_points,
    shared_intrinsics: bool = True,
    calibrated: bool = False,
    cauchy_scale: float = 1.0,
    max_nfev: int = 500,
):
    """Focal lengths making ``K_j^T F_ij K_i`` as close to essential as possible.

    ``initial_focal`` and ``principal_points`` are dicts keyed by camera id (a
    scalar initial focal is broadcast). Returns a dict camera -> focal, clamped to
    ``[0.1, 10] * initial``. A coarse log-spaced scan of the shared focal seeds
    the robust least-squares refinement.
    """
    edges = list(edges)
    cams = sorted({c for e in edges for c in (e.i, e.j)} | set(principal_points))
    if np.isscalar(initial_focal):
        initial_focal = {c: float(initial_focal) for c in cams}
    if calibrated or not edges:
        return {c: float(initial_focal[c]) for c in cams}
    f0 = np.array([initial_focal[c] for c in cams])
    lo, hi = np.log(0.1 * f0), np.log(10.0 * f0)
    col = {c: k for k, c in enumerate(cams)}

    def residuals(logf):
        f = np.exp(logf)
        return np.array(
            [_fetzer_residual(e.F, f[col[e.i]], f[col[e.j]], principal_points[e.i], principal_points[e.j]) for e in edges]
        )

    # shared scan: one multiplier for every camera
    grid = np.linspace(np.log(0.1), np.log(10.0), 121)
    c2 = cauchy_scale**2
    costs = [np.sum(c2 * np.log1p(residuals(np.log(f0) + g) ** 2 / c2)) for g in grid]
    g0 = grid[int(np.argmin(costs))]

    kw = dict(loss="cauchy", f_scale=cauchy_scale, xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
    g_lo, g_hi = np.log(0.1), np.log(10.0)
    res = least_squares(
        lambda g: residuals(np.log(f0) + g[0]), [g0], bounds=([g_lo], [g_hi]), **kw
    )
    if res.status <= 0:
        raise NoConvergence("shared focal refinement did not converge")
    logf = np.log(f0) + res.x[0]
    if not shared_intrinsics:
        x0 = np.clip(logf, lo + 1e-12, hi - 1e-12)
        res = least_squares(residuals, x0, bounds=(lo, hi), **kw)
        if res.status <= 0:
            raise NoConvergence("per-camera focal refinement did not converge")
        logf = res.x
    f = np.clip(np.exp(logf), 0.1 * f0, 10.0 * f0)
    return {c: float(f[col[c]]) for c in cams}


# ---------------------------------------------------------------------------
# essential matrix: five-point solver


def _monomials(deg):
    return [m for m in itertools.product(range(deg + 1), repeat=3) if sum(m) == deg]


# cubic monomials eliminated by the action-matrix construction, then the basis
_CUBIC = [(3, 0, 0), (2, 1, 0), (1, 2, 0), (0, 3, 0), (2, 0, 1), (1, 1, 1), (0, 2, 1), (1, 0, 2), (0, 1, 2), (0, 0, 3)]
_BASIS = [(2, 0, 0), (1, 1, 0), (0, 2, 0), (1, 0, 1), (0, 1, 1), (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_ORDER3 = _CUBIC + _BASIS
_LIN = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_QUAD = sorted({tuple(np.add(a, b)) for a in _LIN for b in _LIN})


def _product_map(left, right, out):
    idx = {m: k for k, m in enumerate(out)}
    P = np.zeros((len(left) * len(right), len(out)))
    for a, ma in enumerate(left):
        for b, mb in enumerate(right):
            P[a * len(right) + b, idx[tuple(np.add(ma, mb))]] = 1.0
    return P


_P_LL = _product_map(_LIN, _LIN, _QUAD)  # linear x linear -> quadratic
_P_QL = _product_map(_QUAD, _LIN, _ORDER3)  # quadratic x linear -> cubic


def _mul_ll(a, b):
    return np.einsum("...a,...b->...ab", a, b).reshape(a.shape[:-1] + (16,)) @ _P_LL


def _mul_ql(q, lin):
    return np.einsum("...a,...b->...ab", q, lin).reshape(q.shape[:-1] + (len(_QUAD) * 4,)) @ _P_QL


def five_point(xa, xb):
    """Essential matrices consistent with 5 normalized correspondences (``xb^T E xa = 0``)."""
    xa = _homog(np.asarray(xa, float)[:, :2])
    xb = _homog(np.asarray(xb, float)[:, :2])
    A = np.einsum("ni,nj->nij", xb, xa).reshape(len(xa), 9)
    _, _, Vt = np.linalg.svd(A)
    basis = Vt[-4:]  # E = x X + y Y + z Z + W
    L = np.moveaxis(basis.reshape(4, 3, 3), 0, -1)  # (3, 3, 4) linear polys in (x, y, z, 1)

    EEt = np.zeros((3, 3, len(_QUAD)))
    for i in range(3):
        for k in range(3):
            EEt[i, k] = sum(_mul_ll(L[i, j], L[k, j]) for j in range(3))
    tr = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]
    eqs = []
    for i in range(3):
        for l in range(3):
            c = sum(_mul_ql(EEt[i, k], L[k, l]) for k in range(3))
            eqs.append(2 * c - _mul_ql(tr, L[i, l]))
    cof0 = _mul_ll(L[1, 1], L[2, 2]) - _mul_ll(L[1, 2], L[2, 1])
    cof1 = _mul_ll(L[1, 0], L[2, 2]) - _mul_ll(L[1, 2], L[2, 0])
    cof2 = _mul_ll(L[1, 0], L[2, 1]) - _mul_ll(L[1, 1], L[2, 0])
    eqs.append(_mul_ql(cof0, L[0, 0]) - _mul_ql(cof1, L[0, 1]) + _mul_ql(cof2, L[0, 2]))
    M10 = np.array(eqs)  # (10, 20)

    try:
        B = np.linalg.solve(M10[:, :10], M10[:, 10:])
    except np.linalg.LinAlgError:
        return []
    act = np.zeros((10, 10))
    act[:6] = -B[[0, 1, 2, 4, 5, 7]]
    act[6, 0] = act[7, 1] = act[8, 3] = act[9, 6] = 1.0
    w, V = np.linalg.eig(act)
    out = []
    for k in range(10):
        if abs(w[k].imag) > 1e-8 * max(1.0, abs(w[k].real)):
            continue
        v = V[:, k].real
        if abs(v[9]) < 1e-12:
            continue
        x, y, z = v[6:9] / v[9]
        E = (x * basis[0] + y * basis[1] + z * basis[2] + basis[3]).reshape(3, 3)
        out.append(E / np.linalg.norm(E))
    return out


def essential_eight_point(xa, xb):
    """Linear essential matrix from >= 8 normalized correspondences (debug fallback)."""
    xa, xb = _homog(xa[:, :2]), _homog(xb[:, :2])
    A = np.einsum("ni,nj->nij", xb, xa).reshape(len(xa), 9)
    _, s, Vt = np.linalg.svd(A)
    if len(s) < 8 or s[7] < 1e-12 * s[0]:
        return []
    U, _, Vt2 = np.linalg.svd(Vt[-1].reshape(3, 3))
    E = U @ np.diag([1.0, 1.0, 0.0]) @ Vt2
    return [E / np.linalg.norm(E)]


def decompose_essential(E):
    """The four ``(R, t)`` candidates of an essential matrix, ``t`` unit length."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    Ra, Rb = U @ W @ Vt, U @ W.T @ Vt
    return [(Ra, t), (Ra, -t), (Rb, t), (Rb, -t)]


def triangulate_pair(R, t, xa, xb):
    """Linear triangulation in camera-a coordinates from normalized points.

    Returns ``(X_a, depth_a, depth_b)``; camera a is ``[I | 0]``, camera b ``[R | t]``.
    """
    xa, xb = _homog(xa[:, :2]), _homog(xb[:, :2])
    n = len(xa)
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    A = np.empty((n, 4, 4))
    A[:, 0] = xa[:, [0]] * P1[2] - P1[0]
    A[:, 1] = xa[:, [1]] * P1[2] - P1[1]
    A[:, 2] = xb[:, [0]] * P2[2] - P2[0]
    A[:, 3] = xb[:, [1]] * P2[2] - P2[1]
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1]
    w = Xh[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / w[:, None]
    da = X[:, 2]
    db = X @ R[2] + t[2]
    return X, da, db


def _cheirality_votes(E, xa, xb):
    votes = []
    for R, t in decompose_essential(E):
        _, da, db = triangulate_pair(R, t, xa, xb)
        ok = np.isfinite(da) & (da > 0) & (db > 0)
        votes.append(int(ok.sum()))
    return votes


def _normalize(K: CameraIntrinsics, pts):
    return (pts - [K.cx, K.cy]) / [K.fx, K.fy]


def _essential_to_fundamental(E, Ka, Kb):
    return Kb.K_inv.T @ E @ Ka.K_inv


def _tangent_basis(t):
    a = np.eye(3)[int(np.argmin(np.abs(t)))]
    u = np.cross(t, a)
    u /= np.linalg.norm(u)
    return np.stack([u, np.cross(t, u)], axis=1)


def _refine_relative_pose(R, t, Ka, Kb, pa, pb):
    """Least-squares polish of ``(R, t)`` on the signed Sampson residual."""
    B = _tangent_basis(t)
    xa, xb = _homog(pa), _homog(pb)

    def pose(p):
        R1 = so3_exp(p[:3]) @ R
        t1 = t + B @ p[3:]
        return R1, t1 / np.linalg.norm(t1)

    def resid(p):
        R1, t1 = pose(p)
        F = _essential_to_fundamental(hat(t1) @ R1, Ka, Kb)
        Fx = xa @ F.T
        Ftx = xb @ F
        num = np.einsum("ni,ni->n", xb, Fx)
        den = Fx[:, 0] ** 2 + Fx[:, 1] ** 2 + Ftx[:, 0] ** 2 + Ftx[:, 1] ** 2
        return num / np.sqrt(np.maximum(den, 1e-300))

    res = least_squares(resid, np.zeros(5), xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=50)
    return pose(res.x)


def estimate_relative_pose(
    pm: PairMatches,
    Ka: CameraIntrinsics,
    Kb: CameraIntrinsics,
    threshold_px: float = 1.0,
    max_iters: int = 1000,
    seed: int = 0,
    confidence: float = 0.999,
    use_eight_point: bool = False,
    refine: bool = True,
    min_parallax_deg: float = 1.0,
) -> ViewGraphEdge:
    """Relative pose of ``pm.image_b`` w.r.t. ``pm.image_a`` by essential-matrix RANSAC.

    Hypotheses come from the five-point solver (or the linear 8-point solver when
    ``use_eight_point``); inliers are those with Sampson distance below
    ``threshold_px``. The winning essential matrix is decomposed and the
    candidate with most points in front of both cameras is returned.
    """
    n = len(pm)
    sample = 8 if use_eight_point else 5
    if n < sample:
        raise DegenerateConfiguration(f"need >= {sample} matches, got {n}")
    xa, xb = _normalize(Ka, pm.pts_a), _normalize(Kb, pm.pts_b)
    solver = essential_eight_point if use_eight_point else five_point
    rng = np.random.default_rng(seed)
    th2 = threshold_px**2
    best_E, best_score, need, it = None, np.inf, max_iters, 0
    while it < min(max_iters, need):
        it += 1
        idx = rng.choice(n, sample, replace=False)
        for E in solver(xa[idx], xb[idx]):
            e2 = sampson_error(_essential_to_fundamental(E, Ka, Kb), pm.pts_a, pm.pts_b) ** 2
            score = np.minimum(e2, th2).sum()
            if score < best_score:
                best_E, best_score = E, score
                need = _ransac_iterations((e2 < th2).mean(), sample, confidence)
    if best_E is None:
        raise DegenerateConfiguration("no essential matrix hypothesis")
    inl = np.nonzero(sampson_error(_essential_to_fundamental(best_E, Ka, Kb), pm.pts_a, pm.pts_b) < threshold_px)[0]
    if len(inl) < sample:
        raise DegenerateConfiguration("too few inliers")

    votes = _cheirality_votes(best_E, xa[inl], xb[inl])
    order = np.argsort(votes)[::-1]
    if votes[order[0]] - votes[order[1]] < 2:
        raise CheiralityAmbiguous(f"cheirality votes {votes}")
    R, t = decompose_essential(best_E)[order[0]]
    for _ in range(3 if refine else 0):
        R, t = _refine_relative_pose(R, t, Ka, Kb, pm.pts_a[inl], pm.pts_b[inl])
        F = _essential_to_fundamental(hat(t) @ R, Ka, Kb)
        new = np.nonzero(sampson_error(F, pm.pts_a, pm.pts_b) < threshold_px)[0]
        if np.array_equal(new, inl):
            break
        inl = new
    F = _essential_to_fundamental(hat(t) @ R, Ka, Kb)
    F = F / np.linalg.norm(F)

    X, da, db = triangulate_pair(R, t, xa[inl], xb[inl])
    cb = -R.T @ t
    ok = np.isfinite(da) & (da > 0) & (db > 0)
    if ok.any():
        r1 = X[ok] / np.linalg.norm(X[ok], axis=1, keepdims=True)
        r2 = X[ok] - cb
        r2 /= np.linalg.norm(r2, axis=1, keepdims=True)
        med = float(np.degrees(np.median(np.arccos(np.clip(np.sum(r1 * r2, axis=1), -1, 1)))))
    else:
        med = 0.0
    return ViewGraphEdge(pm.image_a, pm.image_b, F, R, t, inl.astype(np.int64), med < min_parallax_deg, med)


@dataclass(frozen=True)
class TwoViewOptions:
    min_matches_per_pair: int = 16
    threshold_px: float = 1.0
    max_iters: int = 1000
    confidence: float = 0.999
    use_eight_point: bool = False
    min_parallax_deg: float = 1.0


def estimate_two_view_geometry(graph: ViewGraph, intrinsics, options: TwoViewOptions = TwoViewOptions(), seed: int = 0):
    """Estimate every edge's relative pose; drops edges that fail or keep too few inliers.

    Pairs are independent and may run on several threads (see ``SFMSPLAT_NUM_THREADS``);
    each pair gets its own seed so results do not depend on scheduling.
    """

    def work(e):
        pm = graph.matches[e.pair]
        try:
            return estimate_relative_pose(
                pm,
                intrinsics[e.i],
                intrinsics[e.j],
                options.threshold_px,
                options.max_iters,
                seed=(seed * 1_000_003 + e.i * 7919 + e.j) & 0x7FFFFFFF,
                confidence=options.confidence,
                use_eight_point=options.use_eight_point,
                min_parallax_deg=options.min_parallax_deg,
            )
        except (DegenerateConfiguration, CheiralityAmbiguous):
            return None

    nt = num_threads()
    if nt > 1:
        with ThreadPoolExecutor(nt) as ex:
            results = list(ex.map(work, graph.edges))
    else:
        results = [work(e) for e in graph.edges]
    edges = [r for r in results if r is not None and r.inlier_count >= options.min_matches_per_pair]
    if not edges:
        raise EmptyGraph("no edge survived two-view estimation")
    verts = sorted({v for e in edges for v in e.pair})
    g = ViewGraph({v: intrinsics[v] for v in verts}, edges, {e.pair: graph.matches[e.pair] for e in edges})
    return g.largest_component()


def inlier_matches(graph: ViewGraph) -> list[PairMatches]:
    """Inlier correspondences of every edge, in edge order (input to track building)."""
    return [graph.matches[e.pair].subset(e.inliers) for e in graph.edges]
