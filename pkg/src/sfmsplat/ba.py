"""Robust sparse bundle adjustment.

Minimizes ``sum rho_Huber(||project(K_i, T_i, X_k) - x_ik||^2)`` over camera
poses (left twists ``T <- exp(d) T``), points and optionally one focal length
shared by all cameras. Levenberg-Marquardt with IRLS weights; point blocks are
eliminated with a Schur complement, and the reduced camera system is solved by
dense Cholesky or, for large camera counts, by block-Jacobi preconditioned CG.

Gauge: the anchor pose is never touched; for the scale camera the translational
twist component along its largest translation coordinate is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import NonPositiveDepth, NumericalFailure, TooFewObservations
from .geomcore import DEPTH_EPSILON, CameraIntrinsics, Pose, RobustKernel, robust_loss, se3_compose
from .tracks import Track


@dataclass
class BAOptions:
    huber_delta: float = 2.0
    filter_thresholds: tuple = (8.0, 4.0, 2.0)
    optimize_intrinsics: bool = False
    max_lm_iters: int = 50
    tol: float = 1e-12  # relative decrease of the robust cost
    lambda_init: float = 1e-4
    lambda_max: float = 1e16
    dense_max_cameras: int = 300
    max_filtered_fraction: float = 0.5
    anchor: int | None = None
    scale_camera: int | None = None

    def __post_init__(self):
        th = list(self.filter_thresholds)
        if any(b >= a for a, b in zip(th, th[1:])):
            raise ValueError("filter thresholds must be strictly decreasing")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")

    @property
    def rounds(self) -> int:
        return len(self.filter_thresholds)


@dataclass
class RoundStats:
    round: int
    observations: int
    rms_px: float
    filtered: int
    lm_iterations: int


@dataclass
class Reconstruction:
    intrinsics: dict[int, CameraIntrinsics]
    poses: dict[int, Pose]
    tracks: list[Track]
    history: list[RoundStats] = field(default_factory=list)

    def copy(self) -> "Reconstruction":
        return Reconstruction(dict(self.intrinsics), dict(self.poses), [t.copy() for t in self.tracks], list(self.history))

    @property
    def cameras(self) -> list[int]:
        return sorted(self.poses)

    @property
    def n_observations(self) -> int:
        return sum(len(t) for t in self.tracks)

    def residuals(self) -> np.ndarray:
        """(n_obs, 2) reprojection residuals in track order (nan behind the camera)."""
        out = []
        for t in self.tracks:
            for o in t.observations:
                try:
                    out.append(reprojection_residual(self.intrinsics[o.image], self.poses[o.image], t.point, o.uv))
                except NonPositiveDepth:
                    out.append(np.full(2, np.nan))
        return np.array(out).reshape(-1, 2)

    def rms(self) -> float:
        r = self.residuals()
        if len(r) == 0:
            return 0.0
        return float(np.sqrt(np.nanmean(np.sum(r**2, axis=1))))


# ---------------------------------------------------------------------------
# residual and Jacobians


def reprojection_residual(K: CameraIntrinsics, T: Pose, X, x_obs) -> np.ndarray:
    p = T.R @ np.asarray(X, dtype=float) + T.t
    if p[2] <= DEPTH_EPSILON:
        raise NonPositiveDepth(f"depth {p[2]:.3g}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy]) - np.asarray(x_obs, dtype=float)


def reprojection_jacobians(K: CameraIntrinsics, T: Pose, X):
    """``(J_twist (2x6), J_point (2x3), J_focal (2x1))`` of the residual.

    The twist is a left perturbation ``exp(d) T`` ordered (rotation, translation);
    the focal column assumes ``fx = fy = f``.
    """
    p = T.R @ np.asarray(X, dtype=float) + T.t
    if p[2] <= DEPTH_EPSILON:
        raise NonPositiveDepth(f"depth {p[2]:.3g}")
    Jp = _dproj(K.fx, K.fy, p[None])[0]
    Jpose = np.hstack([Jp @ -_hat(p), Jp])
    return Jpose, Jp @ T.R, (p[:2] / p[2]).reshape(2, 1)


def _hat(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _dproj(fx, fy, p):
    z = p[:, 2]
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * p[:, 0] / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * p[:, 1] / z**2
    return J


# ---------------------------------------------------------------------------
# vectorized problem


class _Problem:
    """Flat arrays for one reconstruction; observations grouped by point."""

    def __init__(self, recon: Reconstruction, options: BAOptions):
        self.cams = recon.cameras
        col = {c: k for k, c in enumerate(self.cams)}
        cam, pt, uv = [], [], []
        for p, t in enumerate(recon.tracks):
            for o in t.observations:
                cam.append(col[o.image])
                pt.append(p)
                uv.append(o.uv)
        self.cam = np.array(cam, dtype=np.int64)
        self.pt = np.array(pt, dtype=np.int64)
        self.uv = np.array(uv, dtype=float).reshape(-1, 2)
        self.n_cam, self.n_pt = len(self.cams), len(recon.tracks)
        self.kernel = RobustKernel("huber", options.huber_delta)
        self.with_focal = options.optimize_intrinsics

        anchor = options.anchor if options.anchor is not None else self.cams[0]
        self.anchor = col[anchor]
        # a camera without observations has an all-zero Hessian block; it stays where it is
        seen = np.bincount(self.cam, minlength=self.n_cam) > 0
        if options.scale_camera is not None:
            far = col[options.scale_camera]
        else:
            c0 = recon.poses[anchor].center
            far = max(
                (k for k in range(self.n_cam) if k != self.anchor and seen[k]),
                key=lambda k: (np.linalg.norm(recon.poses[self.cams[k]].center - c0), -k),
                default=None,
            )
        self.far = far

        # camera-side parameter layout: 6 per camera, then the shared focal
        self.n_cparam = 6 * self.n_cam + (1 if self.with_focal else 0)
        frozen = set(range(6 * self.anchor, 6 * self.anchor + 6))
        for k in np.nonzero(~seen)[0]:
            frozen.update(range(6 * k, 6 * k + 6))
        if far is not None:
            t_far = recon.poses[self.cams[far]].t
            frozen.add(6 * far + 3 + int(np.argmax(np.abs(t_far))))
        self.free = np.array([k for k in range(self.n_cparam) if k not in frozen], dtype=np.int64)

        # per-observation camera-side column indices
        idx = self.cam[:, None] * 6 + np.arange(6)[None]
        if self.with_focal:
            idx = np.hstack([idx, np.full((len(self.cam), 1), 6 * self.n_cam)])
        self.cidx = idx

        starts = np.searchsorted(self.pt, np.arange(self.n_pt))
        ends = np.append(starts[1:], len(self.pt))
        pa, pb = [], []
        for s, e in zip(starts, ends):
            r = np.arange(s, e)
            pa.append(np.repeat(r, e - s))
            pb.append(np.tile(r, e - s))
        self.pair_a = np.concatenate(pa) if pa else np.zeros(0, dtype=np.int64)
        self.pair_b = np.concatenate(pb) if pb else np.zeros(0, dtype=np.int64)


@dataclass
class _State:
    R: np.ndarray  # (n_cam, 3, 3)
    t: np.ndarray  # (n_cam, 3)
    X: np.ndarray  # (n_pt, 3)
    fx: np.ndarray  # (n_cam,)
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray


def _state_from(recon: Reconstruction, prob: _Problem) -> _State:
    Ks = [recon.intrinsics[c] for c in prob.cams]
    Ts = [recon.poses[c] for c in prob.cams]
    X = np.array([t.point for t in recon.tracks], dtype=float).reshape(-1, 3)
    return _State(
        np.array([T.R for T in Ts]).reshape(-1, 3, 3),
        np.array([T.t for T in Ts]).reshape(-1, 3),
        X,
        np.array([K.fx for K in Ks]),
        np.array([K.fy for K in Ks]),
        np.array([K.cx for K in Ks]),
        np.array([K.cy for K in Ks]),
    )


def _project(prob: _Problem, s: _State):
    p = np.einsum("nij,nj->ni", s.R[prob.cam], s.X[prob.pt]) + s.t[prob.cam]
    z = p[:, 2]
    uv = np.stack([s.fx[prob.cam] * p[:, 0] / z + s.cx[prob.cam], s.fy[prob.cam] * p[:, 1] / z + s.cy[prob.cam]], axis=1)
    return p, uv - prob.uv


def _cost(prob: _Problem, s: _State) -> float:
    p, r = _project(prob, s)
    if np.any(p[:, 2] <= DEPTH_EPSILON):
        return np.inf
    v, _ = robust_loss(prob.kernel, np.sum(r * r, axis=1))
    return float(np.sum(v))


def _linearize(prob: _Problem, s: _State):
    p, r = _project(prob, s)
    _, w = robust_loss(prob.kernel, np.sum(r * r, axis=1))
    Jp = _dproj(s.fx[prob.cam], s.fy[prob.cam], p)
    ph = np.zeros((len(p), 3, 3))
    ph[:, 0, 1], ph[:, 0, 2], ph[:, 1, 2] = -p[:, 2], p[:, 1], -p[:, 0]
    ph[:, 1, 0], ph[:, 2, 0], ph[:, 2, 1] = p[:, 2], -p[:, 1], p[:, 0]
    Jc = np.concatenate([-Jp @ ph, Jp], axis=2)
    if prob.with_focal:
        Jc = np.concatenate([Jc, (p[:, :2] / p[:, 2:3])[:, :, None]], axis=2)
    Jx = Jp @ s.R[prob.cam]
    return r, w, Jc, Jx


def _assemble(prob: _Problem, r, w, Jc, Jx):
    """Blocks of the weighted normal equations ``H = J^T W J``, ``g = J^T W r``."""
    nc = prob.n_cparam
    d = Jc.shape[2]
    wJc = Jc * w[:, None, None]
    wJx = Jx * w[:, None, None]
    Ucc = np.einsum("nki,nkj->nij", wJc, Jc)
    U = np.bincount(
        (prob.cidx[:, :, None] * nc + prob.cidx[:, None, :]).ravel(), weights=Ucc.ravel(), minlength=nc * nc
    ).reshape(nc, nc)
    gc = np.bincount(prob.cidx.ravel(), weights=np.einsum("nki,nk->ni", wJc, r).ravel(), minlength=nc)
    V = np.zeros((prob.n_pt, 3, 3))
    np.add.at(V, prob.pt, np.einsum("nki,nkj->nij", wJx, Jx))
    gx = np.zeros((prob.n_pt, 3))
    np.add.at(gx, prob.pt, np.einsum("nki,nk->ni", wJx, r))
    W = np.einsum("nki,nkj->nij", wJc, Jx)  # (n_obs, d, 3)
    return U, gc, V, gx, W, d


def _damp_points(V, lam):
    return V + lam * np.einsum("pii->pi", V)[:, :, None] * np.eye(3)[None]


def _reduced_system(prob: _Problem, U, gc, V, gx, W, lam):
    nc = prob.n_cparam
    Vd = _damp_points(V, lam)
    Vinv = np.linalg.inv(Vd)
    S = U.copy()
    S[np.diag_indices(nc)] += lam * np.diag(U)
    if len(prob.pair_a):
        blocks = np.einsum("nij,njk,nlk->nil", W[prob.pair_a], Vinv[prob.pt[prob.pair_a]], W[prob.pair_b])
        flat = (prob.cidx[prob.pair_a][:, :, None] * nc + prob.cidx[prob.pair_b][:, None, :]).ravel()
        S -= np.bincount(flat, weights=blocks.ravel(), minlength=nc * nc).reshape(nc, nc)
    corr = np.einsum("nij,njk,nk->ni", W, Vinv[prob.pt], gx[prob.pt])
    rhs = -gc + np.bincount(prob.cidx.ravel(), weights=corr.ravel(), minlength=nc)
    return S, rhs, Vinv


def _solve_cameras(S, rhs, dense_max, n_cam):
    if n_cam <= dense_max:
        L = np.linalg.cholesky(S)  # raises LinAlgError when not positive definite
        return np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    n = len(rhs)
    diag = np.diag(S).copy()
    if np.any(diag <= 0):
        raise np.linalg.LinAlgError("non-positive diagonal")
    M = LinearOperator((n, n), matvec=lambda v: v / diag)
    x, info = cg(S, rhs, M=M, rtol=1e-12, maxiter=10 * n)
    if info != 0:
        raise np.linalg.LinAlgError("PCG did not converge")
    return x


def schur_step(prob: _Problem, s: _State, lam: float, dense_max: int = 300):
    """LM step ``(d_cam, d_points)`` via point elimination; ``d_cam`` over all camera-side parameters."""
    r, w, Jc, Jx = _linearize(prob, s)
    U, gc, V, gx, W, _ = _assemble(prob, r, w, Jc, Jx)
    S, rhs, Vinv = _reduced_system(prob, U, gc, V, gx, W, lam)
    free = prob.free
    dz = np.zeros(prob.n_cparam)
    dz[free] = _solve_cameras(S[np.ix_(free, free)], rhs[free], dense_max, prob.n_cam)
    back = np.zeros((prob.n_pt, 3))
    np.add.at(back, prob.pt, np.einsum("nij,ni->nj", W, dz[prob.cidx]))
    dx = np.einsum("pij,pj->pi", Vinv, -gx - back)
    return dz, dx


def dense_step(prob: _Problem, s: _State, lam: float):
    """The same LM step from the full normal equations (reference for small problems)."""
    r, w, Jc, Jx = _linearize(prob, s)
    nc = prob.n_cparam
    n = nc + 3 * prob.n_pt
    J = np.zeros((2 * len(r), n))
    rows = np.arange(len(r))
    for k in range(Jc.shape[2]):
        J[2 * rows, prob.cidx[:, k]] = Jc[:, 0, k]
        J[2 * rows + 1, prob.cidx[:, k]] = Jc[:, 1, k]
    for k in range(3):
        J[2 * rows, nc + 3 * prob.pt + k] = Jx[:, 0, k]
        J[2 * rows + 1, nc + 3 * prob.pt + k] = Jx[:, 1, k]
    wr = np.repeat(w, 2)
    H = J.T @ (J * wr[:, None])
    g = J.T @ (wr * r.ravel())
    H[np.diag_indices(n)] += lam * np.diag(H).copy()
    keep = np.concatenate([prob.free, nc + np.arange(3 * prob.n_pt)])
    sol = np.zeros(n)
    sol[keep] = np.linalg.solve(H[np.ix_(keep, keep)], -g[keep])
    return sol[:nc], sol[nc:].reshape(-1, 3)


def _apply(prob: _Problem, s: _State, dz, dx) -> _State:
    R = s.R.copy()
    t = s.t.copy()
    for k in range(prob.n_cam):
        d = dz[6 * k : 6 * k + 6]
        if not np.any(d):
            continue
        T = se3_compose(Pose(s.R[k], s.t[k]), d)
        R[k], t[k] = T.R, T.t
    fx, fy = s.fx, s.fy
    if prob.with_focal:
        fx = fx + dz[-1]
        fy = fy + dz[-1]
    return _State(R, t, s.X + dx, fx, fy, s.cx, s.cy)


def _write_back(recon: Reconstruction, prob: _Problem, s: _State) -> Reconstruction:
    out = recon.copy()
    for k, c in enumerate(prob.cams):
        if k != prob.anchor:
            out.poses[c] = Pose(s.R[k], s.t[k])
        if prob.with_focal:
            K = recon.intrinsics[c]
            out.intrinsics[c] = CameraIntrinsics(float(s.fx[k]), float(s.fy[k]), K.cx, K.cy, K.width, K.height)
    for p, t in enumerate(out.tracks):
        t.point = s.X[p].copy()
    return out


@dataclass
class LMReport:
    iterations: int
    costs: list[float]
    weights: np.ndarray


def bundle_adjust(recon: Reconstruction, options: BAOptions = BAOptions(), report: list | None = None) -> Reconstruction:
    """Robust LM bundle adjustment. Returns a new reconstruction; the input is not modified.

    If ``report`` is a list, an :class:`LMReport` (accepted costs, final IRLS weights) is appended.
    """
    if options.optimize_intrinsics:
        fs = {(recon.intrinsics[c].fx, recon.intrinsics[c].fy) for c in recon.cameras}
        if len(fs) != 1 or len({v for f in fs for v in f}) != 1:
            raise ValueError("shared-focal refinement needs identical fx = fy on every camera")
    if not recon.tracks:
        return recon.copy()
    prob = _Problem(recon, options)
    s = _state_from(recon, prob)
    cost = _cost(prob, s)
    if not np.isfinite(cost):
        raise NonPositiveDepth("an observation is behind its camera before BA")
    costs = [cost]
    lam = options.lambda_init
    it = 0
    n_obs = len(prob.cam)
    while it < options.max_lm_iters and cost > 1e-24 * n_obs:
        it += 1
        accepted = False
        while lam <= options.lambda_max:
            try:
                dz, dx = schur_step(prob, s, lam, options.dense_max_cameras)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = _apply(prob, s, dz, dx)
            new = _cost(prob, cand)
            if new < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            if lam > options.lambda_max and len(costs) == 1 and cost > 1e-12 * n_obs:
                try:
                    schur_step(prob, s, options.lambda_max, options.dense_max_cameras)
                except np.linalg.LinAlgError as exc:
                    raise NumericalFailure("reduced camera system not positive definite") from exc
            break
        rel = (cost - new) / cost
        s, cost = cand, new
        costs.append(cost)
        lam = max(lam * 0.5, 1e-12)
        if rel < options.tol:
            break
    out = _write_back(recon, prob, s)
    if report is not None:
        _, r = _project(prob, s)
        report.append(LMReport(len(costs) - 1, costs, robust_loss(prob.kernel, np.sum(r * r, axis=1))[1]))
    return out


def _drop_behind(recon: Reconstruction) -> int:
    removed = 0
    for t in recon.tracks:
        keep = []
        for o in t.observations:
            T = recon.poses[o.image]
            if (T.R @ t.point + T.t)[2] > DEPTH_EPSILON:
                keep.append(o)
        removed += len(t.observations) - len(keep)
        t.observations = keep
    recon.tracks = [t for t in recon.tracks if len(t) >= 2]
    return removed


def _refine_point(recon: Reconstruction, t: Track, iters: int = 10) -> None:
    """Gauss-Newton on one point with poses fixed (used after dropping an observation)."""
    X = np.asarray(t.point, dtype=float).copy()
    for _ in range(iters):
        H = np.zeros((3, 3))
        g = np.zeros(3)
        try:
            for o in t.observations:
                K, T = recon.intrinsics[o.image], recon.poses[o.image]
                r = reprojection_residual(K, T, X, o.uv)
                J = reprojection_jacobians(K, T, X)[1]
                H += J.T @ J
                g += J.T @ r
            dx = np.linalg.solve(H, -g)
        except (NonPositiveDepth, np.linalg.LinAlgError):
            return
        X = X + dx
        if np.abs(dx).max() < 1e-12 * max(1.0, np.abs(X).max()):
            break
    t.point = X


def _track_errors(recon: Reconstruction, t: Track, X=None) -> np.ndarray:
    X = t.point if X is None else X
    out = []
    for o in t.observations:
        try:
            r = reprojection_residual(recon.intrinsics[o.image], recon.poses[o.image], X, o.uv)
            out.append(np.hypot(r[0], r[1]))
        except NonPositiveDepth:
            out.append(np.inf)
    return np.array(out)


def _triangulate(recon: Reconstruction, observations) -> np.ndarray | None:
    """Linear (DLT) triangulation; ``None`` for a degenerate configuration."""
    A = []
    for o in observations:
        P = recon.intrinsics[o.image].K @ recon.poses[o.image].matrix()[:3]
        A.append(o.uv[0] * P[2] - P[0])
        A.append(o.uv[1] * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.array(A))
    h = Vt[-1]
    if abs(h[3]) < 1e-12 * np.abs(h).max():
        return None
    return h[:3] / h[3]


def _consensus(recon: Reconstruction, t: Track, threshold_px: float) -> list[int]:
    """Observation indices agreeing with the best two-view triangulation of the track.

    Every pair is tried; the pair explaining most observations within the
    threshold wins. Ties (a two-view fit cannot see errors along the epipolar
    line) go to the set that the current robust estimate of the point fits best.
    """
    current = _track_errors(recon, t)
    best, best_key = [], (0, np.inf)
    obs = t.observations
    for a in range(len(obs)):
        for b in range(a + 1, len(obs)):
            X = _triangulate(recon, [obs[a], obs[b]])
            if X is None:
                continue
            probe = Track(t.id, [obs[a], obs[b]], X)
            _refine_point(recon, probe)
            inl = np.nonzero(_track_errors(recon, t, probe.point) <= threshold_px)[0]
            key = (len(inl), float(current[inl].sum()) if len(inl) else np.inf)
            if key[0] > best_key[0] or (key[0] == best_key[0] and key[1] < best_key[1]):
                best, best_key = inl.tolist(), key
    return best


def filter_observations(recon: Reconstruction, threshold_px: float) -> int:
    """Drop observations with reprojection error above ``threshold_px`` (in place).

    A track with any observation over the threshold is re-triangulated from its
    best-supported pair of observations (so a gross outlier cannot drag good
    observations of the same track over the threshold), refit on the agreeing
    observations, and then filtered. Tracks left with fewer than two
    observations are deleted. Returns the number of observations removed
    (including those of deleted tracks).
    """
    before = recon.n_observations
    _drop_behind(recon)
    for t in recon.tracks:
        if _track_errors(recon, t).max() <= threshold_px:
            continue
        keep = _consensus(recon, t, threshold_px) if len(t) >= 3 else []
        if len(keep) < 2:
            t.observations = [o for o, e in zip(t.observations, _track_errors(recon, t)) if e <= threshold_px]
            continue
        t.observations = [t.observations[k] for k in keep]
        _refine_point(recon, t)
        t.observations = [o for o, e in zip(t.observations, _track_errors(recon, t)) if e <= threshold_px]
    recon.tracks = [t for t in recon.tracks if len(t) >= 2]
    return before - recon.n_observations


def iterate_ba_with_filtering(recon: Reconstruction, options: BAOptions = BAOptions()) -> Reconstruction:
    """Bundle adjustment interleaved with tightening outlier filtering, then a final polish."""
    cur = recon.copy()
    initial = cur.n_observations
    _drop_behind(cur)
    history = []
    for k, th in enumerate(options.filter_thresholds):
        rep = []
        cur = bundle_adjust(cur, options, rep)
        removed = filter_observations(cur, th)
        if initial - cur.n_observations > options.max_filtered_fraction * initial:
            raise TooFewObservations(
                f"{initial - cur.n_observations} of {initial} observations filtered by round {k + 1}"
            )
        history.append(RoundStats(k + 1, cur.n_observations, cur.rms(), removed, rep[0].iterations))
    rep = []
    cur = bundle_adjust(cur, options, rep)
    history.append(RoundStats(len(options.filter_thresholds) + 1, cur.n_observations, cur.rms(), 0, rep[0].iterations))
    cur.history = history
    return cur
