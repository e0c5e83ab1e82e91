"""CPU Gaussian splat renderer with analytic gradients.

The forward model is the usual perspective EWA splat: a 3D covariance
``Rg S S Rg^T`` is pushed through the camera rotation and the Jacobian of the
perspective division, primitives are sorted by camera depth (index breaks
ties) and composited front to back over a black background.

Gradients are written out by hand: the per-pixel compositing adjoint lives in
:mod:`sfmsplat._raster`, the projection adjoint is vectorized numpy here. Pose
gradients are returned for the left twist ``delta`` in ``exp(delta) * T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from . import _raster
from .errors import TooFewPoints
from .geomcore import CameraIntrinsics, Pose, se3_compose, se3_left_jacobian

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


@dataclass
class GaussianSet:
    means: np.ndarray  # (N, 3) world
    log_scales: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) w, x, y, z; normalized on use
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, (degree+1)^2, 3)

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=float).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(n)
        sh = np.asarray(self.sh, dtype=float)
        # an empty set cannot infer the coefficient axis from -1
        self.sh = sh.reshape(n, -1, 3) if n else sh.reshape(0, sh.shape[1] if sh.ndim == 3 else 1, 3)
        k = self.sh.shape[1]
        if k not in (1, 4, 9, 16):
            raise ValueError(f"unsupported SH coefficient count {k}")

    def __len__(self):
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def base_colors(self) -> np.ndarray:
        return np.clip(SH_C0 * self.sh[:, 0, :] + 0.5, 0.0, 1.0)

    @classmethod
    def empty(cls, sh_degree=0) -> "GaussianSet":
        k = (sh_degree + 1) ** 2
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, k, 3)))

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.means.copy(), self.log_scales.copy(), self.quats.copy(), self.opacity_logits.copy(), self.sh.copy()
        )

    def params(self) -> dict:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "quats": self.quats,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }

    def with_sh_degree(self, degree: int) -> "GaussianSet":
        k = (degree + 1) ** 2
        sh = np.zeros((len(self), k, 3))
        m = min(k, self.sh.shape[1])
        sh[:, :m] = self.sh[:, :m]
        return replace(self.copy(), sh=sh)


def init_gaussians_from_points(points, colors, k: int = 4, opacity: float = 0.1, sh_degree: int = 0) -> GaussianSet:
    """One isotropic primitive per point, sized by the mean distance to its ``k`` nearest neighbours."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    if n < k + 1:
        raise TooFewPoints(f"need at least {k + 1} points, got {n}")
    dist, _ = cKDTree(points).query(points, k=k + 1)
    scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = rgb_to_sh0(np.asarray(colors, dtype=float).reshape(n, 3))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    logit = np.log(opacity / (1.0 - opacity))
    return GaussianSet(points.copy(), np.repeat(np.log(scale)[:, None], 3, axis=1), quats, np.full(n, logit), sh)


@dataclass(frozen=True)
class RenderConfig:
    near: float = 0.01
    sigma_cutoff: float = 3.0  # bounding box half-width in projected standard deviations
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    t_min: float = 1e-4  # stop compositing once transmittance would drop below this
    dilation: float = 0.3  # px^2 added to the projected covariance diagonal


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (h, w, 3)
    transmittance: np.ndarray  # (h, w)


@dataclass
class GaussianGrads:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def as_dict(self) -> dict:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "quats": self.quats,
            "opacity_logits": self.opacity_logits,
            "sh": self.sh,
        }


# ---------------------------------------------------------------------------
# spherical harmonics

def sh_basis(dirs, degree):
    """Real SH basis at unit directions, and its Jacobian w.r.t. the direction."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = len(dirs)
    K = (degree + 1) ** 2
    Y = np.zeros((n, K))
    dY = np.zeros((n, K, 3))
    Y[:, 0] = SH_C0
    if degree >= 1:
        Y[:, 1] = -SH_C1 * y
        Y[:, 2] = SH_C1 * z
        Y[:, 3] = -SH_C1 * x
        dY[:, 1, 1] = -SH_C1
        dY[:, 2, 2] = SH_C1
        dY[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        c = SH_C2
        Y[:, 4] = c[0] * x * y
        Y[:, 5] = c[1] * y * z
        Y[:, 6] = c[2] * (2 * zz - xx - yy)
        Y[:, 7] = c[3] * x * z
        Y[:, 8] = c[4] * (xx - yy)
        dY[:, 4] = np.stack([c[0] * y, c[0] * x, 0 * x], axis=1)
        dY[:, 5] = np.stack([0 * x, c[1] * z, c[1] * y], axis=1)
        dY[:, 6] = np.stack([-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z], axis=1)
        dY[:, 7] = np.stack([c[3] * z, 0 * x, c[3] * x], axis=1)
        dY[:, 8] = np.stack([2 * c[4] * x, -2 * c[4] * y, 0 * x], axis=1)
    if degree >= 3:
        c = SH_C3
        Y[:, 9] = c[0] * y * (3 * xx - yy)
        Y[:, 10] = c[1] * x * y * z
        Y[:, 11] = c[2] * y * (4 * zz - xx - yy)
        Y[:, 12] = c[3] * z * (2 * zz - 3 * xx - 3 * yy)
        Y[:, 13] = c[4] * x * (4 * zz - xx - yy)
        Y[:, 14] = c[5] * z * (xx - yy)
        Y[:, 15] = c[6] * x * (xx - 3 * yy)
        dY[:, 9] = np.stack([6 * c[0] * x * y, c[0] * (3 * xx - 3 * yy), 0 * x], axis=1)
        dY[:, 10] = np.stack([c[1] * y * z, c[1] * x * z, c[1] * x * y], axis=1)
        dY[:, 11] = np.stack([-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z], axis=1)
        dY[:, 12] = np.stack([-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)], axis=1)
        dY[:, 13] = np.stack([c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z], axis=1)
        dY[:, 14] = np.stack([2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)], axis=1)
        dY[:, 15] = np.stack([c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, 0 * x], axis=1)
    return Y, dY


# ---------------------------------------------------------------------------
# projection of primitives to screen space


def _quat_to_rot(qn):
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    R = np.empty((len(qn), 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _quat_to_rot_vjp(qn, G):
    """Gradient w.r.t. the (normalized) quaternion given dL/dR."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = lambda i, j: G[:, i, j]  # noqa: E731
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
              - 2 * x * g(2, 2))
    gy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
              - 2 * y * g(2, 2))
    gz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2)
              + x * g(2, 0) + y * g(2, 1))
    return np.stack([gw, gx, gy, gz], axis=1)


@dataclass
class _Projected:
    visible: np.ndarray
    p: np.ndarray  # camera-frame means
    means2d: np.ndarray
    conics: np.ndarray  # (a, b, c) of the inverse 2D covariance
    opac: np.ndarray
    colors: np.ndarray
    bbox: np.ndarray
    depth_order: np.ndarray
    # cached intermediates for the adjoint
    qn: np.ndarray = field(repr=False, default=None)
    qnorm: np.ndarray = field(repr=False, default=None)
    Rg: np.ndarray = field(repr=False, default=None)
    scales: np.ndarray = field(repr=False, default=None)
    M: np.ndarray = field(repr=False, default=None)
    Sigma: np.ndarray = field(repr=False, default=None)
    Sigma_c: np.ndarray = field(repr=False, default=None)
    J: np.ndarray = field(repr=False, default=None)
    Qinv: np.ndarray = field(repr=False, default=None)
    Y: np.ndarray = field(repr=False, default=None)
    dY: np.ndarray = field(repr=False, default=None)
    view: np.ndarray = field(repr=False, default=None)
    color_raw: np.ndarray = field(repr=False, default=None)


def _project(g: GaussianSet, K: CameraIntrinsics, R, t, width, height, cfg: RenderConfig) -> _Projected:
    n = len(g)
    p = g.means @ R.T + t
    z = p[:, 2]
    visible = z > cfg.near
    zs = np.where(visible, z, 1.0)
    x, y = p[:, 0], p[:, 1]

    qnorm = np.linalg.norm(g.quats, axis=1)
    qn = g.quats / np.maximum(qnorm, 1e-300)[:, None]
    Rg = _quat_to_rot(qn)
    s = np.exp(g.log_scales)
    M = Rg * s[:, None, :]
    Sigma = M @ M.transpose(0, 2, 1)
    Sigma_c = R @ Sigma @ R.T
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * x / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * y / zs**2
    A = J @ Sigma_c @ J.transpose(0, 2, 1)
    A[:, 0, 0] += cfg.dilation
    A[:, 1, 1] += cfg.dilation
    det = A[:, 0, 0] * A[:, 1, 1] - A[:, 0, 1] * A[:, 1, 0]
    visible &= det > 1e-12
    det = np.where(visible, det, 1.0)
    Qinv = np.empty_like(A)
    Qinv[:, 0, 0] = A[:, 1, 1] / det
    Qinv[:, 1, 1] = A[:, 0, 0] / det
    Qinv[:, 0, 1] = -A[:, 0, 1] / det
    Qinv[:, 1, 0] = -A[:, 1, 0] / det
    conics = np.stack([Qinv[:, 0, 0], 0.5 * (Qinv[:, 0, 1] + Qinv[:, 1, 0]), Qinv[:, 1, 1]], axis=1)
    means2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)

    mid = 0.5 * (A[:, 0, 0] + A[:, 1, 1])
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = cfg.sigma_cutoff * np.sqrt(lam)
    x0 = np.ceil(means2d[:, 0] - radius)
    x1 = np.floor(means2d[:, 0] + radius)
    y0 = np.ceil(means2d[:, 1] - radius)
    y1 = np.floor(means2d[:, 1] + radius)
    visible &= np.isfinite(radius) & (x1 >= 0) & (x0 <= width - 1) & (y1 >= 0) & (y0 <= height - 1)
    bbox = np.zeros((n, 4), dtype=np.int64)
    bbox[:, 0] = np.clip(np.nan_to_num(x0), 0, width - 1)
    bbox[:, 1] = np.clip(np.nan_to_num(x1), 0, width - 1)
    bbox[:, 2] = np.clip(np.nan_to_num(y0), 0, height - 1)
    bbox[:, 3] = np.clip(np.nan_to_num(y1), 0, height - 1)

    center = -R.T @ t
    degree = g.sh_degree
    if degree > 0:
        view = g.means - center
        vnorm = np.maximum(np.linalg.norm(view, axis=1), 1e-12)
        Y, dY = sh_basis(view / vnorm[:, None], degree)
    else:
        view = None
        Y, dY = np.full((n, 1), SH_C0), None
    color_raw = np.einsum("nk,nkc->nc", Y, g.sh) + 0.5
    colors = np.clip(color_raw, 0.0, 1.0)

    idx = np.nonzero(visible)[0]
    depth_order = idx[np.lexsort((idx, z[idx]))]
    return _Projected(
        visible, p, means2d, conics, g.opacities, colors, bbox, depth_order,
        qn, qnorm, Rg, s, M, Sigma, Sigma_c, J, Qinv, Y, dY, view, color_raw,
    )


def _project_vjp(g: GaussianSet, K: CameraIntrinsics, R, t, pr: _Projected, g_mean2d, g_conic, g_opac, g_color):
    """Adjoint of :func:`_project`. Returns (GaussianGrads, dL/dR, dL/dt)."""
    vis = pr.visible.astype(float)
    g_mean2d = g_mean2d * vis[:, None]
    g_conic = g_conic * vis[:, None]
    g_opac = g_opac * vis
    g_color = g_color * vis[:, None]

    p = pr.p
    zs = np.where(pr.visible, p[:, 2], 1.0)
    x, y = p[:, 0], p[:, 1]

    # colour
    inside = (pr.color_raw > 0.0) & (pr.color_raw < 1.0)
    gc_raw = g_color * inside
    g_sh = pr.Y[:, :, None] * gc_raw[:, None, :]
    g_means = np.zeros_like(g.means)
    g_center = np.zeros(3)
    if pr.dY is not None:
        gY = np.einsum("nkc,nc->nk", g.sh, gc_raw)
        gd = np.einsum("nk,nkj->nj", gY, pr.dY)
        vnorm = np.maximum(np.linalg.norm(pr.view, axis=1), 1e-12)
        d = pr.view / vnorm[:, None]
        gv = (gd - d * np.sum(d * gd, axis=1, keepdims=True)) / vnorm[:, None]
        g_means += gv
        g_center -= gv.sum(axis=0)

    # opacity
    op = pr.opac
    g_logit = g_opac * op * (1.0 - op)

    # conic -> projected covariance
    GQ = np.empty((len(g), 2, 2))
    GQ[:, 0, 0] = g_conic[:, 0]
    GQ[:, 1, 1] = g_conic[:, 2]
    GQ[:, 0, 1] = GQ[:, 1, 0] = 0.5 * g_conic[:, 1]
    Q = pr.Qinv
    GA = -Q @ GQ @ Q
    J = pr.J
    G_Sigma_c = J.transpose(0, 2, 1) @ GA @ J
    GJ = 2.0 * GA @ J @ pr.Sigma_c
    G_Sigma = R.T @ G_Sigma_c @ R
    g_R = 2.0 * np.einsum("nij,jk,nlk->il", G_Sigma_c, R, pr.Sigma)
    GM = 2.0 * G_Sigma @ pr.M
    GRg = GM * pr.scales[:, None, :]
    g_s = np.einsum("nij,nij->nj", GM, pr.Rg)
    g_log_scales = g_s * pr.scales
    g_qn = _quat_to_rot_vjp(pr.qn, GRg)
    g_quats = (g_qn - pr.qn * np.sum(pr.qn * g_qn, axis=1, keepdims=True)) / np.maximum(pr.qnorm, 1e-300)[:, None]

    # camera-frame mean: from J and from the 2D mean
    fx, fy = K.fx, K.fy
    z2, z3 = zs * zs, zs * zs * zs
    gpx = GJ[:, 0, 2] * (-fx / z2) + g_mean2d[:, 0] * fx / zs
    gpy = GJ[:, 1, 2] * (-fy / z2) + g_mean2d[:, 1] * fy / zs
    gpz = (
        GJ[:, 0, 0] * (-fx / z2)
        + GJ[:, 0, 2] * (2 * fx * x / z3)
        + GJ[:, 1, 1] * (-fy / z2)
        + GJ[:, 1, 2] * (2 * fy * y / z3)
        - g_mean2d[:, 0] * fx * x / z2
        - g_mean2d[:, 1] * fy * y / z2
    )
    gp = np.stack([gpx, gpy, gpz], axis=1) * vis[:, None]
    g_means += gp @ R
    g_R = g_R + gp.T @ g.means
    g_t = gp.sum(axis=0)
    # camera centre c = -R^T t
    g_R -= np.outer(t, g_center)
    g_t -= R @ g_center

    grads = GaussianGrads(g_means, g_log_scales * vis[:, None], g_quats * vis[:, None], g_logit, g_sh)
    return grads, g_R, g_t


def pose_gradient(R, t, g_R, g_t) -> np.ndarray:
    """dL/d(delta) at delta = 0 for the left update ``exp(delta) * (R, t)``."""
    M = g_R @ R.T
    g_omega = np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]) + np.cross(t, g_t)
    return np.concatenate([g_omega, g_t])


def _resolve_size(K: CameraIntrinsics, size):
    if size is None:
        return K.width, K.height
    return int(size[0]), int(size[1])


def _rasterize(pr: _Projected, width, height, cfg: RenderConfig):
    offsets, ids = _raster.build_pixel_lists(pr.depth_order, pr.bbox, width, height)
    img, trans, n_used = _raster.rasterize_forward(
        offsets, ids, pr.means2d, pr.conics, pr.opac, pr.colors, width, height, cfg.alpha_min, cfg.alpha_max, cfg.t_min
    )
    return img, trans, (offsets, ids, n_used)


def render(g: GaussianSet, K: CameraIntrinsics, T: Pose, size=None, cfg: RenderConfig = RenderConfig()) -> RenderedImage:
    width, height = _resolve_size(K, size)
    if len(g) == 0:
        return RenderedImage(np.zeros((height, width, 3)), np.ones((height, width)))
    pr = _project(g, K, T.R, T.t, width, height, cfg)
    img, trans, _ = _rasterize(pr, width, height, cfg)
    return RenderedImage(img, trans)


# ---------------------------------------------------------------------------
# photometric loss


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filter_full(img):
    k = _KERNEL
    return correlate1d(correlate1d(img, k, axis=0, mode="constant"), k, axis=1, mode="constant")


def _filter_valid(img):
    """Separable Gaussian filtering over the first two axes, keeping only full-window positions."""
    r = len(_KERNEL) // 2
    return _filter_full(img)[r:-r, r:-r]


def _filter_valid_adjoint(g):
    # zero-padded correlation with a symmetric kernel is self-adjoint
    r = len(_KERNEL) // 2
    full = np.zeros((g.shape[0] + 2 * r, g.shape[1] + 2 * r) + g.shape[2:])
    full[r:-r, r:-r] = g
    return _filter_full(full)


def ssim(x, y, with_grad=False):
    """Mean SSIM over the valid window positions and the channels.

    11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2 on a [0, 1] range.
    With ``with_grad`` also returns dSSIM/dx.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mx, my = _filter_valid(x), _filter_valid(y)
    exx, eyy, exy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not with_grad:
        return value
    scale = 1.0 / smap.size
    # grouped so that identical inputs give an exactly zero derivative
    d_mx = 2 * (my * (a2 - a1) - smap * mx * (b2 - b1)) / (b1 * b2)
    q = a1 / (b1 * b2)
    d_exx = -q * (a2 / b2)
    d_exy = 2 * q
    grad = (
        _filter_valid_adjoint(d_mx * scale)
        + 2 * x * _filter_valid_adjoint(d_exx * scale)
        + y * _filter_valid_adjoint(d_exy * scale)
    )
    return value, grad


def photometric_loss(rendered, target, lambda_ssim=0.2, with_grad=False):
    """``(1 - l) * mean|I^ - I| + l * (1 - SSIM(I^, I))`` and optionally its image gradient."""
    diff = rendered - target
    l1 = float(np.abs(diff).mean())
    if lambda_ssim == 0.0:
        if not with_grad:
            return l1
        return l1, np.sign(diff) / diff.size
    if not with_grad:
        return (1 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim(rendered, target))
    s, gs = ssim(rendered, target, with_grad=True)
    loss = (1 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
    grad = (1 - lambda_ssim) * np.sign(diff) / diff.size - lambda_ssim * gs
    return loss, grad


@dataclass
class RenderGradients:
    loss: float
    gaussians: GaussianGrads
    pose: np.ndarray  # dL/d(twist), 6-vector
    image: RenderedImage


def render_with_gradients(
    g: GaussianSet,
    K: CameraIntrinsics,
    T: Pose,
    target,
    lambda_ssim: float = 0.2,
    twist=None,
    cfg: RenderConfig = RenderConfig(),
) -> RenderGradients:
    """Photometric loss of ``render(g, K, exp(twist) * T)`` against ``target`` and all gradients.

    The pose gradient is taken w.r.t. ``twist`` (zero when omitted).
    """
    target = np.asarray(target, dtype=float)
    height, width = target.shape[:2]
    twist = np.zeros(6) if twist is None else np.asarray(twist, dtype=float)
    pose = se3_compose(T, twist)
    R, t = pose.R, pose.t
    if len(g) == 0:
        img = RenderedImage(np.zeros((height, width, 3)), np.ones((height, width)))
        loss = photometric_loss(img.rgb, target, lambda_ssim)
        zero = GaussianGrads(*(np.zeros_like(v) for v in g.params().values()))
        return RenderGradients(loss, zero, np.zeros(6), img)
    pr = _project(g, K, R, t, width, height, cfg)
    img, trans, (offsets, ids, n_used) = _rasterize(pr, width, height, cfg)
    loss, dl_dimg = photometric_loss(img, target, lambda_ssim, with_grad=True)
    gm, gconic, gop, gcol = _raster.rasterize_backward(
        offsets, ids, n_used, pr.means2d, pr.conics, pr.opac, pr.colors, trans,
        np.ascontiguousarray(dl_dimg), width, height, cfg.alpha_min, cfg.alpha_max,
    )
    grads, g_R, g_t = _project_vjp(g, K, R, t, pr, gm, gconic, gop, gcol)
    g_xi = pose_gradient(R, t, g_R, g_t)
    g_twist = se3_left_jacobian(twist).T @ g_xi
    return RenderGradients(loss, grads, g_twist, RenderedImage(img, trans))
