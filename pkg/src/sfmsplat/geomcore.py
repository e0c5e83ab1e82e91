"""Rotation and pose algebra, pinhole projection and robust kernels.

Conventions used everywhere in the package:

* A :class:`Pose` maps world points into the camera frame, ``x_cam = R @ X + t``.
  The camera center is ``c = -R.T @ t``.
* Twists are 6-vectors ``(omega, rho)``: rotation first, translation second.
* Pose updates are left-multiplicative, ``T_new = exp(delta) * T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth

DEPTH_EPSILON = 1e-8

# below this angle the closed forms lose precision; switch to Taylor series
_SMALL_ANGLE = 1e-4
_SERIES_ANGLE = 0.05


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(M) -> np.ndarray:
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def so3_exp(omega) -> np.ndarray:
    """Rodrigues formula."""
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    W = hat(omega)
    if theta2 < _SMALL_ANGLE**2:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R) -> np.ndarray:
    """Rotation vector ``omega`` with ``so3_exp(omega) == R`` and ``|omega| <= pi``.

    Near pi the axis is read off the symmetric part of R (column with the
    largest diagonal entry, lowest index on ties), and its sign from the
    antisymmetric part.
    """
    R = np.asarray(R, dtype=float)
    w = 0.5 * vee(R - R.T)  # sin(theta) * axis
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if theta < _SMALL_ANGLE:
        return w * (1.0 + theta * theta / 6.0)
    if c > -0.9:
        return w * (theta / s)
    # near pi: a a^T = (sym(R) - cos I) / (1 - cos)
    S = 0.5 * (R + R.T)
    A = (S - c * np.eye(3)) / (1.0 - c)
    k = int(np.argmax(np.diag(A)))
    axis = A[:, k] / np.sqrt(max(A[k, k], 1e-300))
    if axis @ w < 0.0:
        axis = -axis
    return theta * axis


def so3_left_jacobian(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    W = hat(omega)
    if theta2 < _SMALL_ANGLE**2:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = np.sqrt(theta2)
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * W + b * (W @ W)


def so3_left_jacobian_inv(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta2 = float(omega @ omega)
    W = hat(omega)
    if theta2 < _SMALL_ANGLE**2:
        b = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = np.sqrt(theta2)
        b = 1.0 / theta2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * W + b * (W @ W)


def se3_exp(twist) -> tuple[np.ndarray, np.ndarray]:
    """Exponential of a twist ``(omega, rho)``; returns ``(R, t)``."""
    twist = np.asarray(twist, dtype=float)
    omega, rho = twist[:3], twist[3:]
    return so3_exp(omega), so3_left_jacobian(omega) @ rho


def _q_coefficients(theta):
    if theta < _SERIES_ANGLE:
        t2 = theta * theta
        t4 = t2 * t2
        a = 1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
        b = -1.0 / 24.0 + t2 / 720.0 - t4 / 40320.0
        c = -1.0 / 120.0 + t2 / 5040.0 - t4 / 362880.0
    else:
        s, co = np.sin(theta), np.cos(theta)
        a = (theta - s) / theta**3
        b = (1.0 - theta**2 / 2.0 - co) / theta**4
        c = (theta - s - theta**3 / 6.0) / theta**5
    return a, b, c


def se3_left_jacobian(twist) -> np.ndarray:
    """6x6 left Jacobian in ``(omega, rho)`` ordering.

    ``exp(twist + d) ~= exp(J @ d) * exp(twist)`` to first order in ``d``.
    """
    twist = np.asarray(twist, dtype=float)
    phi, rho = twist[:3], twist[3:]
    theta = float(np.linalg.norm(phi))
    P, Rh = hat(phi), hat(rho)
    a, b, c = _q_coefficients(theta)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    Q = (
        0.5 * Rh
        + a * (PR + RP + PRP)
        - b * (P @ PR + RP @ P - 3.0 * PRP)
        - 0.5 * (b - 3.0 * c) * (PRP @ P + P @ PRP)
    )
    Jl = so3_left_jacobian(phi)
    J = np.zeros((6, 6))
    J[:3, :3] = Jl
    J[3:, 3:] = Jl
    J[3:, :3] = Q
    return J


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R))
        object.__setattr__(self, "t", _frozen(self.t).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def __hash__(self):
        return hash((self.R.tobytes(), self.t.tobytes()))


def se3_compose(base: Pose, delta) -> Pose:
    """Left update ``exp(delta) * base``; a zero twist returns ``base`` itself."""
    delta = np.asarray(delta, dtype=float)
    if not np.any(delta):
        return base
    dR, dt = se3_exp(delta)
    return Pose(dR @ base.R, dR @ base.t + dt)


def se3_log(pose: Pose) -> np.ndarray:
    omega = so3_log(pose.R)
    rho = np.linalg.solve(so3_left_jacobian(omega), pose.t)
    return np.concatenate([omega, rho])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels. Pixel ``(u, v)`` has its center at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def simple(cls, f, width, height) -> "CameraIntrinsics":
        return cls(float(f), float(f), width / 2.0, height / 2.0, int(width), int(height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    def resized(self, width, height) -> "CameraIntrinsics":
        """The same camera sampled on a ``width x height`` grid (pixel centers at integers)."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, int(width), int(height)
        )

    def with_focal(self, f) -> "CameraIntrinsics":
        return CameraIntrinsics(float(f), float(f), self.cx, self.cy, self.width, self.height)

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (
            (uv[:, 0] >= 0) & (uv[:, 0] <= self.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height - 1)
        )


def project(K: CameraIntrinsics, T: Pose, X) -> np.ndarray:
    """Pixel coordinates of world point ``X``; raises :class:`NonPositiveDepth`."""
    p = T.R @ np.asarray(X, dtype=float) + T.t
    if p[2] <= DEPTH_EPSILON:
        raise NonPositiveDepth(f"depth {p[2]:.3g} <= {DEPTH_EPSILON}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def transform_points(R, t, X) -> np.ndarray:
    """``R X + t`` row by row, with ``R`` of shape (3, 3) or (n, 3, 3) and ``t`` broadcast alike.

    Written as elementwise products in a fixed order rather than a matrix product, so the
    value for a given point does not depend on how many other points share the call.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    R = np.asarray(R, dtype=float)
    return X[:, 0:1] * R[..., 0] + X[:, 1:2] * R[..., 1] + X[:, 2:3] * R[..., 2] + t


def project_points(K: CameraIntrinsics, T: Pose, X) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(uv, depth)``; rows with depth <= eps are NaN."""
    p = transform_points(T.R, T.t, X)
    z = p[:, 2]
    ok = z > DEPTH_EPSILON
    uv = np.full((len(p), 2), np.nan)
    uv[ok, 0] = K.fx * p[ok, 0] / z[ok] + K.cx
    uv[ok, 1] = K.fy * p[ok, 1] / z[ok] + K.cy
    return uv, z


def unproject(K: CameraIntrinsics, T: Pose, uv, depth) -> np.ndarray:
    """World point seen at pixel ``uv`` with camera-frame depth ``depth``."""
    x = K.K_inv @ np.array([uv[0], uv[1], 1.0]) * depth
    return T.R.T @ (x - T.t)


KERNELS = ("huber", "geman_mcclure", "cauchy")


@dataclass(frozen=True)
class RobustKernel:
    kind: str
    scale: float

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValueError(f"unknown kernel {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("kernel scale must be positive")

    def __call__(self, squared_residual):
        return robust_loss(self, squared_residual)


def robust_loss(kernel: RobustKernel, squared_residual):
    """Kernel value and IRLS weight for squared residual(s) ``s``.

    huber          rho(s) = s                 for s <= d^2,  2 d sqrt(s) - d^2 beyond
    cauchy         rho(s) = c^2 log(1 + s/c^2)
    geman_mcclure  rho(s) = s / (s + c^2)

    The weight is ``d rho / d s`` for huber and cauchy. For geman_mcclure it is
    rescaled by ``c^2`` so that every kernel has weight 1 at the origin.
    Works elementwise on arrays.
    """
    s = np.asarray(squared_residual, dtype=float)
    c2 = kernel.scale * kernel.scale
    if kernel.kind == "huber":
        inside = s <= c2
        root = np.sqrt(np.where(inside, c2, s))
        value = np.where(inside, s, 2.0 * kernel.scale * root - c2)
        weight = np.where(inside, 1.0, kernel.scale / root)
    elif kernel.kind == "cauchy":
        value = c2 * np.log1p(s / c2)
        weight = 1.0 / (1.0 + s / c2)
    else:
        value = s / (s + c2)
        weight = (c2 / (s + c2)) ** 2
    if value.ndim == 0:
        return float(value), float(weight)
    return value, weight


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.linalg.norm(so3_log(R)))


def project_to_so3(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def quat_from_matrix(R) -> np.ndarray:
    """Hamilton quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def matrix_from_quat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (Haar measure) via a random unit quaternion."""
    q = rng.normal(size=4)
    return matrix_from_quat(q)
