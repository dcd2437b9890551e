"""SE(3) rigid transforms, camera models, and timed-pose interpolation.

Conventions:
  - Quaternions are stored (w, x, y, z) and kept unit-norm.
  - A RigidTransform maps points from its local frame into the parent
    frame: p_parent = R @ p_local + t.
  - SE(3) tangent vectors are 6-dim [rho, theta] (translation, rotation).
  - Pixel coordinates are continuous, with integer values at pixel
    centers; (0, 0) is the center of the top-left pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NotProjectableError, ValidationError

_QUAT_NORM_TOL = 1e-9


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    # Shepperd's method: pick the largest of the four squared components.
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def quat_from_rotvec(v: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        # First-order expansion keeps exp/log consistent near identity.
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return q / np.linalg.norm(q)
    axis = np.asarray(v, dtype=float) / angle
    half = 0.5 * angle
    s = math.sin(half)
    return np.array([math.cos(half), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    w = min(1.0, max(-1.0, float(q[0])))
    vec = np.asarray(q[1:], dtype=float)
    sin_half = np.linalg.norm(vec)
    if sin_half < 1e-12:
        return 2.0 * vec
    angle = 2.0 * math.atan2(sin_half, w)
    if angle > math.pi:
        angle -= 2.0 * math.pi
    return (angle / sin_half) * vec


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(theta))
    s = _skew(theta)
    if angle < 1e-8:
        return np.eye(3) + 0.5 * s + s @ s / 6.0
    a2 = angle * angle
    return (np.eye(3)
            + ((1 - math.cos(angle)) / a2) * s
            + ((angle - math.sin(angle)) / (a2 * angle)) * (s @ s))


def _so3_left_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(theta))
    s = _skew(theta)
    if angle < 1e-8:
        return np.eye(3) - 0.5 * s + s @ s / 12.0
    a2 = angle * angle
    coeff = (1.0 - angle * math.sin(angle) / (2.0 * (1.0 - math.cos(angle)))) / a2
    return np.eye(3) - 0.5 * s + coeff * (s @ s)


class RigidTransform:
    """SE(3) pose as a unit quaternion (w,x,y,z) plus translation (m)."""

    __slots__ = ("q", "t", "_rot")

    def __init__(self, q, t):
        q = np.asarray(q, dtype=float)
        t = np.asarray(t, dtype=float)
        if q.shape != (4,) or t.shape != (3,):
            raise ValidationError("RigidTransform expects 4-quaternion and 3-translation")
        n = float(np.linalg.norm(q))
        if n < 1e-12 or not np.isfinite(n) or not np.all(np.isfinite(t)):
            raise ValidationError("RigidTransform components must be finite and non-zero quaternion")
        self.q = q / n
        self.t = t
        self._rot = None

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, t) -> "RigidTransform":
        return cls(quat_from_rotvec(np.asarray(rotvec, dtype=float)), t)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    @classmethod
    def exp(cls, xi) -> "RigidTransform":
        """SE(3) exponential of a 6-dim tangent [rho, theta]."""
        xi = np.asarray(xi, dtype=float)
        rho, theta = xi[:3], xi[3:]
        return cls(quat_from_rotvec(theta), _so3_left_jacobian(theta) @ rho)

    def log(self) -> np.ndarray:
        """SE(3) logarithm: 6-dim tangent [rho, theta]."""
        theta = quat_to_rotvec(self.q)
        rho = _so3_left_jacobian_inv(theta) @ self.t
        return np.concatenate([rho, theta])

    @property
    def rotation(self) -> np.ndarray:
        if self._rot is None:
            self._rot = quat_to_matrix(self.q)
        return self._rot

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Result applies `other` first, then self."""
        return RigidTransform(quat_mul(self.q, other.q),
                              self.rotation @ other.t + self.t)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        qi = quat_conj(self.q)
        return RigidTransform(qi, -(self.rotation.T @ self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N,3) array into the parent frame."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.t
        return points @ self.rotation.T + self.t

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation.T @ (points - self.t)
        return (points - self.t) @ self.rotation

    def retract(self, delta: np.ndarray) -> "RigidTransform":
        """Right-perturbed update T * exp(delta); delta is 6-dim tangent."""
        return self.compose(RigidTransform.exp(delta))

    def rotation_angle_to(self, other: "RigidTransform") -> float:
        """Absolute rotation angle (rad) between the two transforms."""
        rel = quat_mul(quat_conj(self.q), other.q)
        # atan2 form stays accurate near identity where acos degrades.
        return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))

    def translation_distance_to(self, other: "RigidTransform") -> float:
        return float(np.linalg.norm(self.t - other.t))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.t
        return m

    def __repr__(self):
        q = np.round(self.q, 6)
        t = np.round(self.t, 6)
        return f"RigidTransform(q={q.tolist()}, t={t.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a∘b: apply b first, then a."""
    return a.compose(b)


@dataclass
class TimedPose:
    """A trajectory sample: timestamp in seconds plus pose."""
    timestamp: float
    pose: RigidTransform


def slerp(qa: np.ndarray, qb: np.ndarray, alpha: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc, alpha in [0,1]."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-10:
        q = (1.0 - alpha) * qa + alpha * qb
        return q / np.linalg.norm(q)
    omega = math.acos(min(1.0, dot))
    so = math.sin(omega)
    q = (math.sin((1.0 - alpha) * omega) / so) * qa + (math.sin(alpha * omega) / so) * qb
    return q / np.linalg.norm(q)


def interpolate_pose(a: TimedPose, b: TimedPose, t: float) -> RigidTransform:
    """Linear translation + slerp rotation between two timed poses.

    Translation interpolates linearly in the parent (world) frame.
    """
    if b.timestamp <= a.timestamp:
        raise ValidationError("interpolate_pose: degenerate interval (b.timestamp <= a.timestamp)")
    if t < a.timestamp or t > b.timestamp:
        raise ValidationError(f"interpolate_pose: t={t} outside [{a.timestamp}, {b.timestamp}]")
    alpha = (t - a.timestamp) / (b.timestamp - a.timestamp)
    if alpha == 0.0:
        return a.pose
    if alpha == 1.0:
        return b.pose
    trans = (1.0 - alpha) * a.pose.t + alpha * b.pose.t
    return RigidTransform(slerp(a.pose.q, b.pose.q, alpha), trans)


PINHOLE_RADTAN = "pinhole-radtan"
FISHEYE_EQUIDISTANT = "fisheye-equidistant"


@dataclass
class CameraModel:
    """Projection model: pinhole with radial-tangential distortion, or
    equidistant fisheye with a 4-term odd polynomial."""

    kind: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if self.kind not in (PINHOLE_RADTAN, FISHEYE_EQUIDISTANT):
            raise ValidationError(f"unknown camera kind '{self.kind}'")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point must lie inside the image")
        self.dist = np.asarray(self.dist, dtype=float)
        if self.kind == PINHOLE_RADTAN and self.dist.size not in (0, 4, 5):
            raise ValidationError("pinhole-radtan expects 0, 4 or 5 distortion coefficients")
        if self.kind == FISHEYE_EQUIDISTANT and self.dist.size not in (0, 4):
            raise ValidationError("fisheye-equidistant expects 0 or 4 distortion coefficients")

    # -- distortion helpers on normalized coordinates -------------------

    def _radtan(self, a, b):
        k = np.zeros(5)
        k[:self.dist.size] = self.dist
        r2 = a * a + b * b
        f = 1.0 + k[0] * r2 + k[1] * r2 * r2 + k[4] * r2 * r2 * r2
        xd = a * f + 2.0 * k[2] * a * b + k[3] * (r2 + 2.0 * a * a)
        yd = b * f + k[2] * (r2 + 2.0 * b * b) + 2.0 * k[3] * a * b
        return xd, yd

    def _radtan_jacobian(self, a, b):
        """Elementwise 2x2 Jacobian of the radtan warp: (dxa, dxb, dyb)."""
        k = np.zeros(5)
        k[:self.dist.size] = self.dist
        r2 = a * a + b * b
        f = 1.0 + k[0] * r2 + k[1] * r2 * r2 + k[4] * r2 ** 3
        df = k[0] + 2.0 * k[1] * r2 + 3.0 * k[4] * r2 * r2
        dxa = f + 2.0 * a * a * df + 2.0 * k[2] * b + 6.0 * k[3] * a
        dxb = 2.0 * a * b * df + 2.0 * k[2] * a + 2.0 * k[3] * b
        dyb = f + 2.0 * b * b * df + 6.0 * k[2] * b + 2.0 * k[3] * a
        return dxa, dxb, dyb

    def _theta_poly(self, theta):
        if self.dist.size == 0:
            return theta
        k1, k2, k3, k4 = self.dist
        t2 = theta * theta
        return theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))

    def _theta_poly_deriv(self, theta):
        if self.dist.size == 0:
            return np.ones_like(theta)
        k1, k2, k3, k4 = self.dist
        t2 = theta * theta
        return 1.0 + t2 * (3 * k1 + t2 * (5 * k2 + t2 * (7 * k3 + t2 * 9 * k4)))

    # -- projection ------------------------------------------------------

    def project(self, point: np.ndarray) -> np.ndarray:
        """Project one camera-frame point to a pixel (u, v)."""
        uv, valid = self.project_many(np.asarray(point, dtype=float)[None, :])
        if not valid[0]:
            raise NotProjectableError("point not projectable by this camera")
        return uv[0]

    def project_many(self, points: np.ndarray):
        """Vectorized projection of (N,3) camera-frame points.

        Returns (uv (N,2), valid (N,)). Pixels may fall outside the image;
        invalid entries (behind a pinhole camera, or at the fisheye origin)
        hold NaN.
        """
        pts = np.asarray(points, dtype=float)
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        uv = np.full((pts.shape[0], 2), np.nan)
        if self.kind == PINHOLE_RADTAN:
            valid = z > 1e-6
            zs = np.where(valid, z, 1.0)
            a, b = x / zs, y / zs
            xd, yd = self._radtan(a, b)
            uv[:, 0] = self.fx * xd + self.cx
            uv[:, 1] = self.fy * yd + self.cy
        else:
            r = np.hypot(x, y)
            norm = np.sqrt(x * x + y * y + z * z)
            theta = np.arctan2(r, z)
            td = self._theta_poly(theta)
            # Exact-backward-axis points have no defined image direction.
            valid = (norm > 1e-12) & ~((r < 1e-9) & (z < 0))
            scale = td / np.where(r > 1e-9, r, 1.0)
            uv[:, 0] = self.fx * x * scale + self.cx
            uv[:, 1] = self.fy * y * scale + self.cy
        uv[~valid] = np.nan
        return uv, valid

    def project_jacobian(self, point: np.ndarray) -> np.ndarray:
        """2x3 Jacobian of project() w.r.t. the camera-frame point."""
        x, y, z = float(point[0]), float(point[1]), float(point[2])
        if self.kind == PINHOLE_RADTAN:
            if z <= 1e-6:
                raise NotProjectableError("point behind pinhole camera")
            a, b = x / z, y / z
            dxa, dxb, dyb = self._radtan_jacobian(a, b)
            j_dist = np.array([[dxa, dxb], [dxb, dyb]])
            j_norm = np.array([[1.0 / z, 0.0, -x / (z * z)],
                               [0.0, 1.0 / z, -y / (z * z)]])
            return np.diag([self.fx, self.fy]) @ j_dist @ j_norm
        r = math.hypot(x, y)
        n2 = x * x + y * y + z * z
        if r < 1e-9:
            if z <= 0:
                raise NotProjectableError("fisheye point on the backward axis")
            # Near-axis limit behaves like an undistorted pinhole.
            return np.array([[self.fx / z, 0.0, 0.0], [0.0, self.fy / z, 0.0]])
        theta = math.atan2(r, z)
        td = float(self._theta_poly(np.array(theta)))
        dtd = float(self._theta_poly_deriv(np.array(theta)))
        # dtheta/d(x,y,z) through r and z.
        dth_dx = x * z / (r * n2)
        dth_dy = y * z / (r * n2)
        dth_dz = -r / n2
        dr_dx, dr_dy = x / r, y / r
        s = td / r
        ds_dx = (dtd * dth_dx) / r - td * dr_dx / (r * r)
        ds_dy = (dtd * dth_dy) / r - td * dr_dy / (r * r)
        ds_dz = (dtd * dth_dz) / r
        du = np.array([s + x * ds_dx, x * ds_dy, x * ds_dz]) * self.fx
        dv = np.array([y * ds_dx, s + y * ds_dy, y * ds_dz]) * self.fy
        return np.vstack([du, dv])

    def project_jacobian_many(self, points: np.ndarray) -> np.ndarray:
        """(N,2,3) projection Jacobians; rows for unprojectable points are 0."""
        pts = np.asarray(points, dtype=float)
        n = pts.shape[0]
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        out = np.zeros((n, 2, 3))
        if self.kind == PINHOLE_RADTAN:
            ok = z > 1e-6
            zs = np.where(ok, z, 1.0)
            a, b = x / zs, y / zs
            dxa, dxb, dyb = self._radtan_jacobian(a, b)
            iz = 1.0 / zs
            # diag(f) @ J_dist @ J_norm, expanded elementwise.
            out[:, 0, 0] = self.fx * dxa * iz
            out[:, 0, 1] = self.fx * dxb * iz
            out[:, 0, 2] = self.fx * (dxa * (-x * iz * iz) + dxb * (-y * iz * iz))
            out[:, 1, 0] = self.fy * dxb * iz
            out[:, 1, 1] = self.fy * dyb * iz
            out[:, 1, 2] = self.fy * (dxb * (-x * iz * iz) + dyb * (-y * iz * iz))
            out[~ok] = 0.0
            return out
        r = np.hypot(x, y)
        n2 = x * x + y * y + z * z
        ok = (n2 > 1e-18) & (r > 1e-9)
        rs = np.where(ok, r, 1.0)
        n2s = np.where(n2 > 1e-18, n2, 1.0)
        theta = np.arctan2(r, z)
        td = self._theta_poly(theta)
        dtd = self._theta_poly_deriv(theta)
        dth_dx = x * z / (rs * n2s)
        dth_dy = y * z / (rs * n2s)
        dth_dz = -rs / n2s
        s = td / rs
        ds_dx = (dtd * dth_dx) / rs - td * (x / rs) / (rs * rs)
        ds_dy = (dtd * dth_dy) / rs - td * (y / rs) / (rs * rs)
        ds_dz = (dtd * dth_dz) / rs
        out[:, 0, 0] = self.fx * (s + x * ds_dx)
        out[:, 0, 1] = self.fx * (x * ds_dy)
        out[:, 0, 2] = self.fx * (x * ds_dz)
        out[:, 1, 0] = self.fy * (y * ds_dx)
        out[:, 1, 1] = self.fy * (s + y * ds_dy)
        out[:, 1, 2] = self.fy * (y * ds_dz)
        near_axis = (r <= 1e-9) & (z > 1e-9)
        if np.any(near_axis):
            out[near_axis] = 0.0
            out[near_axis, 0, 0] = self.fx / z[near_axis]
            out[near_axis, 1, 1] = self.fy / z[near_axis]
        out[~ok & ~near_axis] = 0.0
        return out

    # -- unprojection ----------------------------------------------------

    def pixel_ray(self, pixel) -> np.ndarray:
        """Unit camera-frame ray for one pixel inside the image bounds."""
        u, v = float(pixel[0]), float(pixel[1])
        if not (0 <= u <= self.width - 1 and 0 <= v <= self.height - 1):
            raise ValidationError(f"pixel {(u, v)} outside image bounds")
        return self.pixel_rays(np.array([[u, v]]))[0]

    def pixel_rays(self, pixels: np.ndarray) -> np.ndarray:
        """Vectorized unit rays for (N,2) pixels (bounds not checked)."""
        px = np.asarray(pixels, dtype=float)
        mx = (px[:, 0] - self.cx) / self.fx
        my = (px[:, 1] - self.cy) / self.fy
        if self.kind == PINHOLE_RADTAN:
            a, b = self._undistort_radtan(mx, my)
            rays = np.stack([a, b, np.ones_like(a)], axis=1)
            return rays / np.linalg.norm(rays, axis=1, keepdims=True)
        td = np.hypot(mx, my)
        theta = self._invert_theta_poly(td)
        s = np.sin(theta)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(td > 1e-12, s / np.where(td > 1e-12, td, 1.0), 1.0)
        rays = np.stack([mx * scale, my * scale, np.cos(theta)], axis=1)
        near_axis = td <= 1e-12
        rays[near_axis] = [0.0, 0.0, 1.0]
        return rays

    def _undistort_radtan(self, xd, yd, iters: int = 25):
        if self.dist.size == 0 or not np.any(self.dist):
            return xd, yd
        # Newton on the 2x2 warp; converges where the warp is invertible.
        a, b = np.array(xd, dtype=float), np.array(yd, dtype=float)
        for _ in range(iters):
            xa, ya = self._radtan(a, b)
            ja, jab, jb = self._radtan_jacobian(a, b)
            det = ja * jb - jab * jab
            det = np.where(np.abs(det) < 1e-12, 1e-12, det)
            ex, ey = xa - xd, ya - yd
            a = a - (jb * ex - jab * ey) / det
            b = b - (ja * ey - jab * ex) / det
        return a, b

    def _invert_theta_poly(self, td: np.ndarray, iters: int = 30) -> np.ndarray:
        if self.dist.size == 0:
            return np.asarray(td, dtype=float)
        theta = np.array(td, dtype=float)
        for _ in range(iters):
            f = self._theta_poly(theta) - td
            theta = theta - f / self._theta_poly_deriv(theta)
        return theta

    def pixel_grid_rays(self) -> np.ndarray:
        """(H,W,3) unit rays through every pixel center."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        px = np.stack([u.ravel(), v.ravel()], axis=1)
        return self.pixel_rays(px).reshape(self.height, self.width, 3)


# -- file formats --------------------------------------------------------

def save_trajectory(path, poses: list[TimedPose]) -> None:
    """One sample per line: `timestamp tx ty tz qx qy qz qw`."""
    with open(path, "w") as f:
        for tp in poses:
            q, t = tp.pose.q, tp.pose.t
            f.write(f"{tp.timestamp:.9f} {t[0]:.17g} {t[1]:.17g} {t[2]:.17g} "
                    f"{q[1]:.17g} {q[2]:.17g} {q[3]:.17g} {q[0]:.17g}\n")


def load_trajectory(path) -> list[TimedPose]:
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.split()
            if len(vals) != 8:
                raise ValidationError(f"{path}:{lineno}: expected 8 fields, got {len(vals)}")
            ts, tx, ty, tz, qx, qy, qz, qw = map(float, vals)
            poses.append(TimedPose(ts, RigidTransform(np.array([qw, qx, qy, qz]),
                                                      np.array([tx, ty, tz]))))
    for a, b in zip(poses, poses[1:]):
        if b.timestamp <= a.timestamp:
            raise ValidationError(f"{path}: timestamps not strictly increasing at t={b.timestamp}")
    return poses


def save_camera(path, cam: CameraModel) -> None:
    with open(path, "w") as f:
        f.write(f"kind {cam.kind}\n")
        f.write(f"fx {cam.fx:.9f}\nfy {cam.fy:.9f}\n")
        f.write(f"cx {cam.cx:.9f}\ncy {cam.cy:.9f}\n")
        f.write(f"width {cam.width}\nheight {cam.height}\n")
        f.write("dist " + " ".join(f"{d:.12f}" for d in cam.dist) + "\n")


def load_camera(path) -> CameraModel:
    fields = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            fields[key] = rest.strip()
    required = {"kind", "fx", "fy", "cx", "cy", "width", "height", "dist"}
    missing = required - set(fields)
    if missing:
        raise ValidationError(f"{path}: missing camera fields {sorted(missing)}")
    dist = np.array([float(x) for x in fields["dist"].split()]) if fields["dist"] else np.zeros(0)
    return CameraModel(kind=fields["kind"], fx=float(fields["fx"]), fy=float(fields["fy"]),
                       cx=float(fields["cx"]), cy=float(fields["cy"]),
                       width=int(fields["width"]), height=int(fields["height"]), dist=dist)


def save_transform(path, tf: RigidTransform) -> None:
    """Single line `tx ty tz qx qy qz qw` (extrinsics etc.)."""
    q, t = tf.q, tf.t
    with open(path, "w") as f:
        f.write(f"{t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                f"{q[1]:.12f} {q[2]:.12f} {q[3]:.12f} {q[0]:.12f}\n")


def load_transform(path) -> RigidTransform:
    with open(path) as f:
        vals = f.read().split()
    if len(vals) != 7:
        raise ValidationError(f"{path}: expected 7 fields for a transform")
    tx, ty, tz, qx, qy, qz, qw = map(float, vals)
    return RigidTransform(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
