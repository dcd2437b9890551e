"""Deterministic synthetic multi-lane world and sensor simulators.

The world is a textured ground plane plus roadside boxes; every surface is
a planar patch with a value-noise albedo field, so ray intersections are
closed-form and camera grayscale and LiDAR intensity share one albedo
source. All generators are pure functions of (config, seed).

World frame: x along the road, y left, z up. Vehicle/LiDAR body frame is
aligned with the world axes on these straight lanes; the camera looks
along body +x through a fixed extrinsic.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import CameraModel, RigidTransform, TimedPose, quat_from_rotvec, quat_mul
from .images import GrayImage
from .registration import Landmark, Observation

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:                                        # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        return wrap


@njit(cache=True)
def _raycast_kernel(origins, dirs, single_origin, normals, d0, s_origins, unmix):
    n = dirs.shape[0]
    ns = normals.shape[0]
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1, np.int64)
    best_uv = np.zeros((n, 2))
    for i in range(n):
        if single_origin:
            ox, oy, oz = origins[0, 0], origins[0, 1], origins[0, 2]
        else:
            ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        bt = np.inf
        bidx = -1
        bu = 0.0
        bv = 0.0
        for s in range(ns):
            den = dx * normals[s, 0] + dy * normals[s, 1] + dz * normals[s, 2]
            if abs(den) < 1e-14:
                continue
            t = (d0[s] - (ox * normals[s, 0] + oy * normals[s, 1]
                          + oz * normals[s, 2])) / den
            if t <= 1e-6 or t >= bt:
                continue
            hx = ox + t * dx - s_origins[s, 0]
            hy = oy + t * dy - s_origins[s, 1]
            hz = oz + t * dz - s_origins[s, 2]
            u = unmix[s, 0, 0] * hx + unmix[s, 0, 1] * hy + unmix[s, 0, 2] * hz
            if u < 0.0 or u > 1.0:
                continue
            v = unmix[s, 1, 0] * hx + unmix[s, 1, 1] * hy + unmix[s, 1, 2] * hz
            if v < 0.0 or v > 1.0:
                continue
            bt = t
            bidx = s
            bu = u
            bv = v
        best_t[i] = bt
        best_idx[i] = bidx
        best_uv[i, 0] = bu
        best_uv[i, 1] = bv
    return best_t, best_idx, best_uv


class AlbedoField:
    """Band-limited value noise over a rectangular patch, range-clipped."""

    def __init__(self, rng, extent_u, extent_v, base=0.5,
                 octaves=((4.0, 0.30), (2.0, 0.15), (1.0, 0.075))):
        self.base = base
        self.octaves = []
        for cell, amp in octaves:
            nu = max(2, int(math.ceil(extent_u / cell)) + 2)
            nv = max(2, int(math.ceil(extent_v / cell)) + 2)
            lattice = rng.uniform(-1.0, 1.0, size=(nv, nu))
            self.octaves.append((cell, amp, lattice))

    def sample(self, u, v):
        """Albedo in [0.05, 0.95] at metric patch coordinates (u, v)."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        value = np.full(u.shape, self.base)
        for cell, amp, lattice in self.octaves:
            gu = np.clip(u / cell, 0.0, lattice.shape[1] - 1.001)
            gv = np.clip(v / cell, 0.0, lattice.shape[0] - 1.001)
            iu = gu.astype(int)
            iv = gv.astype(int)
            fu = gu - iu
            fv = gv - iv
            v00 = lattice[iv, iu]
            v01 = lattice[iv, iu + 1]
            v10 = lattice[iv + 1, iu]
            v11 = lattice[iv + 1, iu + 1]
            value = value + amp * ((1 - fv) * ((1 - fu) * v00 + fu * v01)
                                   + fv * ((1 - fu) * v10 + fu * v11))
        return np.clip(value, 0.05, 0.95)


@dataclass
class Surface:
    """Planar patch: origin plus two edge vectors spanning the rectangle."""

    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    albedo: AlbedoField

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.edge_u = np.asarray(self.edge_u, dtype=float)
        self.edge_v = np.asarray(self.edge_v, dtype=float)
        n = np.cross(self.edge_u, self.edge_v)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            raise ValidationError("degenerate surface patch")
        self.normal = n / norm
        self.extent_u = float(np.linalg.norm(self.edge_u))
        self.extent_v = float(np.linalg.norm(self.edge_v))
        # Unmixing matrix: local (u,v) = unmix @ (p - origin).
        basis = np.stack([self.edge_u, self.edge_v], axis=1)
        self.unmix = np.linalg.pinv(basis)

    def albedo_at(self, u, v):
        return self.albedo.sample(np.asarray(u) * self.extent_u,
                                  np.asarray(v) * self.extent_v)

    def point_at(self, u, v):
        return self.origin + np.multiply.outer(u, self.edge_u) + np.multiply.outer(v, self.edge_v)

    def distance_to_points(self, points):
        rel = np.asarray(points) - self.origin
        uv = rel @ self.unmix.T
        uv = np.clip(uv, 0.0, 1.0)
        closest = self.origin + uv[:, :1] * self.edge_u + uv[:, 1:2] * self.edge_v
        return np.linalg.norm(points - closest, axis=1)


@dataclass
class SceneConfig:
    lane_count: int = 3
    lane_width: float = 3.5
    length: float = 150.0
    frame_count: int = 60          # camera frames per lane
    frame_dt: float = 0.1
    camera_time_offset: float = 0.05
    sensor_height: float = 2.0
    box_spacing: float = 16.0
    box_side_margin: float = 2.0
    ground_margin: float = 30.0
    texture_base: float = 0.5
    min_contrast: float = 0.05     # required std of a probe texture sample

    def validate(self):
        if self.lane_count < 1:
            raise ValidationError("scene: lane_count must be >= 1")
        if self.lane_width <= 0 or self.length <= 0:
            raise ValidationError("scene: lane_width and length must be positive")
        if self.frame_count < 2:
            raise ValidationError("scene: frame_count must be >= 2")
        if self.sensor_height < 0.5:
            raise ValidationError("scene: sensor_height under the 0.5 m clearance floor")


@dataclass
class SyntheticScene:
    surfaces: list
    lanes: list                    # per lane: list[TimedPose] (vehicle/LiDAR)
    seed: int
    config: SceneConfig

    def _plane_arrays(self):
        if not hasattr(self, "_normals"):
            self._normals = np.array([s.normal for s in self.surfaces])
            self._origins = np.array([s.origin for s in self.surfaces])
            self._unmix = np.array([s.unmix for s in self.surfaces])
            self._d0 = np.einsum("ij,ij->i", self._origins, self._normals)
        return self._normals, self._d0, self._origins, self._unmix

    def raycast(self, origins, dirs):
        """First-hit query for N rays.

        Returns (t, surface_index, albedo); misses hold t=inf, index=-1,
        albedo=0. dirs need not be normalized (t is in units of |dir|).
        """
        origins = np.ascontiguousarray(np.atleast_2d(np.asarray(origins, dtype=float)))
        dirs = np.ascontiguousarray(np.atleast_2d(np.asarray(dirs, dtype=float)))
        n = dirs.shape[0]
        single_origin = origins.shape[0] == 1
        if not single_origin and origins.shape[0] != n:
            raise ValidationError("raycast: origins must be length 1 or match dirs")
        normals, d0, s_origins, unmix = self._plane_arrays()
        if _HAVE_NUMBA:
            best_t, best_idx, best_uv = _raycast_kernel(
                origins, dirs, single_origin, normals, d0, s_origins, unmix)
        else:                                             # pragma: no cover
            best_t, best_idx, best_uv = self._raycast_numpy(
                origins, dirs, single_origin, normals, d0)
        albedo = np.zeros(n)
        for si in np.unique(best_idx):
            if si < 0:
                continue
            m = best_idx == si
            albedo[m] = self.surfaces[si].albedo_at(best_uv[m, 0], best_uv[m, 1])
        return best_t, best_idx, albedo

    def _raycast_numpy(self, origins, dirs, single_origin, normals, d0):
        n = dirs.shape[0]
        denom = dirs @ normals.T                       # (N, S)
        onum = d0[None, :] - origins @ normals.T       # (1, S) or (N, S)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_all = onum / denom
        t_all[~np.isfinite(t_all)] = np.inf
        t_all[t_all <= 1e-6] = np.inf
        best_t = np.full(n, np.inf)
        best_idx = np.full(n, -1, dtype=int)
        best_uv = np.zeros((n, 2))
        for si, s in enumerate(self.surfaces):
            t = t_all[:, si]
            cand = t < best_t
            if not np.any(cand):
                continue
            ci = np.flatnonzero(cand)
            o = origins[0] if single_origin else origins[ci]
            hits = o + t[ci, None] * dirs[ci]
            uv = (hits - s.origin) @ s.unmix.T
            inside = (uv[:, 0] >= 0) & (uv[:, 0] <= 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= 1)
            sel = ci[inside]
            best_t[sel] = t[sel]
            best_idx[sel] = si
            best_uv[sel] = uv[inside]
        return best_t, best_idx, best_uv

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in self.surfaces:
            h.update(s.origin.tobytes())
            h.update(s.edge_u.tobytes())
            h.update(s.edge_v.tobytes())
            for cell, amp, lattice in s.albedo.octaves:
                h.update(np.float64(cell).tobytes())
                h.update(np.float64(amp).tobytes())
                h.update(lattice.tobytes())
        for lane in self.lanes:
            for tp in lane:
                h.update(np.float64(tp.timestamp).tobytes())
                h.update(tp.pose.q.tobytes())
                h.update(tp.pose.t.tobytes())
        return h.hexdigest()

    def lane_offsets(self):
        c = self.config
        return [(i - (c.lane_count - 1) / 2.0) * c.lane_width for i in range(c.lane_count)]


def _box_surfaces(rng, center, size, base):
    """Five textured faces of an axis-aligned box (bottom omitted)."""
    cx, cy, cz = center
    sx, sy, sz = size
    x0, x1 = cx - sx / 2, cx + sx / 2
    y0, y1 = cy - sy / 2, cy + sy / 2
    z0, z1 = cz, cz + sz
    faces = [
        ((x0, y0, z0), (sx, 0, 0), (0, 0, sz)),   # -y side
        ((x0, y1, z0), (sx, 0, 0), (0, 0, sz)),   # +y side
        ((x0, y0, z0), (0, sy, 0), (0, 0, sz)),   # -x side
        ((x1, y0, z0), (0, sy, 0), (0, 0, sz)),   # +x side
        ((x0, y0, z1), (sx, 0, 0), (0, sy, 0)),   # top
    ]
    out = []
    for origin, eu, ev in faces:
        extent_u = np.linalg.norm(eu)
        extent_v = np.linalg.norm(ev)
        out.append(Surface(origin, eu, ev,
                           AlbedoField(rng, extent_u, extent_v, base=base)))
    return out


def generate_scene(config: SceneConfig, seed: int) -> SyntheticScene:
    """Build the deterministic multi-lane world for a given seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    c = config

    road_halfwidth = c.lane_count * c.lane_width / 2.0
    ground_halfwidth = road_halfwidth + c.box_side_margin + 10.0
    gx0 = -c.ground_margin
    gx1 = c.length + c.ground_margin
    ground = Surface(
        (gx0, -ground_halfwidth, 0.0),
        (gx1 - gx0, 0.0, 0.0),
        (0.0, 2 * ground_halfwidth, 0.0),
        AlbedoField(rng, gx1 - gx0, 2 * ground_halfwidth, base=c.texture_base),
    )
    surfaces = [ground]

    n_boxes = max(0, int(c.length // c.box_spacing))
    for i in range(n_boxes):
        for side in (-1.0, 1.0):
            bx = (i + 0.5) * c.box_spacing + rng.uniform(-2.0, 2.0)
            depth = rng.uniform(1.5, 4.0)
            width_along = rng.uniform(2.0, 6.0)
            height = rng.uniform(2.0, 5.0)
            by = side * (road_halfwidth + c.box_side_margin + depth / 2.0
                         + rng.uniform(0.0, 2.0))
            surfaces.append(_box_surfaces(rng, (bx, by, 0.0),
                                          (width_along, depth, height),
                                          c.texture_base))
    flat = [ground]
    for s in surfaces[1:]:
        flat.extend(s)
    surfaces = flat

    lanes = []
    lidar_count = c.frame_count + 1
    offsets = [(i - (c.lane_count - 1) / 2.0) * c.lane_width for i in range(c.lane_count)]
    identity_q = np.array([1.0, 0.0, 0.0, 0.0])
    for off in offsets:
        lane = []
        for k in range(lidar_count):
            x = c.length * k / (lidar_count - 1)
            lane.append(TimedPose(k * c.frame_dt,
                                  RigidTransform(identity_q, np.array([x, off, c.sensor_height]))))
        lanes.append(lane)

    scene = SyntheticScene(surfaces, lanes, seed, config=c)

    positions = np.array([tp.pose.t for lane in lanes for tp in lane])
    for s in scene.surfaces:
        if np.min(s.distance_to_points(positions)) < 0.5:
            raise ValidationError("scene: a lane trajectory passes within 0.5 m of a surface")

    probe = scene.surfaces[0].albedo_at(np.linspace(0.1, 0.9, 64), np.full(64, 0.37))
    if float(np.std(probe)) < c.min_contrast:
        raise ValidationError("scene: ground texture contrast below configured minimum")
    return scene


@dataclass
class ScanPattern:
    """Spinning-scanner beam layout: full azimuth sweep, fixed elevations."""

    azimuth_step_deg: float = 1.5
    elevations_deg: tuple = tuple(np.linspace(15.0, -55.0, 32))
    min_range: float = 1.0
    max_range: float = 80.0

    def directions(self):
        az = np.arange(0.0, 360.0, self.azimuth_step_deg) * math.pi / 180.0
        el = np.asarray(self.elevations_deg, dtype=float) * math.pi / 180.0
        azg, elg = np.meshgrid(az, el)
        ce = np.cos(elg.ravel())
        return np.stack([ce * np.cos(azg.ravel()),
                         ce * np.sin(azg.ravel()),
                         np.sin(elg.ravel())], axis=1)


@dataclass
class LidarScan:
    """One sweep: points are (x, y, z, intensity) in the sensor frame."""

    timestamp: float
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 4)


def simulate_lidar(scene: SyntheticScene, pose: RigidTransform,
                   pattern: ScanPattern) -> LidarScan:
    """Cast the pattern from `pose`; misses and out-of-gate returns are dropped."""
    dirs_sensor = pattern.directions()
    dirs_world = dirs_sensor @ pose.rotation.T
    t, idx, albedo = scene.raycast(pose.t[None, :], dirs_world)
    hit = (idx >= 0) & (t >= pattern.min_range) & (t <= pattern.max_range)
    pts = dirs_sensor[hit] * t[hit, None]
    return LidarScan(0.0, np.column_stack([pts, albedo[hit]]))


def render_camera(scene: SyntheticScene, camera: CameraModel,
                  pose: RigidTransform) -> GrayImage:
    """Lambertian albedo render; pixels whose rays miss all surfaces are invalid."""
    rays = camera.pixel_grid_rays().reshape(-1, 3)
    dirs_world = rays @ pose.rotation.T
    t, idx, albedo = scene.raycast(pose.t[None, :], dirs_world)
    hit = (idx >= 0).reshape(camera.height, camera.width)
    values = albedo.reshape(camera.height, camera.width)
    return GrayImage.from_float(values, mask=hit)


def perturb_trajectory(poses: list, sigma_trans: float, sigma_rot_deg: float,
                       seed: int) -> list:
    """Independent zero-mean Gaussian pose noise; sigma=0 returns the input values."""
    if sigma_trans < 0 or sigma_rot_deg < 0:
        raise ValidationError("perturbation sigmas must be non-negative")
    rng = np.random.default_rng(seed)
    sigma_rot = math.radians(sigma_rot_deg)
    out = []
    for tp in poses:
        dt = rng.normal(0.0, 1.0, 3) * sigma_trans
        dr = rng.normal(0.0, 1.0, 3) * sigma_rot
        q = quat_mul(quat_from_rotvec(dr), tp.pose.q)
        out.append(TimedPose(tp.timestamp, RigidTransform(q, tp.pose.t + dt)))
    return out


def drift_trajectory(poses: list, drift_trans_per_m: float,
                     drift_rot_deg_per_m: float, seed: int) -> list:
    """Smooth accumulated drift along the path (odometry-style error)."""
    rng = np.random.default_rng(seed)
    dir_t = rng.normal(size=3)
    dir_t /= np.linalg.norm(dir_t)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    out = []
    dist = 0.0
    prev = poses[0].pose.t
    for tp in poses:
        dist += float(np.linalg.norm(tp.pose.t - prev))
        prev = tp.pose.t
        dt = dir_t * (dist * drift_trans_per_m)
        dr = axis * math.radians(dist * drift_rot_deg_per_m)
        q = quat_mul(quat_from_rotvec(dr), tp.pose.q)
        out.append(TimedPose(tp.timestamp, RigidTransform(q, tp.pose.t + dt)))
    return out


def default_camera_extrinsic() -> RigidTransform:
    """Forward camera pose in the body frame: optical axis along body +x."""
    r = np.array([[0.0, 0.0, 1.0],
                  [-1.0, 0.0, 0.0],
                  [0.0, -1.0, 0.0]])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = [0.8, 0.0, -0.3]
    return RigidTransform.from_matrix(m)


def default_camera(width=320, height=240, fov_deg=90.0) -> CameraModel:
    fx = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    return CameraModel("pinhole-radtan", fx, fx, (width - 1) / 2.0,
                       (height - 1) / 2.0, width, height, np.zeros(0))


def oracle_correspondences(scene: SyntheticScene, frames: list, budget: int,
                           noise_sigma_px: float, outlier_ratio: float,
                           seed: int, min_obs: int = 2, max_obs: int = 12,
                           border: float = 2.0, max_range: float = 60.0) -> list:
    """Sample surface points co-visible in >= min_obs frames.

    `frames` is a list of (CameraModel, ground-truth pose). Observations are
    exact projections plus Gaussian pixel noise; a fraction is replaced by
    uniform outliers. Returns Landmark objects whose positions are the
    ground-truth surface points.
    """
    if budget < 1:
        raise ValidationError("correspondence budget must be >= 1")
    if not frames:
        raise ValidationError("oracle_correspondences: no frames given")
    rng = np.random.default_rng(seed)
    areas = np.array([np.linalg.norm(np.cross(s.edge_u, s.edge_v)) for s in scene.surfaces])
    probs = areas / areas.sum()
    cams = [f[0] for f in frames]
    poses = [f[1] for f in frames]
    positions = np.array([p.t for p in poses])

    landmarks = []
    attempts = 0
    max_attempts = budget * 400
    feature_id = 0
    while len(landmarks) < budget and attempts < max_attempts:
        attempts += 1
        si = int(rng.choice(len(scene.surfaces), p=probs))
        s = scene.surfaces[si]
        u, v = rng.random(), rng.random()
        point = s.point_at(u, v)

        dists = np.linalg.norm(positions - point, axis=0 if positions.ndim == 1 else 1)
        near = np.flatnonzero(dists <= max_range)
        vis = []
        for fi in near:
            cam, pose = cams[fi], poses[fi]
            p_cam = pose.apply_inverse(point)
            uv, ok = cam.project_many(p_cam[None, :])
            if not ok[0]:
                continue
            px = uv[0]
            if not (border <= px[0] <= cam.width - 1 - border
                    and border <= px[1] <= cam.height - 1 - border):
                continue
            r = float(np.linalg.norm(point - pose.t))
            d = (point - pose.t) / r
            t, idx, _ = scene.raycast(pose.t[None, :], d[None, :])
            if idx[0] < 0 or t[0] < r - 1e-6 * max(1.0, r):
                continue
            vis.append((int(fi), px))
        if len(vis) < min_obs:
            continue
        if len(vis) > max_obs:
            keep = np.linspace(0, len(vis) - 1, max_obs).round().astype(int)
            vis = [vis[i] for i in keep]
        obs = []
        for fi, px in vis:
            cam = cams[fi]
            if outlier_ratio > 0 and rng.random() < outlier_ratio:
                noisy = np.array([rng.uniform(0, cam.width - 1), rng.uniform(0, cam.height - 1)])
            else:
                noisy = px + rng.normal(0.0, 1.0, 2) * noise_sigma_px
            obs.append(Observation(frame_id=fi, pixel=noisy, feature_id=feature_id))
            feature_id += 1
        landmarks.append(Landmark(position=point.copy(), observations=obs))
    if not landmarks:
        raise ValidationError("oracle_correspondences: no co-visible geometry found")
    return landmarks
