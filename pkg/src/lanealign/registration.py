"""Camera-to-LiDAR-map registration: joint pose/landmark refinement.

Three factor families act on camera poses and sparse visual landmarks
against a fixed intensity map:

  - reprojection factors tie landmarks to their pixel tracks,
  - unary map priors anchor landmark positions to picked map points,
  - cross-modal factors tie frames to the map through matches against the
    raycast intensity image (pixel level) and through a dense photometric
    term driven by image gradients.

Data association (map-point picks and raycast images) is refreshed on a
fixed period while a damped least-squares solver advances the variables in
between: an expectation-maximization alternation with a shared iteration
budget.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_left
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import (
    FISHEYE_EQUIDISTANT,
    CameraModel,
    RigidTransform,
    interpolate_pose,
)
from .images import GrayImage, gradient_magnitude, sample_bspline
from .mapquery import LidarMap, RaycastImage, knn_batch, raycast_intensity
from . import optim

log = logging.getLogger(__name__)


@dataclass
class Observation:
    frame_id: int
    pixel: np.ndarray
    feature_id: int = -1

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)


@dataclass
class PriorAnchor:
    point: np.ndarray
    weight: float


@dataclass
class Landmark:
    """Sparse visual 3-D point with pixel observations and optional map prior."""

    position: np.ndarray
    observations: list = field(default_factory=list)
    prior: PriorAnchor | None = None
    low_parallax: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)


@dataclass
class FactorConfig:
    """Factor enables, covariances, and association-refresh settings."""

    use_f1: bool = True
    use_f2: bool = True
    use_f3: bool = True
    omega1: float = 1.0              # px^2, reprojection
    omega2: float = 0.3              # m^2 (isotropic), landmark map prior
    omega3_sparse: float = 1.0       # px^2, cross-modal pixel matches
    omega3_dense: float = 0.01       # intensity^2, photometric term
    budget: int = 500                # correspondence budget per matching stage
    refresh_period: int = 3          # solver iterations between E-steps
    huber_px: float = 2.0
    psi_k: int = 8
    psi_radius: float = 1.0
    psi_sigma: float = 0.1
    dense_pixels: int = 2000
    dense_grad_min: float = 0.01
    dense_min_pixels: int = 50
    cull_radius: float = 40.0        # map cull for raycasting, meters

    def validate(self):
        for name in ("omega1", "omega2", "omega3_sparse", "omega3_dense"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"FactorConfig.{name} must be positive definite")
        if self.refresh_period < 1:
            raise ValidationError("refresh_period must be >= 1")
        if self.budget < 1:
            raise ValidationError("correspondence budget must be >= 1")

    def enabled(self):
        s = set()
        if self.use_f1:
            s.add("f1")
        if self.use_f2:
            s.add("f2")
        if self.use_f3:
            s.add("f3")
        return s


@dataclass
class RegistrationProblem:
    """Poses, landmarks, and the fixed map they are registered against."""

    poses: dict                          # frame_id -> RigidTransform
    landmarks: list
    lidar_map: LidarMap
    cameras: dict                        # frame_id -> CameraModel
    config: FactorConfig
    images: dict | None = None           # frame_id -> GrayImage (needed for f3)
    provider: object | None = None       # cross-modal matcher (needed for f3)


# -- pose initialization --------------------------------------------------

def initialize_camera_poses(lidar_trajectory: list, extrinsic: RigidTransform,
                            camera_timestamps: list) -> list:
    """Interpolate the LiDAR trajectory at each camera timestamp and compose
    with the camera-in-body extrinsic."""
    times = [tp.timestamp for tp in lidar_trajectory]
    poses = []
    for fid, ts in enumerate(camera_timestamps):
        j = bisect_left(times, ts)
        if j < len(times) and times[j] == ts:
            base = lidar_trajectory[j].pose
        else:
            if j == 0 or j >= len(times):
                raise ValidationError(
                    f"camera frame {fid}: timestamp {ts} not bracketed by the LiDAR trajectory")
            base = interpolate_pose(lidar_trajectory[j - 1], lidar_trajectory[j], ts)
        poses.append(base.compose(extrinsic))
    return poses


# -- triangulation --------------------------------------------------------

def _observation_rays(landmark, poses, cameras):
    rays = []
    for obs in landmark.observations:
        if obs.frame_id not in poses:
            continue
        pose = poses[obs.frame_id]
        cam = cameras[obs.frame_id]
        try:
            d = cam.pixel_ray(obs.pixel)
        except ValidationError:
            continue
        rays.append((pose.t, pose.rotation @ d))
    return rays


def triangulate_landmarks(landmarks: list, poses: dict, cameras: dict,
                          low_parallax_deg: float = 0.5,
                          fallback_map: LidarMap = None,
                          psi_k: int = 8, psi_radius: float = 1.0,
                          psi_sigma: float = 0.1) -> list:
    """Midpoint-of-rays linear triangulation.

    Landmarks whose rays span less than `low_parallax_deg` are flagged.
    Degenerate (parallel-ray) landmarks fall back to a map pick seeded from
    the ray midpoint when a map is given, and are dropped otherwise.
    """
    out = []
    thresh = math.radians(low_parallax_deg)
    for lm in landmarks:
        rays = _observation_rays(lm, poses, cameras)
        if len(rays) < 2:
            raise ValidationError("triangulation requires >= 2 usable observations")
        a = np.zeros((3, 3))
        b = np.zeros(3)
        for o, d in rays:
            m = np.eye(3) - np.outer(d, d)
            a += m
            b += m @ o
        max_angle = 0.0
        for i in range(len(rays)):
            for j in range(i + 1, len(rays)):
                c = abs(float(np.dot(rays[i][1], rays[j][1])))
                max_angle = max(max_angle, math.acos(min(1.0, c)))
        low_parallax = max_angle < thresh
        eigvals = np.linalg.eigvalsh(a)
        if eigvals[0] < 1e-9:
            position = None
            if fallback_map is not None:
                mid = np.mean([o + d for o, d in rays], axis=0)
                anchor = pick_prior_point(fallback_map, mid, rays,
                                          k=psi_k, radius=psi_radius, sigma=psi_sigma)
                if anchor is not None:
                    position = anchor.point
            if position is None:
                log.info("dropping landmark with parallel observation rays")
                continue
            lm2 = Landmark(position, lm.observations, low_parallax=True)
        else:
            p = np.linalg.solve(a, b)
            lm2 = Landmark(p, lm.observations, low_parallax=low_parallax)
        out.append(lm2)
    return out


# -- residual functions ----------------------------------------------------

def _camera_point(pose: RigidTransform, position: np.ndarray) -> np.ndarray:
    return pose.apply_inverse(position)


def _projectable(camera: CameraModel, q: np.ndarray) -> bool:
    if camera.kind == FISHEYE_EQUIDISTANT:
        r = math.hypot(q[0], q[1])
        return (np.linalg.norm(q) > 1e-9) and not (r < 1e-9 and q[2] < 0)
    return q[2] > 1e-6


def residual_f1(pose: RigidTransform, landmark_position, observed_pixel,
                camera: CameraModel):
    """Reprojection residual (observed - predicted, px); None when the
    point is not projectable (factor deactivated this iteration)."""
    q = _camera_point(pose, np.asarray(landmark_position, dtype=float))
    if not _projectable(camera, q):
        return None
    uv, ok = camera.project_many(q[None, :])
    if not ok[0]:
        return None
    return np.asarray(observed_pixel, dtype=float) - uv[0]


def residual_f2(landmark_position, anchor_point):
    """Unary map-prior residual: landmark minus its picked anchor (m)."""
    return np.asarray(landmark_position, dtype=float) - np.asarray(anchor_point, dtype=float)


def residual_f3_sparse(pose, landmark_position, match_pixel, camera):
    """Cross-modal pixel residual: raycast-image match minus prediction."""
    return residual_f1(pose, landmark_position, match_pixel, camera)


# -- point picking (map prior anchors) --------------------------------------

def pick_prior_point(lidar_map: LidarMap, landmark_position, rays,
                     k: int = 8, radius: float = 1.0,
                     sigma: float = 0.1) -> PriorAnchor | None:
    """Pick a map anchor for a landmark.

    Candidates are the k nearest map points within `radius`. Each is scored
    by exp(-d^2/sigma^2) where d is the worst (largest) perpendicular
    distance from the candidate to any observing ray; the anchor is the
    score-weighted mean. Returns None when no candidate exists or all
    scores vanish.
    """
    from .mapquery import nearest_neighbors

    idx, _ = nearest_neighbors(lidar_map, np.asarray(landmark_position, dtype=float),
                               k=k, radius=radius)
    if idx.size == 0 or not rays:
        return None
    cands = lidar_map.points[idx]
    worst = np.zeros(len(cands))
    for origin, direction in rays:
        rel = cands - origin
        along = rel @ direction
        perp = rel - np.outer(along, direction)
        worst = np.maximum(worst, np.linalg.norm(perp, axis=1))
    weights = np.exp(-(worst ** 2) / (sigma ** 2))
    total = float(weights.sum())
    if total < 1e-12:
        return None
    anchor = (weights[:, None] * cands).sum(axis=0) / total
    return PriorAnchor(anchor, float(weights.max()))


# -- residual blocks for the solver -----------------------------------------

def _pose_point_jacobians(camera, pose, q):
    """(J_pose 2x6, J_point 2x3) of r = obs - project(T^-1 p)."""
    jk = camera.project_jacobian(q)
    sk = np.array([[0.0, -q[2], q[1]], [q[2], 0.0, -q[0]], [-q[1], q[0], 0.0]])
    j_pose = np.empty((2, 6))
    j_pose[:, :3] = jk
    j_pose[:, 3:] = -jk @ sk
    j_point = -jk @ pose.rotation.T
    return j_pose, j_point


class ReprojectionBlock(optim.ResidualBlock):
    """Pixel-track factor on (pose, landmark)."""

    dim = 2

    def __init__(self, pose_key, lm_key, observed_pixel, camera, sqrt_info, loss=None):
        self.keys = (pose_key, lm_key)
        self.observed = np.asarray(observed_pixel, dtype=float)
        self.camera = camera
        self.sqrt_info = sqrt_info
        self.loss = loss
        self.active = True

    def residual(self, pose, position):
        r = residual_f1(pose, position, self.observed, self.camera)
        if r is None:
            self.active = False
            return np.zeros(2)
        self.active = True
        return r

    def jacobians(self, pose, position):
        q = _camera_point(pose, position)
        if not _projectable(self.camera, q):
            return [np.zeros((2, 6)), np.zeros((2, 3))]
        j_pose, j_point = _pose_point_jacobians(self.camera, pose, q)
        return [j_pose, j_point]


class AnchorBlock(optim.ResidualBlock):
    """Unary landmark prior toward a picked map point."""

    dim = 3
    _eye = np.eye(3)

    def __init__(self, lm_key, anchor_point, sqrt_info):
        self.keys = (lm_key,)
        self.anchor = np.asarray(anchor_point, dtype=float)
        self.sqrt_info = sqrt_info

    def residual(self, position):
        return residual_f2(position, self.anchor)

    def jacobians(self, position):
        return [self._eye]


@dataclass
class DenseFrameData:
    """Per-frame photometric data frozen at an association refresh."""

    points_world: np.ndarray         # (M,3) backprojected raycast points
    reference: np.ndarray            # (M,) normalized map intensity
    norm_image: np.ndarray           # (H,W) normalized camera grayscale
    pixel_count: int


class DensePhotometricBlock(optim.ResidualBlock):
    """Cross-modal photometric factor on one pose.

    Residual per selected pixel: normalized camera grayscale sampled at the
    current projection of the frozen map point, minus the frozen normalized
    map intensity. The Jacobian chains the image gradient through the
    projection Jacobian into the pose tangent.
    """

    def __init__(self, pose_key, data: DenseFrameData, camera, sqrt_info):
        self.keys = (pose_key,)
        self.data = data
        self.camera = camera
        self.sqrt_info = sqrt_info
        self.dim = data.points_world.shape[0]

    def _project(self, pose):
        q = pose.apply_inverse(self.data.points_world)
        uv, ok = self.camera.project_many(q)
        return q, uv, ok

    def residual(self, pose):
        _, uv, ok = self._project(pose)
        uv = np.nan_to_num(uv, nan=-1.0)
        val, _, _ = sample_bspline(self.data.norm_image, uv[:, 0], uv[:, 1])
        r = val - self.data.reference
        r[~ok | ~np.isfinite(r)] = 0.0
        return r

    def jacobians(self, pose):
        q, uv, ok = self._project(pose)
        uv = np.nan_to_num(uv, nan=-1.0)
        _, gu, gv = sample_bspline(self.data.norm_image, uv[:, 0], uv[:, 1])
        jk = self.camera.project_jacobian_many(q)          # (M,2,3)
        # dq/d(tangent) for the right-perturbed pose: [-I | hat(q)].
        dqd = np.zeros((q.shape[0], 3, 6))
        dqd[:, 0, 0] = dqd[:, 1, 1] = dqd[:, 2, 2] = -1.0
        dqd[:, 0, 4] = -q[:, 2]
        dqd[:, 0, 5] = q[:, 1]
        dqd[:, 1, 3] = q[:, 2]
        dqd[:, 1, 5] = -q[:, 0]
        dqd[:, 2, 3] = -q[:, 1]
        dqd[:, 2, 4] = q[:, 0]
        duv = np.einsum("mij,mjk->mik", jk, dqd)           # (M,2,6)
        grad = np.stack([gu, gv], axis=1)
        j = np.einsum("mi,mik->mk", grad, duv)
        bad = ~ok | ~np.isfinite(j).all(axis=1)
        j[bad] = 0.0
        return [j]


def residual_f3_dense(pose: RigidTransform, data: DenseFrameData,
                      camera: CameraModel) -> np.ndarray:
    """Dense photometric residual vector for one frame."""
    block = DensePhotometricBlock("pose", data, camera, sqrt_info=None)
    return block.residual(pose)


def build_dense_frame_data(image: GrayImage, raycast: RaycastImage,
                           camera: CameraModel, pose: RigidTransform,
                           config: FactorConfig) -> DenseFrameData | None:
    """Select high-gradient valid raycast pixels and freeze their map
    geometry/intensity for the next solve window.

    Invalid image pixels are filled with the valid mean before gradients are
    taken, so holes neither dominate the gradient ranking nor produce
    explosive residuals when a projection strays onto them.
    """
    gray = image.as_float()
    joint = raycast.valid & image.mask
    if not np.any(joint):
        return None
    fill = float(gray[joint].mean())
    filled = np.where(image.mask, gray, fill)
    grad = gradient_magnitude(filled)
    h, w = gray.shape
    core = np.zeros_like(joint)
    core[2:h - 2, 2:w - 2] = joint[2:h - 2, 2:w - 2]
    sel = core & (grad > config.dense_grad_min)
    count = int(np.count_nonzero(sel))
    if count < config.dense_min_pixels:
        log.info("dense term skipped: %d valid pixels (< %d)", count, config.dense_min_pixels)
        return None
    vy, vx = np.nonzero(sel)
    order = np.argsort(grad[vy, vx])[::-1][:config.dense_pixels]
    vy, vx = vy[order], vx[order]

    rays = camera.pixel_rays(np.stack([vx, vy], axis=1).astype(float))
    depth = raycast.depth[vy, vx]
    if camera.kind == FISHEYE_EQUIDISTANT:
        p_cam = rays * depth[:, None]
    else:
        p_cam = rays * (depth / rays[:, 2])[:, None]
    points_world = pose.apply(p_cam)

    c_sel = filled[vy, vx]
    l_sel = raycast.intensity[vy, vx]
    mu_c, sd_c = float(c_sel.mean()), max(float(c_sel.std()), 1e-3)
    mu_l, sd_l = float(l_sel.mean()), max(float(l_sel.std()), 1e-3)
    norm_image = (np.where(joint, filled, mu_c) - mu_c) / sd_c
    # The reference samples the map channel through the same smoothing
    # spline the residual uses for the camera channel; identical channels
    # then cancel exactly.
    l_fill = np.where(raycast.valid, raycast.intensity, mu_l)
    l_norm = (l_fill - mu_l) / sd_l
    reference, _, _ = sample_bspline(l_norm, vx.astype(float), vy.astype(float))
    return DenseFrameData(points_world, reference, norm_image, count)


# -- cross-modal correspondence providers ------------------------------------

class OracleCrossModalProvider:
    """Ground-truth matcher: places each landmark's raycast-image match at
    the projection of its true surface point, plus pixel noise."""

    name = "oracle"

    def __init__(self, true_positions: np.ndarray, sigma_px: float = 0.0,
                 seed: int = 0, per_frame_cap: int = 50):
        self.true_positions = np.asarray(true_positions, dtype=float)
        self.sigma_px = sigma_px
        self.seed = seed
        self.per_frame_cap = per_frame_cap

    def match(self, frame_id, round_index, camera, pose, raycast, landmark_ids, image):
        rng = np.random.default_rng([self.seed, round_index, frame_id])
        out = []
        for lm_id in landmark_ids[:self.per_frame_cap]:
            p = self.true_positions[lm_id]
            q = pose.apply_inverse(p)
            if not _projectable(camera, q):
                continue
            uv, ok = camera.project_many(q[None, :])
            if not ok[0]:
                continue
            w = uv[0] + rng.normal(0.0, 1.0, 2) * self.sigma_px
            out.append((lm_id, w))
        return out


class NccCrossModalProvider:
    """Deterministic classical matcher: zero-mean NCC between a camera
    patch at each observation and the raycast intensity image."""

    name = "ncc"

    def __init__(self, patch: int = 11, search_radius: int = 10,
                 ratio: float = 0.8, min_score: float = 0.5,
                 per_frame_cap: int = 50):
        if patch % 2 == 0:
            raise ValidationError("NCC patch size must be odd")
        self.patch = patch
        self.search_radius = search_radius
        self.ratio = ratio
        self.min_score = min_score
        self.per_frame_cap = per_frame_cap

    def match(self, frame_id, round_index, camera, pose, raycast, landmark_ids,
              image, observed_pixels=None):
        gray = image.as_float()
        lint = np.where(raycast.valid, raycast.intensity, np.nan)
        half = self.patch // 2
        h, w = gray.shape
        out = []
        for lm_id, px in zip(landmark_ids[:self.per_frame_cap],
                             observed_pixels[:self.per_frame_cap]):
            u, v = int(round(px[0])), int(round(px[1]))
            r = self.search_radius
            if not (half + r <= u < w - half - r and half + r <= v < h - half - r):
                continue
            tpl = gray[v - half:v + half + 1, u - half:u + half + 1]
            tpl = tpl - tpl.mean()
            tn = np.linalg.norm(tpl)
            if tn < 1e-9:
                continue
            region = lint[v - half - r:v + half + r + 1, u - half - r:u + half + r + 1]
            try:
                from numpy.lib.stride_tricks import sliding_window_view
                wins = sliding_window_view(region, (self.patch, self.patch))
            except ValueError:
                continue
            means = wins.mean(axis=(2, 3))
            centered = wins - means[..., None, None]
            norms = np.sqrt((centered ** 2).sum(axis=(2, 3)))
            scores = (centered * tpl).sum(axis=(2, 3)) / np.maximum(norms * tn, 1e-12)
            scores = np.where(np.isfinite(scores), scores, -np.inf)
            flat = scores.ravel()
            best = int(np.argmax(flat))
            best_score = flat[best]
            if not np.isfinite(best_score) or best_score < self.min_score:
                continue
            by, bx = divmod(best, scores.shape[1])
            # Second best outside a 2-px exclusion zone around the winner.
            masked = scores.copy()
            masked[max(0, by - 2):by + 3, max(0, bx - 2):bx + 3] = -np.inf
            second = float(np.max(masked))
            if np.isfinite(second) and second > self.ratio * best_score:
                continue
            out.append((lm_id, np.array([u - r + bx, v - r + by], dtype=float)))
        return out


# -- EM orchestration --------------------------------------------------------

@dataclass
class RoundReport:
    round_index: int
    solver: optim.SolverReport
    cost_f1: float
    cost_f2: float
    cost_f3_sparse: float
    cost_f3_dense: float
    total_cost: float
    provider_name: str = ""
    sparse_match_count: int = 0


def _frame_observations(landmarks):
    by_frame = {}
    for li, lm in enumerate(landmarks):
        for obs in lm.observations:
            by_frame.setdefault(obs.frame_id, []).append((li, obs))
    return by_frame


def _assemble(problem: RegistrationProblem, anchors, sparse_matches, dense_data,
              fix_first_pose: bool):
    cfg = problem.config
    lsq = optim.LeastSquaresProblem()
    frame_ids = sorted(problem.poses)
    for fid in frame_ids:
        lsq.add_variable(f"T{fid}", problem.poses[fid], kind=optim.SE3,
                         fixed=(fix_first_pose and fid == frame_ids[0]))
    for li, lm in enumerate(problem.landmarks):
        lsq.add_variable(f"p{li}", lm.position)

    huber = optim.HuberKernel(cfg.huber_px) if cfg.huber_px > 0 else None
    w1 = 1.0 / math.sqrt(cfg.omega1)
    w2 = 1.0 / math.sqrt(cfg.omega2)
    w3s = 1.0 / math.sqrt(cfg.omega3_sparse)
    w3d = 1.0 / math.sqrt(cfg.omega3_dense)

    groups = {"f1": [], "f2": [], "f3s": [], "f3d": []}
    if cfg.use_f1:
        for li, lm in enumerate(problem.landmarks):
            for obs in lm.observations:
                if obs.frame_id not in problem.poses:
                    continue
                blk = ReprojectionBlock(f"T{obs.frame_id}", f"p{li}", obs.pixel,
                                        problem.cameras[obs.frame_id], w1, loss=huber)
                lsq.add_residual(blk)
                groups["f1"].append(blk)
    if cfg.use_f2:
        for li, anchor in anchors.items():
            blk = AnchorBlock(f"p{li}", anchor.point, w2)
            lsq.add_residual(blk)
            groups["f2"].append(blk)
    if cfg.use_f3:
        for fid, matches in sparse_matches.items():
            for li, w in matches:
                blk = ReprojectionBlock(f"T{fid}", f"p{li}", w,
                                        problem.cameras[fid], w3s, loss=huber)
                lsq.add_residual(blk)
                groups["f3s"].append(blk)
        for fid, data in dense_data.items():
            blk = DensePhotometricBlock(f"T{fid}", data, problem.cameras[fid], w3d)
            lsq.add_residual(blk)
            groups["f3d"].append(blk)
    return lsq, groups


def _group_cost(lsq, blocks):
    return float(sum(lsq.block_cost(b) for b in blocks))


def refresh_associations(problem: RegistrationProblem, round_index: int):
    """E-step: recompute map anchors, raycast images, cross-modal matches,
    and dense photometric data at the current poses."""
    cfg = problem.config
    anchors = {}
    sparse_matches = {}
    dense_data = {}
    raycasts = {}

    if cfg.use_f2:
        for li, lm in enumerate(problem.landmarks):
            rays = _observation_rays(lm, problem.poses, problem.cameras)
            anchor = pick_prior_point(problem.lidar_map, lm.position, rays,
                                      k=cfg.psi_k, radius=cfg.psi_radius,
                                      sigma=cfg.psi_sigma)
            if anchor is not None:
                anchors[li] = anchor
                lm.prior = anchor
            else:
                lm.prior = None

    if cfg.use_f3:
        by_frame = _frame_observations(problem.landmarks)
        for fid in sorted(problem.poses):
            pose = problem.poses[fid]
            camera = problem.cameras[fid]
            rc = raycast_intensity(problem.lidar_map, camera, pose,
                                   cull_radius=cfg.cull_radius)
            raycasts[fid] = rc
            image = problem.images.get(fid) if problem.images else None
            if image is None:
                continue
            entries = by_frame.get(fid, [])
            lm_ids = [li for li, _ in entries]
            pixels = [obs.pixel for _, obs in entries]
            if problem.provider is not None and lm_ids:
                try:
                    matches = problem.provider.match(fid, round_index, camera, pose,
                                                     rc, lm_ids, image,
                                                     observed_pixels=pixels)
                except TypeError:
                    matches = problem.provider.match(fid, round_index, camera, pose,
                                                     rc, lm_ids, image)
                kept = []
                for li, wpx in matches[:cfg.budget]:
                    ui, vi = int(round(wpx[0])), int(round(wpx[1]))
                    if not (0 <= ui < camera.width and 0 <= vi < camera.height):
                        continue
                    if not rc.valid[vi, ui]:
                        continue   # match on a no-return pixel: skipped
                    kept.append((li, np.asarray(wpx, dtype=float)))
                if kept:
                    sparse_matches[fid] = kept
            data = build_dense_frame_data(image, rc, camera, pose, cfg)
            if data is not None:
                dense_data[fid] = data
    return anchors, sparse_matches, dense_data, raycasts


def optimize_em(problem: RegistrationProblem,
                settings: optim.SolverSettings | None = None,
                em_cost_tolerance: float = 1e-8):
    """Alternate association refresh and damped least-squares updates.

    Runs E/M rounds until the iteration budget (settings.max_iterations,
    shared across rounds) is used or the round-end cost stalls. Returns
    (poses, landmarks, [RoundReport]).
    """
    cfg = problem.config
    cfg.validate()
    enabled = cfg.enabled()
    if cfg.use_f3 and problem.images is None:
        raise ValidationError("f3 requires per-frame images")
    settings = settings or optim.SolverSettings()
    fix_first = enabled == {"f1"}

    budget = settings.max_iterations
    used = 0
    damping = settings.initial_damping
    prev_cost = None
    reports = []
    round_index = 0
    while used < budget:
        round_index += 1
        anchors, sparse_matches, dense_data, _ = refresh_associations(problem, round_index)
        lsq, groups = _assemble(problem, anchors, sparse_matches, dense_data, fix_first)
        msettings = optim.SolverSettings(
            max_iterations=min(cfg.refresh_period, budget - used),
            initial_damping=damping,
            damping_increase=settings.damping_increase,
            damping_decrease=settings.damping_decrease,
            max_damping=settings.max_damping,
            cost_tolerance=settings.cost_tolerance,
            step_tolerance=settings.step_tolerance,
            dense_parameter_limit=settings.dense_parameter_limit)
        try:
            values, report = optim.solve(lsq, msettings)
        except Exception as exc:
            raise type(exc)(f"EM round {round_index}: {exc}") from exc
        for fid in problem.poses:
            problem.poses[fid] = values[f"T{fid}"]
        for li, lm in enumerate(problem.landmarks):
            lm.position = values[f"p{li}"]
        used += max(report.iterations, 1)
        damping = report.final_damping

        reports.append(RoundReport(
            round_index=round_index,
            solver=report,
            cost_f1=_group_cost(lsq, groups["f1"]),
            cost_f2=_group_cost(lsq, groups["f2"]),
            cost_f3_sparse=_group_cost(lsq, groups["f3s"]),
            cost_f3_dense=_group_cost(lsq, groups["f3d"]),
            total_cost=report.final_cost,
            provider_name=getattr(problem.provider, "name", ""),
            sparse_match_count=sum(len(v) for v in sparse_matches.values()),
        ))
        if prev_cost is not None and abs(prev_cost - report.final_cost) < em_cost_tolerance:
            break
        prev_cost = report.final_cost
    return problem.poses, problem.landmarks, reports
