"""Spatial queries over the stitched LiDAR intensity map.

The map is immutable after construction: exact k-NN lookups and point-splat
raycast rendering are read-only and safe to run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geometry import FISHEYE_EQUIDISTANT, CameraModel, RigidTransform
from .images import GrayImage, write_pgm, write_pgm16


class LidarMap:
    """Intensity point cloud with a k-d index and optional splat radius."""

    def __init__(self, points: np.ndarray, intensities: np.ndarray,
                 splat_radius: float = 0.03):
        points = np.ascontiguousarray(points, dtype=float).reshape(-1, 3)
        intensities = np.ascontiguousarray(intensities, dtype=float).reshape(-1)
        if points.shape[0] != intensities.shape[0]:
            raise ValidationError("points and intensities length mismatch")
        if np.any(intensities < 0) or np.any(intensities > 1):
            raise ValidationError("intensities must lie in [0, 1]")
        if splat_radius <= 0:
            raise ValidationError("splat radius must be positive")
        points.setflags(write=False)
        intensities.setflags(write=False)
        self.points = points
        self.intensities = intensities
        self.splat_radius = float(splat_radius)
        self.tree = cKDTree(points)

    @classmethod
    def from_cloud(cls, cloud: np.ndarray, splat_radius: float = 0.03) -> "LidarMap":
        """Build from an (N,4) x/y/z/intensity array."""
        cloud = np.asarray(cloud, dtype=float).reshape(-1, 4)
        return cls(cloud[:, :3], cloud[:, 3], splat_radius)

    def __len__(self):
        return self.points.shape[0]


def nearest_neighbors(lidar_map: LidarMap, query: np.ndarray, k: int,
                      radius: float):
    """Exact k nearest neighbors within `radius` of `query`.

    Returns (indices, distances) sorted by distance, ties broken by point
    index. May return fewer than k entries (or none).
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    if radius <= 0:
        raise ValidationError("radius must be positive")
    d, i = lidar_map.tree.query(np.asarray(query, dtype=float), k=k,
                                distance_upper_bound=radius)
    d = np.atleast_1d(d)
    i = np.atleast_1d(i)
    found = np.isfinite(d)
    d, i = d[found], i[found]
    order = np.lexsort((i, d))
    return i[order], d[order]


def knn_batch(lidar_map: LidarMap, queries: np.ndarray, k: int, radius: float):
    """Vectorized k-NN for (N,3) queries; returns (indices, distances) padded
    with -1 / inf beyond the neighbor count."""
    d, i = lidar_map.tree.query(np.asarray(queries, dtype=float), k=k,
                                distance_upper_bound=radius)
    if k == 1:
        d, i = d[:, None], i[:, None]
    missing = ~np.isfinite(d)
    i = np.where(missing, -1, i)
    return i, d


@dataclass
class RaycastImage:
    """Point-splat rendering of the map: float intensity, metric depth, mask."""

    intensity: np.ndarray            # (H, W) float in [0, 1]
    depth: np.ndarray                # (H, W) float meters; inf where invalid
    valid: np.ndarray                # (H, W) bool

    def to_gray(self) -> GrayImage:
        """Quantize intensities to 8 bits (done only at metric time)."""
        return GrayImage.from_float(np.where(self.valid, self.intensity, 0.0),
                                    mask=self.valid)

    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid))


def raycast_intensity(lidar_map: LidarMap, camera: CameraModel,
                      pose: RigidTransform, cull_radius: float = None,
                      max_splat_px: int = 8) -> RaycastImage:
    """Render the map into the camera with a z-buffered point splat.

    Each point covers a disc of screen radius max(1, f*r/depth) pixels;
    the nearest depth wins a pixel and carries its intensity.
    """
    pts = lidar_map.points
    intens = lidar_map.intensities
    if cull_radius is not None:
        idx = lidar_map.tree.query_ball_point(pose.t, r=cull_radius)
        idx = np.asarray(idx, dtype=int)
        pts = pts[idx]
        intens = intens[idx]

    h, w = camera.height, camera.width
    depth_buf = np.full((h, w), np.inf)
    inten_buf = np.zeros((h, w))
    if pts.shape[0] == 0:
        return RaycastImage(inten_buf, depth_buf, np.zeros((h, w), dtype=bool))

    p_cam = pose.apply_inverse(pts)
    uv, valid = camera.project_many(p_cam)
    if camera.kind == FISHEYE_EQUIDISTANT:
        depth = np.linalg.norm(p_cam, axis=1)
    else:
        depth = p_cam[:, 2]
    uv = np.nan_to_num(uv, nan=-1e9)
    u = np.round(uv[:, 0]).astype(np.int64, copy=False)
    v = np.round(uv[:, 1]).astype(np.int64, copy=False)
    keep = valid & (depth > 1e-6)
    keep &= (u > -max_splat_px) & (u < w + max_splat_px)
    keep &= (v > -max_splat_px) & (v < h + max_splat_px)
    u, v, depth, intens = u[keep], v[keep], depth[keep], intens[keep]

    r_px = np.clip(camera.fx * lidar_map.splat_radius / depth, 1.0, max_splat_px)
    r_int = np.ceil(r_px).astype(int)
    for radius in np.unique(r_int):
        sel = r_int == radius
        us, vs, ds, its = u[sel], v[sel], depth[sel], intens[sel]
        rr = int(radius)
        for dy in range(-rr + 1, rr):
            for dx in range(-rr + 1, rr):
                if dx * dx + dy * dy >= radius * radius and (dx or dy):
                    continue
                px, py = us + dx, vs + dy
                inb = (px >= 0) & (px < w) & (py >= 0) & (py < h)
                np.minimum.at(depth_buf, (py[inb], px[inb]), ds[inb])
    # Second pass: the owning point writes its intensity.
    for radius in np.unique(r_int):
        sel = r_int == radius
        us, vs, ds, its = u[sel], v[sel], depth[sel], intens[sel]
        rr = int(radius)
        for dy in range(-rr + 1, rr):
            for dx in range(-rr + 1, rr):
                if dx * dx + dy * dy >= radius * radius and (dx or dy):
                    continue
                px, py = us + dx, vs + dy
                inb = (px >= 0) & (px < w) & (py >= 0) & (py < h)
                pxi, pyi = px[inb], py[inb]
                match = depth_buf[pyi, pxi] == ds[inb]
                inten_buf[pyi[match], pxi[match]] = its[inb][match]
    valid_buf = np.isfinite(depth_buf)
    return RaycastImage(inten_buf, np.where(valid_buf, depth_buf, np.inf), valid_buf)


def export_raycast(path_prefix, image: RaycastImage) -> None:
    """Write `<prefix>_intensity.pgm` (8-bit) and `<prefix>_depth.pgm`
    (16-bit millimeters, invalid pixels = 0)."""
    write_pgm(f"{path_prefix}_intensity.pgm", image.to_gray())
    mm = np.where(image.valid, np.clip(image.depth * 1000.0, 0, 65535), 0.0)
    write_pgm16(f"{path_prefix}_depth.pgm", mm.astype(np.uint16))
