"""Colored truncated signed distance volumes fused from masked RGB-D frames.

Sign convention: positive on the camera side of a surface, negative inside.
Voxels never observed keep weight 0 and sdf +truncation.  A foreground volume
additionally integrates pixels outside its object mask as weak free-space
evidence, so the fused object floats in observed-empty space and can be
re-posed without dragging its surroundings along.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import measure

from .dataset import RGBDFrame
from .geometry import CameraIntrinsics, Pose, invert_pose, quat_to_matrix

DEFAULT_VOXEL_SIZE = 0.005
TRUNCATION_FACTOR = 4           # truncation = factor * voxel_size
FREE_SPACE_WEIGHT = 0.1         # weight of out-of-mask emptiness evidence
DEPTH_EDGE_JUMP = 0.02          # minimum depth jump that flags an occlusion edge


@dataclass
class MaskPolicy:
    """Which pixels count as surface and which as evidence of empty space."""


@dataclass
class ForegroundPolicy(MaskPolicy):
    object_id: str


@dataclass
class BackgroundPolicy(MaskPolicy):
    excluded_ids: frozenset[str] = frozenset()


class TsdfVolume:
    """Axis-aligned voxel grid of truncated signed distances with per-voxel
    fusion weights and colors.  Voxel center i = origin + (i + 0.5) * voxel_size.
    """

    def __init__(self, origin, voxel_size: float, dims, truncation: float | None = None):
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.truncation = float(truncation if truncation is not None
                                else TRUNCATION_FACTOR * voxel_size)
        self.sdf = np.full(self.dims, self.truncation, dtype=np.float64)
        self.weight = np.zeros(self.dims, dtype=np.float64)
        self.color = np.zeros(self.dims + (3,), dtype=np.float32)
        self.color_weight = np.zeros(self.dims, dtype=np.float32)
        self.frames_integrated = 0
        self.frames_outside = 0
        self._centers: np.ndarray | None = None

    @staticmethod
    def from_bounds(lo, hi, voxel_size: float, truncation: float | None = None) -> "TsdfVolume":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        dims = np.maximum(1, np.ceil((hi - lo) / voxel_size - 1e-9).astype(int))
        return TsdfVolume(lo, voxel_size, dims, truncation)

    @property
    def max_corner(self) -> np.ndarray:
        return self.origin + np.array(self.dims) * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers as an (N, 3) array in x-major (C) order."""
        if self._centers is None:
            ix, iy, iz = np.meshgrid(*(np.arange(d) for d in self.dims), indexing="ij")
            idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
            self._centers = self.origin + (idx + 0.5) * self.voxel_size
        return self._centers


def _measurement_quality(frame: RGBDFrame, intr: CameraIntrinsics,
                         tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel (far_side, incidence cosine, carve_limit).

    A pixel significantly farther than a neighbor within the truncation's
    projected extent lies on the far side of a depth edge: rays through it
    graze a nearer silhouette, so its surface-distance evidence is unreliable.
    Such pixels may still carve free space, but only at depths at least one
    truncation in front of everything in their neighborhood (carve_limit).
    The incidence cosine, from depth-map normals, converts along-ray distance
    to point-to-plane distance and down-weights oblique measurements.
    """
    depth = frame.depth
    valid = depth > 0
    vals = depth[valid]
    med = np.median(vals) if len(vals) else 1.0
    radius = int(np.ceil(tau * max(intr.fx, intr.fy) / med)) + 1
    padded = np.where(valid, depth, np.inf)
    local_min = ndimage.minimum_filter(padded, size=2 * radius + 1)
    jump = max(DEPTH_EDGE_JUMP, 0.5 * tau)
    far_side = valid & (depth - local_min > jump)
    carve_limit = np.where(far_side, local_min - tau, np.inf)

    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    pts = np.stack([depth * u[None, :], depth * v[:, None], depth], axis=-1)
    normal = np.cross(np.gradient(pts, axis=1), np.gradient(pts, axis=0))
    norm = np.linalg.norm(normal, axis=-1, keepdims=True)
    norm[norm == 0] = 1.0
    normal /= norm
    ray = pts / np.maximum(np.linalg.norm(pts, axis=-1, keepdims=True), 1e-9)
    cos = np.clip(np.abs((normal * ray).sum(-1)), 0.15, 1.0)
    return far_side, cos, carve_limit


def integrate_frame(vol: TsdfVolume, frame: RGBDFrame, intr: CameraIntrinsics,
                    policy: MaskPolicy) -> TsdfVolume:
    """Weighted-average TSDF update of vol from one posed RGB-D frame.

    Mutates and returns vol.  A frame whose frustum misses the volume is a
    no-op that raises a warning and bumps vol.frames_outside.
    """
    tau = vol.truncation
    centers = vol.voxel_centers()

    cam_inv = invert_pose(frame.camera_pose)
    r = quat_to_matrix(cam_inv.rotation)
    p_cam = centers @ r.T + cam_inv.translation
    z = p_cam[:, 2]

    in_front = z > 1e-6
    u = np.full(z.shape, -1.0)
    v = np.full(z.shape, -1.0)
    u[in_front] = intr.fx * p_cam[in_front, 0] / z[in_front] + intr.cx
    v[in_front] = intr.fy * p_cam[in_front, 1] / z[in_front] + intr.cy
    px = np.floor(u).astype(np.int64)
    py = np.floor(v).astype(np.int64)
    in_image = in_front & (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height)

    if not np.any(in_image):
        warnings.warn("frame frustum does not intersect the volume; skipping")
        vol.frames_outside += 1
        return vol

    sel = np.flatnonzero(in_image)
    px, py, z_sel = px[sel], py[sel], z[sel]
    d = frame.depth[py, px]
    has_depth = d > 0

    if isinstance(policy, ForegroundPolicy):
        obj_mask = frame.masks.get(policy.object_id)
        if obj_mask is None:
            in_mask = np.zeros(len(sel), dtype=bool)
        else:
            in_mask = obj_mask[py, px]
        surface = has_depth & in_mask
        # A pixel outside the mask is a silhouette statement: no part of this
        # object lies anywhere along its ray, observed depth or not.
        free = has_depth & ~in_mask
    elif isinstance(policy, BackgroundPolicy):
        excluded = np.zeros(len(sel), dtype=bool)
        for oid in policy.excluded_ids:
            m = frame.masks.get(oid)
            if m is not None:
                excluded |= m[py, px]
        surface = has_depth & ~excluded
        free = np.zeros(len(sel), dtype=bool)
    else:
        raise TypeError(f"unknown mask policy {policy!r}")

    # quality maps depend only on (frame, truncation): reuse across volumes
    cache = getattr(frame, "_quality_cache", None)
    if cache is None:
        cache = {}
        object.__setattr__(frame, "_quality_cache", cache)
    key = round(tau, 9)
    if key not in cache:
        cache[key] = _measurement_quality(frame, intr, tau)
    far_img, cos_img, carve_img = cache[key]
    far = far_img[py, px]
    cos = cos_img[py, px]
    carve_limit = carve_img[py, px]

    sdf_flat = vol.sdf.reshape(-1)
    w_flat = vol.weight.reshape(-1)

    def weighted_update(mask: np.ndarray, value: np.ndarray, w: np.ndarray) -> None:
        tgt = sel[mask]
        w_new = w_flat[tgt] + w
        sdf_flat[tgt] = (sdf_flat[tgt] * w_flat[tgt] + value * w) / w_new
        w_flat[tgt] = w_new

    sdf_proj = (d - z_sel) * cos          # point-to-plane corrected
    surf_upd = surface & ~far & (sdf_proj >= -tau)
    if np.any(surf_upd):
        value = np.minimum(sdf_proj[surf_upd], tau)
        w = cos[surf_upd]
        weighted_update(surf_upd, value, w)

        # colors only near the observed surface
        near = np.abs(sdf_proj[surf_upd]) <= tau
        if np.any(near):
            ctgt = sel[surf_upd][near]
            cw = w[near].astype(np.float32)
            rgb = frame.rgb[py[surf_upd][near], px[surf_upd][near]].astype(np.float32)
            c_flat = vol.color.reshape(-1, 3)
            cw_flat = vol.color_weight.reshape(-1)
            cw_new = cw_flat[ctgt] + cw
            c_flat[ctgt] = (c_flat[ctgt] * cw_flat[ctgt, None] + rgb * cw[:, None]) / cw_new[:, None]
            cw_flat[ctgt] = cw_new

    # far-side pixels carve only well in front of their neighborhood
    far_carve = surface & far & (z_sel < carve_limit)
    if np.any(far_carve):
        w = cos[far_carve]
        weighted_update(far_carve, np.full(w.shape, tau), w)

    if np.any(free):
        w = FREE_SPACE_WEIGHT * cos[free]
        weighted_update(free, np.full(w.shape, tau), w)

    vol.frames_integrated += 1
    return vol


def query_sdf_batch(vol: TsdfVolume, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear (sdf, weight) at world points; outside the center lattice
    returns (+truncation, 0)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g = (pts - vol.origin) * (1.0 / vol.voxel_size) - 0.5
    i0 = np.floor(g).astype(np.int64)
    nx, ny, nz = vol.dims
    inside = ((i0[:, 0] >= 0) & (i0[:, 0] <= nx - 2)
              & (i0[:, 1] >= 0) & (i0[:, 1] <= ny - 2)
              & (i0[:, 2] >= 0) & (i0[:, 2] <= nz - 2))

    sdf = np.full(len(pts), vol.truncation, dtype=np.float64)
    w = np.zeros(len(pts), dtype=np.float64)
    if inside.any():
        ii = i0[inside]
        ff = g[inside] - ii
        base = (ii[:, 0] * ny + ii[:, 1]) * nz + ii[:, 2]
        s_flat = vol.sdf.reshape(-1)
        w_flat = vol.weight.reshape(-1)
        fx, fy, fz = ff[:, 0], ff[:, 1], ff[:, 2]
        wx = (1.0 - fx, fx)
        wy = (1.0 - fy, fy)
        wz = (1.0 - fz, fz)
        s_acc = np.zeros(len(ii))
        w_acc = np.zeros(len(ii))
        for dx in (0, 1):
            for dy in (0, 1):
                off_xy = (dx * ny + dy) * nz
                wxy = wx[dx] * wy[dy]
                for dz in (0, 1):
                    wt = wxy * wz[dz]
                    idx = base + (off_xy + dz)
                    s_acc += wt * s_flat.take(idx)
                    w_acc += wt * w_flat.take(idx)
        sdf[inside] = s_acc
        w[inside] = w_acc
    return sdf, w


def query_sdf(vol: TsdfVolume, point) -> tuple[float, float]:
    s, w = query_sdf_batch(vol, np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(s[0]), float(w[0])


def query_color_batch(vol: TsdfVolume, points: np.ndarray,
                      miss_color=(128.0, 128.0, 128.0)) -> np.ndarray:
    """Color-weight-aware trilinear color lookup; unobserved points get miss_color."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    g = (pts - vol.origin) / vol.voxel_size - 0.5
    i0 = np.floor(g).astype(np.int64)
    frac = g - i0
    dims = np.array(vol.dims)
    inside = np.all((i0 >= 0) & (i0 + 1 <= dims - 1), axis=1)

    out = np.tile(np.asarray(miss_color, dtype=np.float64), (len(pts), 1))
    if np.any(inside):
        ii = i0[inside]
        ff = frac[inside]
        c_acc = np.zeros((ii.shape[0], 3))
        cw_acc = np.zeros(ii.shape[0])
        for dx in (0, 1):
            wx = ff[:, 0] if dx else 1.0 - ff[:, 0]
            for dy in (0, 1):
                wy = ff[:, 1] if dy else 1.0 - ff[:, 1]
                for dz in (0, 1):
                    wz = ff[:, 2] if dz else 1.0 - ff[:, 2]
                    wt = wx * wy * wz
                    cw = vol.color_weight[ii[:, 0] + dx, ii[:, 1] + dy, ii[:, 2] + dz]
                    c = vol.color[ii[:, 0] + dx, ii[:, 1] + dy, ii[:, 2] + dz]
                    c_acc += (wt * cw)[:, None] * c
                    cw_acc += wt * cw
        ok = cw_acc > 1e-12
        mixed = out[inside]
        mixed[ok] = c_acc[ok] / cw_acc[ok, None]
        out[inside] = mixed
    return out


# ---------------------------------------------------------------------------
# mesh extraction and occupancy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray        # (V, 3) float64, meters
    triangles: np.ndarray       # (T, 3) int64

    def __post_init__(self):
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


def _triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def extract_mesh(vol: TsdfVolume) -> TriangleMesh:
    """Marching-cubes zero isosurface restricted to fully observed cells
    (all 8 cube corners carry weight)."""
    empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    if not np.any(vol.weight > 0) or min(vol.dims) < 2:
        return empty
    try:
        verts, faces, _, _ = measure.marching_cubes(vol.sdf, level=0.0,
                                                    allow_degenerate=False)
    except (RuntimeError, ValueError):
        return empty

    observed = vol.weight > 0
    cube_ok = observed[:-1, :-1, :-1]
    for dx, dy, dz in ((0, 0, 1), (0, 1, 0), (0, 1, 1), (1, 0, 0),
                       (1, 0, 1), (1, 1, 0), (1, 1, 1)):
        cube_ok = cube_ok & observed[dx:dx + vol.dims[0] - 1,
                                     dy:dy + vol.dims[1] - 1,
                                     dz:dz + vol.dims[2] - 1]

    centroids = verts[faces].mean(axis=1)
    cube_idx = np.clip(np.floor(centroids - 1e-9).astype(np.int64), 0,
                       np.array(vol.dims) - 2)
    keep = cube_ok[cube_idx[:, 0], cube_idx[:, 1], cube_idx[:, 2]]
    faces = faces[keep]
    if len(faces) == 0:
        return empty

    areas_idx = _triangle_areas(verts, faces)
    faces = faces[areas_idx * vol.voxel_size ** 2 > 1e-12]
    if len(faces) == 0:
        return empty

    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    world = vol.origin + (verts[used] + 0.5) * vol.voxel_size
    return TriangleMesh(world, remap[faces])


@dataclass
class VoxelOccupancy:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    occupied: np.ndarray        # bool, shape dims

    def occupied_points(self) -> np.ndarray:
        """World centers of occupied voxels, (N, 3)."""
        idx = np.argwhere(self.occupied)
        return self.origin + (idx + 0.5) * self.voxel_size

    def centroid(self) -> np.ndarray:
        pts = self.occupied_points()
        if len(pts) == 0:
            return self.origin + 0.5 * np.array(self.dims) * self.voxel_size
        return pts.mean(axis=0)

    @property
    def count(self) -> int:
        return int(self.occupied.sum())


def voxelize_object(vol: TsdfVolume) -> VoxelOccupancy:
    """Occupied iff observed and inside the surface (weight > 0 and sdf < 0)."""
    occ = (vol.weight > 0) & (vol.sdf < 0)
    return VoxelOccupancy(vol.origin.copy(), vol.voxel_size, vol.dims, occ)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def save_mesh_obj(mesh: TriangleMesh, path: str | Path) -> None:
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def save_occupancy_csv(occ: VoxelOccupancy, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["ix", "iy", "iz"])
        for ix, iy, iz in np.argwhere(occ.occupied):
            writer.writerow([ix, iy, iz])


def make_volume_from_sdf(sdf_fn, lo, hi, voxel_size: float,
                         truncation: float | None = None) -> TsdfVolume:
    """Build a fully observed volume directly from an analytic signed distance
    function (used for geometric fixtures that need no camera)."""
    vol = TsdfVolume.from_bounds(lo, hi, voxel_size, truncation)
    d = sdf_fn(vol.voxel_centers()).reshape(vol.dims)
    vol.sdf = np.clip(d, -vol.truncation, vol.truncation)
    vol.weight = np.ones(vol.dims, dtype=np.float64)
    return vol
