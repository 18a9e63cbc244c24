"""Physical validity of candidate poses: collision against the background
distance field and a drop test for support.

The moved object is represented by its occupied voxel centers; a candidate
collides when any transformed center sits closer to background surface than
the clearance (observed voxels only).  It is supported when collision-free
and translating it down by the drop distance would collide, i.e. something
lies within the drop below it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, quat_to_matrix
from .volumetric import TsdfVolume, VoxelOccupancy, query_sdf_batch

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:          # pragma: no cover - numba is an optional speedup
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap

DEFAULT_CLEARANCE = 0.002
DEFAULT_DROP = 0.010


@njit(cache=True)
def _trilinear_lt(sdf, weight, nx, ny, nz, ox, oy, oz, inv_voxel,
                  x, y, z, clearance):
    """True iff the trilinear (sdf, weight) at one world point has weight > 0
    and sdf < clearance.  Outside the center lattice: (truncation, 0) -> False."""
    gx = (x - ox) * inv_voxel - 0.5
    gy = (y - oy) * inv_voxel - 0.5
    gz = (z - oz) * inv_voxel - 0.5
    ix = int(np.floor(gx))
    iy = int(np.floor(gy))
    iz = int(np.floor(gz))
    if ix < 0 or ix > nx - 2 or iy < 0 or iy > ny - 2 or iz < 0 or iz > nz - 2:
        return False
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    s_acc = 0.0
    w_acc = 0.0
    for dx in range(2):
        wx = fx if dx else 1.0 - fx
        for dy in range(2):
            wy = fy if dy else 1.0 - fy
            for dz in range(2):
                wz = fz if dz else 1.0 - fz
                wt = wx * wy * wz
                s_acc += wt * sdf[ix + dx, iy + dy, iz + dz]
                w_acc += wt * weight[ix + dx, iy + dy, iz + dz]
    return w_acc > 0.0 and s_acc < clearance


@njit(cache=True)
def _any_collision_kernel(pts, rot, tx, ty, tz, sdf, weight, nx, ny, nz,
                          ox, oy, oz, inv_voxel, clearance):
    for i in range(pts.shape[0]):
        x = rot[0, 0] * pts[i, 0] + rot[0, 1] * pts[i, 1] + rot[0, 2] * pts[i, 2] + tx
        y = rot[1, 0] * pts[i, 0] + rot[1, 1] * pts[i, 1] + rot[1, 2] * pts[i, 2] + ty
        z = rot[2, 0] * pts[i, 0] + rot[2, 1] * pts[i, 1] + rot[2, 2] * pts[i, 2] + tz
        if _trilinear_lt(sdf, weight, nx, ny, nz, ox, oy, oz, inv_voxel,
                         x, y, z, clearance):
            return True
    return False


@njit(cache=True)
def _validate_kernel(pts, rotations, translations, sdf, weight, nx, ny, nz,
                     ox, oy, oz, inv_voxel, clearance, drop,
                     has_bounds, b_lo, b_hi, out):
    for c in range(rotations.shape[0]):
        rot = rotations[c]
        tx, ty, tz = translations[c, 0], translations[c, 1], translations[c, 2]
        ok = True
        for i in range(pts.shape[0]):
            x = rot[0, 0] * pts[i, 0] + rot[0, 1] * pts[i, 1] + rot[0, 2] * pts[i, 2] + tx
            y = rot[1, 0] * pts[i, 0] + rot[1, 1] * pts[i, 1] + rot[1, 2] * pts[i, 2] + ty
            z = rot[2, 0] * pts[i, 0] + rot[2, 1] * pts[i, 1] + rot[2, 2] * pts[i, 2] + tz
            if has_bounds and (x < b_lo[0] or x > b_hi[0] or y < b_lo[1]
                               or y > b_hi[1] or z < b_lo[2] or z > b_hi[2]):
                ok = False
                break
            if _trilinear_lt(sdf, weight, nx, ny, nz, ox, oy, oz, inv_voxel,
                             x, y, z, clearance):
                ok = False
                break
        if not ok:
            out[c] = False
            continue
        supported = False
        for i in range(pts.shape[0]):
            x = rot[0, 0] * pts[i, 0] + rot[0, 1] * pts[i, 1] + rot[0, 2] * pts[i, 2] + tx
            y = rot[1, 0] * pts[i, 0] + rot[1, 1] * pts[i, 1] + rot[1, 2] * pts[i, 2] + ty
            z = (rot[2, 0] * pts[i, 0] + rot[2, 1] * pts[i, 1]
                 + rot[2, 2] * pts[i, 2] + tz - drop)
            if _trilinear_lt(sdf, weight, nx, ny, nz, ox, oy, oz, inv_voxel,
                             x, y, z, clearance):
                supported = True
                break
        out[c] = supported


@dataclass(frozen=True)
class PhysicsParams:
    clearance: float = DEFAULT_CLEARANCE
    drop: float = DEFAULT_DROP
    scene_bounds: np.ndarray | None = None   # (2, 3) min/max, out-of-bounds check

    def __post_init__(self):
        if self.clearance < 0:
            raise ValueError("clearance must be nonnegative")
        if self.drop <= 0:
            raise ValueError("drop must be positive")


@dataclass(frozen=True)
class ValidityResult:
    valid: bool
    reason: str                  # ok | collision | unsupported | out_of_bounds

    def __post_init__(self):
        assert self.valid == (self.reason == "ok")


def _transformed_points(fg: VoxelOccupancy, pose_delta: Pose,
                        points: np.ndarray | None = None) -> np.ndarray:
    pts = fg.occupied_points() if points is None else points
    r = quat_to_matrix(pose_delta.rotation)
    return pts @ r.T + pose_delta.translation


def check_collision(fg: VoxelOccupancy, pose_delta: Pose, bg_vol: TsdfVolume,
                    clearance: float = DEFAULT_CLEARANCE) -> bool:
    """True iff any transformed occupied voxel center is within clearance of
    observed background surface."""
    if clearance < 0:
        raise ValueError("clearance must be nonnegative")
    pts = fg.occupied_points()
    if len(pts) == 0:
        return False
    if _HAVE_NUMBA:
        rot = quat_to_matrix(pose_delta.rotation)
        t = pose_delta.translation
        nx, ny, nz = bg_vol.dims
        return bool(_any_collision_kernel(
            pts, rot, t[0], t[1], t[2], bg_vol.sdf, bg_vol.weight, nx, ny, nz,
            bg_vol.origin[0], bg_vol.origin[1], bg_vol.origin[2],
            1.0 / bg_vol.voxel_size, clearance))
    moved = _transformed_points(fg, pose_delta, pts)
    sdf, weight = query_sdf_batch(bg_vol, moved)
    return bool(np.any((weight > 0) & (sdf < clearance)))


def check_support(fg: VoxelOccupancy, pose_delta: Pose, bg_vol: TsdfVolume,
                  drop: float = DEFAULT_DROP,
                  clearance: float = DEFAULT_CLEARANCE) -> bool:
    """True iff the pose is collision-free and dropping by `drop` collides."""
    if drop <= 0:
        raise ValueError("drop must be positive")
    if check_collision(fg, pose_delta, bg_vol, clearance):
        return False
    dropped = Pose(pose_delta.rotation,
                   pose_delta.translation - np.array([0.0, 0.0, drop]))
    return check_collision(fg, dropped, bg_vol, clearance)


def is_physically_valid(fg: VoxelOccupancy, pose_delta: Pose, bg_vol: TsdfVolume,
                        params: PhysicsParams) -> ValidityResult:
    pts = _transformed_points(fg, pose_delta)
    if params.scene_bounds is not None and len(pts):
        b = params.scene_bounds
        if np.any(pts < b[0]) or np.any(pts > b[1]):
            return ValidityResult(False, "out_of_bounds")
    if check_collision(fg, pose_delta, bg_vol, params.clearance):
        return ValidityResult(False, "collision")
    if not check_support(fg, pose_delta, bg_vol, params.drop, params.clearance):
        return ValidityResult(False, "unsupported")
    return ValidityResult(True, "ok")


# ---------------------------------------------------------------------------
# batched candidate validation (the hot path of the sampling loop)
# ---------------------------------------------------------------------------

def validate_candidates(fg: VoxelOccupancy, rotations: np.ndarray,
                        translations: np.ndarray, bg_vol: TsdfVolume,
                        params: PhysicsParams,
                        chunk_points: int = 2_000_000) -> np.ndarray:
    """Vectorized is_physically_valid over n candidates.

    rotations: (n, 3, 3) matrices; translations: (n, 3).  Returns (n,) bool.
    Equivalent to calling is_physically_valid per candidate.
    """
    pts = fg.occupied_points()
    n = len(rotations)
    if len(pts) == 0:
        return np.zeros(n, dtype=bool)

    if _HAVE_NUMBA:
        out = np.zeros(n, dtype=np.bool_)
        nx, ny, nz = bg_vol.dims
        has_bounds = params.scene_bounds is not None
        b = params.scene_bounds if has_bounds else np.zeros((2, 3))
        _validate_kernel(pts, np.ascontiguousarray(rotations),
                         np.ascontiguousarray(translations),
                         bg_vol.sdf, bg_vol.weight, nx, ny, nz,
                         bg_vol.origin[0], bg_vol.origin[1], bg_vol.origin[2],
                         1.0 / bg_vol.voxel_size, params.clearance, params.drop,
                         has_bounds, np.ascontiguousarray(b[0]),
                         np.ascontiguousarray(b[1]), out)
        return out

    chunk = max(1, chunk_points // max(1, len(pts)))
    valid = np.zeros(n, dtype=bool)
    drop_vec = np.array([0.0, 0.0, params.drop])

    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        # (c, m, 3)
        moved = np.einsum("cij,mj->cmi", rotations[lo:hi], pts) + translations[lo:hi, None, :]
        flat = moved.reshape(-1, 3)
        ok = np.ones(hi - lo, dtype=bool)

        if params.scene_bounds is not None:
            b = params.scene_bounds
            inb = np.all((moved >= b[0]) & (moved <= b[1]), axis=(1, 2))
            ok &= inb

        sdf, w = query_sdf_batch(bg_vol, flat)
        collide = ((w > 0) & (sdf < params.clearance)).reshape(hi - lo, -1).any(axis=1)
        ok &= ~collide

        sub = np.flatnonzero(ok)
        if len(sub):
            dropped = (moved[sub] - drop_vec).reshape(-1, 3)
            sdf_d, w_d = query_sdf_batch(bg_vol, dropped)
            supported = ((w_d > 0) & (sdf_d < params.clearance)).reshape(len(sub), -1).any(axis=1)
            ok[sub] &= supported
        valid[lo:hi] = ok
    return valid
