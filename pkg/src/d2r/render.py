"""Raycast rendering of imagined arrangements.

The background volume is traced as-is; the foreground volume is traced under a
candidate pose delta by carrying rays into the object's canonical frame.  The
two renders compose by per-pixel depth test.  Rays sphere-trace the truncated
distance field: step proportional to the sampled distance, floored at half a
voxel, with a linear zero-crossing refinement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, Pose, compose_poses, invert_pose, quat_to_matrix
from .volumetric import TsdfVolume, query_color_batch, query_sdf_batch

MISS_COLOR = (128, 128, 128)    # neutral gray so scorers see no hard border
MISS_DEPTH = np.inf
_MIN_WEIGHT = 1e-6


@dataclass(frozen=True)
class RenderCamera:
    intrinsics: CameraIntrinsics
    pose: Pose                   # camera-to-world


@dataclass(frozen=True)
class RenderedArrangement:
    rgb: np.ndarray              # (H, W, 3) uint8
    depth: np.ndarray            # (H, W) meters, +inf where no surface
    candidate_pose: Pose | None = None
    candidate_index: tuple | None = None


def _pixel_rays(cam: RenderCamera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World-frame unit ray directions through all pixel centers, plus the
    camera-frame z component of each unit direction (depth per unit t)."""
    intr = cam.intrinsics
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    raw = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(raw, axis=1)
    dirs_cam = raw / norms[:, None]
    r = quat_to_matrix(cam.pose.rotation)
    dirs_world = dirs_cam @ r.T
    origin = np.asarray(cam.pose.translation, dtype=np.float64)
    return dirs_world, origin, 1.0 / norms   # depth_per_t = dir_cam z


def _ray_box_interval(o: np.ndarray, d: np.ndarray, lo: np.ndarray,
                      hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    t_lo = np.where(np.isfinite(inv), np.minimum(t1, t2), -np.inf)
    t_hi = np.where(np.isfinite(inv), np.maximum(t1, t2), np.inf)
    par = ~np.isfinite(inv)
    if np.any(par):
        inside = (o >= lo) & (o <= hi)
        t_lo[par & ~inside] = np.inf
        t_hi[par & ~inside] = -np.inf
    return t_lo.max(axis=1), t_hi.min(axis=1)


def _march_rays(vol: TsdfVolume, origins: np.ndarray, dirs: np.ndarray,
                t_lo: np.ndarray, t_hi: np.ndarray, out_idx: np.ndarray,
                depth_per_t: np.ndarray, rgb_out: np.ndarray,
                depth_out: np.ndarray) -> None:
    """Sphere-trace a flat bundle of rays through the volume, writing hits into
    rgb_out/depth_out at out_idx.  Rays may belong to different composites."""
    if len(origins) == 0:
        return
    min_step = 0.5 * vol.voxel_size
    active = np.arange(len(origins))
    t = t_lo + 1e-9
    prev_sdf = np.full(len(active), vol.truncation)
    prev_w = np.zeros(len(active))
    prev_t = t.copy()
    max_iters = int(np.ceil(np.linalg.norm(vol.max_corner - vol.origin) / min_step)) + 4

    for _ in range(max_iters):
        pts = origins[active] + t[:, None] * dirs[active]
        s, wt = query_sdf_batch(vol, pts)

        crossing = (prev_sdf > 0) & (s <= 0) & (wt > _MIN_WEIGHT) & (prev_w > _MIN_WEIGHT)
        if np.any(crossing):
            rows = active[crossing]
            denom = prev_sdf[crossing] - s[crossing]
            frac = np.where(denom > 1e-12, prev_sdf[crossing] / denom, 0.5)
            t_hit = prev_t[crossing] + frac * (t[crossing] - prev_t[crossing])
            p_hit = origins[rows] + t_hit[:, None] * dirs[rows]
            rgb_out[out_idx[rows]] = query_color_batch(vol, p_hit, MISS_COLOR)
            depth_out[out_idx[rows]] = t_hit * depth_per_t[rows]

        step = np.where(s > 0, np.maximum(s * 0.9, min_step), min_step)
        prev_sdf, prev_w, prev_t = s, wt, t
        t = t + step

        keep = ~crossing & (t <= t_hi[active])
        if not np.any(keep):
            break
        if not np.all(keep):
            active = active[keep]
            t = t[keep]
            prev_sdf = prev_sdf[keep]
            prev_w = prev_w[keep]
            prev_t = prev_t[keep]


def raycast_volume_batch(vol: TsdfVolume, cam: RenderCamera,
                         deltas: list[Pose | None]) -> tuple[np.ndarray, np.ndarray]:
    """Render the volume under several pose deltas at once.

    Rays of all candidates march together, which amortizes the per-step cost
    over the batch.  Returns rgb (n, H, W, 3) uint8 and depth (n, H, W).
    """
    intr = cam.intrinsics
    h, w = intr.height, intr.width
    dirs, origin, depth_per_t = _pixel_rays(cam)
    n_px = len(dirs)
    n = len(deltas)

    rgb = np.tile(np.asarray(MISS_COLOR, dtype=np.float64), (n * n_px, 1))
    depth = np.full(n * n_px, MISS_DEPTH)

    all_origins, all_dirs, all_lo, all_hi, all_out, all_dpt = [], [], [], [], [], []
    for ci, delta in enumerate(deltas):
        if delta is not None:
            inv = invert_pose(delta)
            r = quat_to_matrix(inv.rotation)
            o_vol = r @ origin + inv.translation
            d_vol = dirs @ r.T
        else:
            o_vol = origin
            d_vol = dirs
        origins_b = np.broadcast_to(o_vol, d_vol.shape)
        t_lo, t_hi = _ray_box_interval(origins_b, d_vol, vol.origin, vol.max_corner)
        t_lo = np.maximum(t_lo, 0.0)
        active = np.flatnonzero(t_hi > t_lo)
        if len(active) == 0:
            continue
        all_origins.append(np.broadcast_to(o_vol, (len(active), 3)))
        all_dirs.append(d_vol[active])
        all_lo.append(t_lo[active])
        all_hi.append(t_hi[active])
        all_out.append(ci * n_px + active)
        all_dpt.append(depth_per_t[active])

    if all_origins:
        _march_rays(vol,
                    np.concatenate(all_origins), np.concatenate(all_dirs),
                    np.concatenate(all_lo), np.concatenate(all_hi),
                    np.concatenate(all_out), np.concatenate(all_dpt),
                    rgb, depth)

    return (rgb.reshape(n, h, w, 3).astype(np.uint8),
            depth.reshape(n, h, w))


def raycast_volume(vol: TsdfVolume, cam: RenderCamera,
                   object_pose_delta: Pose | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Render the volume as if its content were moved by object_pose_delta.

    Returns (rgb uint8, depth meters with +inf for misses).  Hit pixels carry
    interpolated color and the camera-frame z depth of the refined crossing.
    """
    rgbs, depths = raycast_volume_batch(vol, cam, [object_pose_delta])
    return rgbs[0], depths[0]


def compose_render_batch(bg_render: tuple[np.ndarray, np.ndarray],
                         fg: TsdfVolume, deltas: list[Pose], cam: RenderCamera,
                         candidate_indices: list[tuple] | None = None,
                         base_pose: Pose | None = None) -> list[RenderedArrangement]:
    """Composite a batch of foreground deltas over one precomputed background
    raycast, by per-pixel depth test."""
    bg_rgb, bg_depth = bg_render
    fg_rgb, fg_depth = raycast_volume_batch(fg, cam, deltas)

    fg_wins = fg_depth < bg_depth[None]
    rgb = np.where(fg_wins[..., None], fg_rgb, bg_rgb[None])
    depth = np.minimum(fg_depth, bg_depth[None])

    out = []
    for i, delta in enumerate(deltas):
        pose = compose_poses(delta, base_pose) if base_pose is not None else None
        idx = candidate_indices[i] if candidate_indices is not None else None
        out.append(RenderedArrangement(rgb=rgb[i].astype(np.uint8), depth=depth[i],
                                       candidate_pose=pose, candidate_index=idx))
    return out


def compose_render(bg: TsdfVolume, fg: TsdfVolume, fg_pose_delta: Pose,
                   cam: RenderCamera, candidate_index: tuple | None = None,
                   bg_render: tuple[np.ndarray, np.ndarray] | None = None,
                   base_pose: Pose | None = None) -> RenderedArrangement:
    """Depth-composite the background and the re-posed foreground.

    bg_render, when given, reuses a precomputed background raycast (it does
    not depend on the candidate).  candidate metadata is carried through for
    scorers that consume pose information.
    """
    if bg_render is None:
        bg_render = raycast_volume(bg, cam)
    indices = [candidate_index] if candidate_index is not None else None
    return compose_render_batch(bg_render, fg, [fg_pose_delta], cam,
                                indices, base_pose)[0]


def save_render_png(arr: RenderedArrangement | np.ndarray, path) -> None:
    rgb = arr.rgb if isinstance(arr, RenderedArrangement) else arr
    Image.fromarray(rgb.astype(np.uint8)).save(path)
