"""Analytic solid primitives: exact ray intersection for rendering synthetic
scans, and signed distance functions for fixtures and interpenetration checks.

Local frames: spheres and boxes are centered at the origin; cylinders are
z-axis aligned and centered; open boxes sit with their base at z = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, invert_pose, quat_to_matrix

_EPS = 1e-9
MISS = np.inf


@dataclass(frozen=True)
class Sphere:
    radius: float


@dataclass(frozen=True)
class Box:
    half_extents: tuple[float, float, float]


@dataclass(frozen=True)
class Cylinder:
    radius: float
    half_height: float


@dataclass(frozen=True)
class OpenBox:
    """Rectangular receptacle: bottom slab plus four walls, cavity open on top.

    outer_half is the outer footprint half-extent, height the outer wall
    height, thickness the wall/bottom thickness.  Base plane is local z = 0.
    """
    outer_half: tuple[float, float]
    height: float
    thickness: float

    def components(self) -> list[tuple[Box, np.ndarray]]:
        ox, oy = self.outer_half
        t, h = self.thickness, self.height
        return [
            (Box((ox, oy, t / 2)), np.array([0.0, 0.0, t / 2])),
            (Box((t / 2, oy, h / 2)), np.array([ox - t / 2, 0.0, h / 2])),
            (Box((t / 2, oy, h / 2)), np.array([-(ox - t / 2), 0.0, h / 2])),
            (Box((ox - t, t / 2, h / 2)), np.array([0.0, oy - t / 2, h / 2])),
            (Box((ox - t, t / 2, h / 2)), np.array([0.0, -(oy - t / 2), h / 2])),
        ]

    @property
    def inner_half(self) -> tuple[float, float]:
        return (self.outer_half[0] - self.thickness,
                self.outer_half[1] - self.thickness)


Shape = Sphere | Box | Cylinder | OpenBox


# ---------------------------------------------------------------------------
# ray intersection (local frame, unit direction); returns t or MISS
# ---------------------------------------------------------------------------

def _ray_sphere(o: np.ndarray, d: np.ndarray, radius: float) -> np.ndarray:
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius * radius
    disc = b * b - c
    t = np.full(len(o), MISS)
    ok = disc >= 0
    if np.any(ok):
        root = np.sqrt(disc[ok])
        t1 = -b[ok] - root
        t2 = -b[ok] + root
        tt = np.where(t1 > _EPS, t1, np.where(t2 > _EPS, t2, MISS))
        t[ok] = tt
    return t


def _ray_box(o: np.ndarray, d: np.ndarray, half: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # parallel rays: inside slab -> (-inf, inf), outside -> no hit
    par = np.abs(d) < _EPS
    inside_slab = np.abs(o) <= half
    lo = np.where(par, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside_slab, np.inf, -np.inf), hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = t_near <= t_far
    t = np.where(hit & (t_near > _EPS), t_near,
                 np.where(hit & (t_far > _EPS), t_far, MISS))
    return t


def _ray_cylinder(o: np.ndarray, d: np.ndarray, radius: float,
                  half_height: float) -> np.ndarray:
    t = np.full(len(o), MISS)
    # lateral surface
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius * radius
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        ok = (disc >= 0) & (a > _EPS)
        root = np.sqrt(np.where(ok, disc, 0.0))
        for sign in (-1.0, 1.0):
            tt = np.where(ok, (-b + sign * root) / np.where(a > _EPS, a, 1.0), MISS)
            z = o[:, 2] + tt * d[:, 2]
            good = ok & (tt > _EPS) & (np.abs(z) <= half_height)
            t = np.where(good, np.minimum(t, tt), t)
    # caps
    for zc in (half_height, -half_height):
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (zc - o[:, 2]) / d[:, 2]
        x = o[:, 0] + tt * d[:, 0]
        y = o[:, 1] + tt * d[:, 1]
        good = (np.abs(d[:, 2]) > _EPS) & (tt > _EPS) & (x * x + y * y <= radius * radius)
        t = np.where(good, np.minimum(t, tt), t)
    return t


def ray_intersect(shape: Shape, pose: Pose, origins: np.ndarray,
                  dirs: np.ndarray) -> np.ndarray:
    """Nearest positive hit parameter per world-frame ray, MISS for none."""
    inv = invert_pose(pose)
    r = quat_to_matrix(inv.rotation)
    o = origins @ r.T + inv.translation
    d = dirs @ r.T
    if isinstance(shape, Sphere):
        return _ray_sphere(o, d, shape.radius)
    if isinstance(shape, Box):
        return _ray_box(o, d, np.asarray(shape.half_extents))
    if isinstance(shape, Cylinder):
        return _ray_cylinder(o, d, shape.radius, shape.half_height)
    if isinstance(shape, OpenBox):
        t = np.full(len(origins), MISS)
        for box, offset in shape.components():
            t = np.minimum(t, _ray_box(o - offset, d, np.asarray(box.half_extents)))
        return t
    raise TypeError(f"unknown shape {shape!r}")


# ---------------------------------------------------------------------------
# signed distance (local-frame points; exact outside, exact or lower bound inside)
# ---------------------------------------------------------------------------

def _sdf_sphere(p: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(p, axis=1) - radius


def _sdf_box(p: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _sdf_cylinder(p: np.ndarray, radius: float, half_height: float) -> np.ndarray:
    dr = np.hypot(p[:, 0], p[:, 1]) - radius
    dz = np.abs(p[:, 2]) - half_height
    q = np.stack([dr, dz], axis=1)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def sdf(shape: Shape, pose: Pose, points: np.ndarray) -> np.ndarray:
    """Signed distance from world points to the posed shape's surface."""
    inv = invert_pose(pose)
    r = quat_to_matrix(inv.rotation)
    p = np.atleast_2d(points) @ r.T + inv.translation
    if isinstance(shape, Sphere):
        return _sdf_sphere(p, shape.radius)
    if isinstance(shape, Box):
        return _sdf_box(p, np.asarray(shape.half_extents))
    if isinstance(shape, Cylinder):
        return _sdf_cylinder(p, shape.radius, shape.half_height)
    if isinstance(shape, OpenBox):
        d = np.full(len(p), np.inf)
        for box, offset in shape.components():
            d = np.minimum(d, _sdf_box(p - offset, np.asarray(box.half_extents)))
        return d
    raise TypeError(f"unknown shape {shape!r}")


def _local_corners(shape: Shape) -> np.ndarray:
    if isinstance(shape, Box):
        h = np.asarray(shape.half_extents)
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                          for sz in (-1, 1)], dtype=np.float64)
        return signs * h
    if isinstance(shape, OpenBox):
        ox, oy = shape.outer_half
        return np.array([[sx * ox, sy * oy, z] for sx in (-1, 1)
                         for sy in (-1, 1) for z in (0.0, shape.height)])
    raise TypeError


def footprint_radius(shape: Shape, pose: Pose | None = None) -> float:
    """Circumscribed world xy radius about the pose translation."""
    rot = quat_to_matrix(pose.rotation) if pose is not None else np.eye(3)
    if isinstance(shape, Sphere):
        return shape.radius
    if isinstance(shape, (Box, OpenBox)):
        corners = _local_corners(shape) @ rot.T
        return float(np.hypot(corners[:, 0], corners[:, 1]).max())
    if isinstance(shape, Cylinder):
        axis = rot @ np.array([0.0, 0.0, 1.0])
        axis_xy = float(np.hypot(axis[0], axis[1]))
        return shape.half_height * axis_xy + shape.radius
    raise TypeError(f"unknown shape {shape!r}")


def z_interval(shape: Shape, pose: Pose) -> tuple[float, float]:
    """World z extent of the posed shape."""
    rot = quat_to_matrix(pose.rotation)
    z = pose.translation[2]
    if isinstance(shape, Sphere):
        return z - shape.radius, z + shape.radius
    if isinstance(shape, (Box, OpenBox)):
        corner_z = (_local_corners(shape) @ rot.T)[:, 2]
        return z + float(corner_z.min()), z + float(corner_z.max())
    if isinstance(shape, Cylinder):
        az = abs(float((rot @ np.array([0.0, 0.0, 1.0]))[2]))
        half = shape.half_height * az + shape.radius * np.sqrt(max(0.0, 1 - az * az))
        return z - half, z + half
    raise TypeError(f"unknown shape {shape!r}")


def rest_height(shape: Shape) -> float:
    """Local-frame origin height above the support plane when resting upright."""
    if isinstance(shape, Sphere):
        return shape.radius
    if isinstance(shape, Box):
        return shape.half_extents[2]
    if isinstance(shape, Cylinder):
        return shape.half_height
    if isinstance(shape, OpenBox):
        return 0.0
    raise TypeError(f"unknown shape {shape!r}")
