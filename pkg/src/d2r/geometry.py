"""Rigid transforms, pinhole camera model, and orientation sets.

Conventions fixed here and inherited by every other module: quaternions are
(w, x, y, z) and unit-norm, poses are stored camera-to-world / object-to-world,
the world frame is right-handed with +z up, and depth 0 marks an invalid pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """Input outside an operation's stated domain."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# ---------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise DomainError("zero-norm quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Unit quaternion from a 3x3 rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    return quat_normalize(q)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z toward target, +x right, +y down."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise DomainError("view direction parallel to up vector")
    right /= n
    down = np.cross(fwd, right)
    r = np.column_stack([right, down, fwd])
    return Pose(quat_from_matrix(r), eye)


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle (radians) between two unit quaternions, double-cover aware."""
    d = abs(float(np.dot(a, b)))
    return 2.0 * np.arccos(min(1.0, d))


def quat_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Shortest-arc spherical interpolation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = float(np.dot(a, b))
    if d < 0.0:
        b = -b
        d = -d
    if d > 1.0 - 1e-10:
        return quat_normalize(a + t * (b - a))
    theta = np.arccos(d)
    sin_theta = np.sin(theta)
    return (np.sin((1 - t) * theta) * a + np.sin(t * theta) * b) / sin_theta


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    return quat_normalize(rng.normal(size=4))


IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform in SE(3): rotation as a unit quaternion plus a
    translation in meters.  Applies as p -> R p + t."""

    rotation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = quat_normalize(self.rotation)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N, 3) array or a single 3-vector."""
        pts = np.asarray(points, dtype=np.float64)
        r = quat_to_matrix(self.rotation)
        if pts.ndim == 1:
            return r @ pts + self.translation
        return pts @ r.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate without translating (directions)."""
        v = np.asarray(vectors, dtype=np.float64)
        r = quat_to_matrix(self.rotation)
        if v.ndim == 1:
            return r @ v
        return v @ r.T

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation],
            "translation": [float(v) for v in self.translation],
        }

    @staticmethod
    def from_dict(d: dict) -> "Pose":
        return Pose(np.asarray(d["rotation"], dtype=np.float64),
                    np.asarray(d["translation"], dtype=np.float64))


def compose_poses(a: Pose, b: Pose) -> Pose:
    """Composite transform applying b first, then a."""
    q = quat_normalize(quat_multiply(a.rotation, b.rotation))
    t = a.apply(b.translation)
    return Pose(q, t)


def invert_pose(p: Pose) -> Pose:
    q_inv = quat_conjugate(p.rotation)
    r_inv = quat_to_matrix(q_inv)
    return Pose(q_inv, -(r_inv @ p.translation))


def pose_distance(a: Pose, b: Pose, rotation_weight: float = 0.1) -> float:
    """Mixed SE(3) metric: translation distance plus weighted geodesic angle.

    rotation_weight is in meters per radian.
    """
    dt = float(np.linalg.norm(a.translation - b.translation))
    return dt + rotation_weight * quat_angle(a.rotation, b.rotation)


def interpolate_pose(a: Pose, b: Pose, t: float) -> Pose:
    """Linear translation, shortest-arc rotation."""
    return Pose(quat_slerp(a.rotation, b.rotation, t),
                (1 - t) * a.translation + t * b.translation)


# ---------------------------------------------------------------------------
# pinhole camera
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise DomainError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise DomainError("image dimensions must be positive")

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics for the same field of view at a new resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy,
                                self.cx * sx, self.cy * sy, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}


def unproject_pixel(u: float, v: float, d: float, intr: CameraIntrinsics,
                    cam: Pose) -> np.ndarray:
    """Pixel (u, v) at depth d meters -> world point, cam being camera-to-world."""
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise DomainError(f"pixel ({u}, {v}) outside image")
    if d <= 0:
        raise DomainError("depth must be positive")
    p_cam = np.array([(u - intr.cx) / intr.fx * d,
                      (v - intr.cy) / intr.fy * d,
                      d])
    return cam.apply(p_cam)


def project_point(p_world: np.ndarray, intr: CameraIntrinsics,
                  cam: Pose) -> tuple[float, float, float]:
    """World point -> (u, v, depth).  Depth is distance along the optical axis."""
    p_cam = invert_pose(cam).apply(np.asarray(p_world, dtype=np.float64))
    z = float(p_cam[2])
    if z <= 0:
        raise DomainError("point behind camera")
    return (float(intr.fx * p_cam[0] / z + intr.cx),
            float(intr.fy * p_cam[1] / z + intr.cy),
            z)


# ---------------------------------------------------------------------------
# orientation sets
# ---------------------------------------------------------------------------

def _canonical_quat_key(q: np.ndarray) -> tuple:
    # Deduplicate across the double cover: flip so first non-tiny entry > 0.
    qr = np.round(q, 9)
    for v in qr:
        if abs(v) > 1e-9:
            if v < 0:
                qr = -qr
            break
    return tuple(qr + 0.0)  # +0.0 collapses -0.0


def octahedral_orientations() -> list[np.ndarray]:
    """The 24 rotations of the cube: closure of the pi/2 axis rotations,
    deduplicated across the quaternion double cover and deterministically
    ordered."""
    generators = [quat_from_axis_angle(ax, np.pi / 2)
                  for ax in ((1, 0, 0), (0, 1, 0), (0, 0, 1))]
    seen: dict[tuple, np.ndarray] = {_canonical_quat_key(IDENTITY_QUAT): IDENTITY_QUAT.copy()}
    frontier = [IDENTITY_QUAT.copy()]
    while frontier:
        nxt = []
        for q in frontier:
            for g in generators:
                cand = quat_normalize(quat_multiply(g, q))
                key = _canonical_quat_key(cand)
                if key not in seen:
                    canon = np.array(key)
                    seen[key] = quat_normalize(canon)
                    nxt.append(canon)
        frontier = nxt
    ordered = sorted(seen.values(), key=lambda q: tuple(np.round(q, 9)))
    return [quat_normalize(q) for q in ordered]


ORIENTATION_SETS = {
    "single": lambda: [IDENTITY_QUAT.copy()],
    "octahedral24": octahedral_orientations,
}


def orientation_set(name: str) -> list[np.ndarray]:
    try:
        factory = ORIENTATION_SETS[name]
    except KeyError:
        raise DomainError(f"unknown orientation set {name!r}") from None
    return factory()
