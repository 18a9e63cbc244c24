"""Collision-free rigid-body transit planning with bidirectional RRT-Connect.

The transit object is the foreground occupancy itself, free-flying (no arm
model).  States are pose deltas relative to the object's current placement;
edges interpolate translation linearly and rotation along the shortest arc,
validated at a fixed resolution against the background distance field.
Support is not required mid-transit, only the absence of collision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (Pose, interpolate_pose, pose_distance, quat_angle,
                       random_quaternion)
from .physics import check_collision
from .volumetric import TsdfVolume, VoxelOccupancy


class PlanningPreconditionError(ValueError):
    """Start or goal state is already in collision."""


@dataclass(frozen=True)
class PlannerConfig:
    max_iterations: int = 10_000
    step_size: float = 0.05
    interpolation_delta: float = 0.005
    goal_bias: float = 0.1
    rng_seed: int = 0
    clearance: float = 0.002
    rotation_weight: float = 0.1          # meters per radian in the SE(3) metric
    sample_bounds: np.ndarray | None = None   # (2, 3) translation sampling box
    shortcut_attempts: int = 80

    def __post_init__(self):
        if not (self.step_size > self.interpolation_delta > 0):
            raise ValueError("need step_size > interpolation_delta > 0")
        if not (0 <= self.goal_bias <= 1):
            raise ValueError("goal_bias must be in [0, 1]")


@dataclass
class PathResult:
    waypoints: list[Pose]
    length: float                 # sum of translation deltas, meters
    iterations_used: int
    found: bool = True

    def to_json(self) -> str:
        return json.dumps({
            "found": self.found,
            "length": self.length,
            "iterations_used": self.iterations_used,
            "waypoints": [w.to_dict() for w in self.waypoints],
        }, indent=1, sort_keys=True)


def save_path_json(result: PathResult, path: str | Path) -> None:
    Path(path).write_text(result.to_json())


def _path_length(waypoints: list[Pose]) -> float:
    return float(sum(np.linalg.norm(b.translation - a.translation)
                     for a, b in zip(waypoints, waypoints[1:])))


def _edge_collision_free(a: Pose, b: Pose, fg: VoxelOccupancy, bg: TsdfVolume,
                         cfg: PlannerConfig) -> bool:
    """Check interpolated configurations every interpolation_delta along the
    edge, endpoints included."""
    dist = pose_distance(a, b, cfg.rotation_weight)
    steps = max(1, int(np.ceil(dist / cfg.interpolation_delta)))
    for i in range(steps + 1):
        p = interpolate_pose(a, b, i / steps)
        if check_collision(fg, p, bg, cfg.clearance):
            return False
    return True


class _Tree:
    def __init__(self, root: Pose):
        self.poses: list[Pose] = [root]
        self.parents: list[int] = [-1]
        self._t = np.array([root.translation])
        self._q = np.array([root.rotation])

    def nearest(self, target: Pose, rotation_weight: float) -> int:
        dt = np.linalg.norm(self._t - target.translation, axis=1)
        dots = np.clip(np.abs(self._q @ target.rotation), -1.0, 1.0)
        ang = 2.0 * np.arccos(dots)
        return int(np.argmin(dt + rotation_weight * ang))

    def add(self, pose: Pose, parent: int) -> int:
        self.poses.append(pose)
        self.parents.append(parent)
        self._t = np.vstack([self._t, pose.translation])
        self._q = np.vstack([self._q, pose.rotation])
        return len(self.poses) - 1

    def path_to_root(self, index: int) -> list[Pose]:
        out = []
        while index >= 0:
            out.append(self.poses[index])
            index = self.parents[index]
        return out


def _steer(from_pose: Pose, to_pose: Pose, step: float, rotation_weight: float) -> Pose:
    dist = pose_distance(from_pose, to_pose, rotation_weight)
    if dist <= step:
        return to_pose
    return interpolate_pose(from_pose, to_pose, step / dist)


def plan_rrt_connect(start: Pose, goal: Pose, fg_occ: VoxelOccupancy,
                     bg_vol: TsdfVolume, cfg: PlannerConfig) -> PathResult:
    """Bidirectional RRT-Connect in SE(3) between two collision-free deltas.

    Deterministic for a fixed rng_seed.  Exhausting the iteration budget
    returns a result with found=False rather than raising.
    """
    if check_collision(fg_occ, start, bg_vol, cfg.clearance):
        raise PlanningPreconditionError("start pose is in collision")
    if check_collision(fg_occ, goal, bg_vol, cfg.clearance):
        raise PlanningPreconditionError("goal pose is in collision")

    if pose_distance(start, goal, cfg.rotation_weight) < 1e-12:
        return PathResult([start], 0.0, 0, True)
    if _edge_collision_free(start, goal, fg_occ, bg_vol, cfg):
        way = [start, goal]
        return PathResult(way, _path_length(way), 0, True)

    rng = np.random.default_rng(cfg.rng_seed)
    if cfg.sample_bounds is not None:
        lo, hi = np.asarray(cfg.sample_bounds[0]), np.asarray(cfg.sample_bounds[1])
    else:
        all_t = np.vstack([start.translation, goal.translation])
        lo = all_t.min(axis=0) - 0.3
        hi = all_t.max(axis=0) + 0.3

    tree_a = _Tree(start)
    tree_b = _Tree(goal)
    a_is_start = True
    rotate_free = quat_angle(start.rotation, goal.rotation) > 1e-9

    def sample() -> Pose:
        t = rng.uniform(lo, hi)
        if rotate_free:
            q = random_quaternion(rng)
        else:
            q = start.rotation
        if rng.uniform() < cfg.goal_bias:
            target = tree_b.poses[0]
            return Pose(target.rotation, target.translation)
        return Pose(q, t)

    def extend(tree: _Tree, target: Pose) -> tuple[int | None, Pose | None]:
        ni = tree.nearest(target, cfg.rotation_weight)
        new = _steer(tree.poses[ni], target, cfg.step_size, cfg.rotation_weight)
        if _edge_collision_free(tree.poses[ni], new, fg_occ, bg_vol, cfg):
            return tree.add(new, ni), new
        return None, None

    def connect(tree: _Tree, target: Pose) -> int | None:
        last = None
        while True:
            idx, new = extend(tree, target)
            if idx is None:
                return None
            last = idx
            if pose_distance(new, target, cfg.rotation_weight) < 1e-9:
                return last

    for it in range(1, cfg.max_iterations + 1):
        q_rand = sample()
        idx_a, new_a = extend(tree_a, q_rand)
        if idx_a is not None:
            idx_b = connect(tree_b, new_a)
            if idx_b is not None:
                seg_a = tree_a.path_to_root(idx_a)[::-1]
                seg_b = tree_b.path_to_root(idx_b)
                waypoints = seg_a + seg_b if a_is_start else seg_b[::-1] + seg_a[::-1]
                waypoints = _shortcut(waypoints, fg_occ, bg_vol, cfg, rng)
                return PathResult(waypoints, _path_length(waypoints), it, True)
        tree_a, tree_b = tree_b, tree_a
        a_is_start = not a_is_start

    return PathResult([], 0.0, cfg.max_iterations, False)


def _shortcut(waypoints: list[Pose], fg: VoxelOccupancy, bg: TsdfVolume,
              cfg: PlannerConfig, rng: np.random.Generator) -> list[Pose]:
    """Random shortcut smoothing; replacing a subchain with a direct valid edge
    can only shrink both translation and rotation path length."""
    pts = list(waypoints)
    for _ in range(cfg.shortcut_attempts):
        if len(pts) <= 2:
            break
        i, j = sorted(rng.choice(len(pts), size=2, replace=False))
        if j - i < 2:
            continue
        if _edge_collision_free(pts[i], pts[j], fg, bg, cfg):
            pts = pts[:i + 1] + pts[j:]
    return pts


@dataclass(frozen=True)
class SceneState:
    """Outcome of a simulated pick-and-place: final movable-object pose and
    the transit log.  Prediction quality and execution success are reported
    separately so a correct goal pose with a failed plan is still visible."""
    movable_object_id: str
    final_pose: Pose
    executed: bool
    path: PathResult


def simulate_pick_place(task, base_pose: Pose, goal_pose: Pose,
                        plan: PathResult) -> SceneState:
    """Apply the plan: on success the object lands exactly at the goal pose;
    on planning failure it stays put and the failure is recorded."""
    if plan.found:
        return SceneState(task.movable_object_id, goal_pose, True, plan)
    return SceneState(task.movable_object_id, base_pose, False, plan)
