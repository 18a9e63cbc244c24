"""RRT-Connect transit planning through analytic obstacle fields."""

import numpy as np
import pytest

from d2r.geometry import Pose, interpolate_pose, pose_distance
from d2r.physics import check_collision
from d2r.planner import (PathResult, PlannerConfig, PlanningPreconditionError,
                         plan_rrt_connect, save_path_json, simulate_pick_place)
from d2r.dataset import TaskSpec
from d2r.volumetric import TsdfVolume, make_volume_from_sdf, voxelize_object


def small_cube_occ(half=0.015, voxel=0.005):
    vol = make_volume_from_sdf(
        lambda p: np.max(np.abs(p), axis=1) - half,
        [-half - 0.01, -half - 0.01, -half - 0.01],
        [half + 0.01, half + 0.01, half + 0.01], voxel)
    return voxelize_object(vol)


def empty_volume():
    return TsdfVolume([-0.5, -0.5, -0.5], 0.02, (50, 50, 50))


def wall_with_gap_volume(gap_center_y: float, gap_half: float = 0.07,
                         wall_x: float = 0.0, thickness: float = 0.02):
    """Wall in the x=wall_x plane with a square gap around (gap_center_y, 0)."""
    def sdf(p):
        wall = np.abs(p[:, 0] - wall_x) - thickness
        hole = np.maximum(np.abs(p[:, 1] - gap_center_y) - gap_half,
                          np.abs(p[:, 2] - 0.0) - gap_half)
        # wall minus hole: inside wall and outside hole
        return np.maximum(wall, -hole)
    return make_volume_from_sdf(sdf, [-0.4, -0.4, -0.4], [0.4, 0.4, 0.4], 0.01)


def validate_path(path: PathResult, fg, bg, clearance=0.002, delta=0.005) -> bool:
    """Every interpolated configuration at 5 mm resolution is collision-free."""
    for a, b in zip(path.waypoints, path.waypoints[1:]):
        steps = max(1, int(np.ceil(pose_distance(a, b) / delta)))
        for i in range(steps + 1):
            if check_collision(fg, interpolate_pose(a, b, i / steps), bg, clearance):
                return False
    return True


class TestBasics:
    def test_start_equals_goal(self):
        fg = small_cube_occ()
        bg = empty_volume()
        res = plan_rrt_connect(Pose.identity(), Pose.identity(), fg, bg,
                               PlannerConfig(rng_seed=0))
        assert res.found and len(res.waypoints) == 1 and res.length == 0.0

    def test_empty_scene_straight_line(self):
        fg = small_cube_occ()
        bg = empty_volume()
        goal = Pose(translation=[0.5, 0.0, 0.0])
        res = plan_rrt_connect(Pose.identity(), goal, fg, bg,
                               PlannerConfig(rng_seed=1))
        assert res.found
        assert res.length >= 0.5 - 1e-9
        assert np.allclose(res.waypoints[0].matrix(), Pose.identity().matrix())
        assert np.allclose(res.waypoints[-1].matrix(), goal.matrix())

    def test_start_in_collision_rejected(self):
        fg = small_cube_occ()
        bg = wall_with_gap_volume(0.0)
        start = Pose(translation=[0.0, 0.3, 0.0])     # inside the wall plane
        with pytest.raises(PlanningPreconditionError):
            plan_rrt_connect(start, Pose(translation=[0.3, 0, 0]), fg, bg,
                             PlannerConfig(rng_seed=0))

    def test_budget_exhaustion_returns_not_found(self):
        # goal boxed in on all sides: no path exists
        def sdf(p):
            shell = np.max(np.abs(p - np.array([0.25, 0.0, 0.0])), axis=1)
            return np.abs(shell - 0.08) - 0.02
        bg = make_volume_from_sdf(sdf, [-0.4, -0.4, -0.4], [0.4, 0.4, 0.4], 0.01)
        fg = small_cube_occ()
        cfg = PlannerConfig(max_iterations=60, rng_seed=0,
                            sample_bounds=np.array([[-0.4, -0.4, -0.4],
                                                    [0.4, 0.4, 0.4]]))
        res = plan_rrt_connect(Pose.identity(),
                               Pose(translation=[0.25, 0.0, 0.0]), fg, bg, cfg)
        assert not res.found and res.waypoints == []


class TestWallWithGap:
    def make_problem(self, seed):
        rng = np.random.default_rng(seed)
        gap_y = float(rng.uniform(-0.15, 0.15))
        bg = wall_with_gap_volume(gap_y)
        fg = small_cube_occ()
        start = Pose(translation=[-0.25, float(rng.uniform(-0.15, 0.15)), 0.0])
        goal = Pose(translation=[0.25, float(rng.uniform(-0.15, 0.15)), 0.0])
        cfg = PlannerConfig(max_iterations=10_000, rng_seed=seed,
                            sample_bounds=np.array([[-0.35, -0.35, -0.35],
                                                    [0.35, 0.35, 0.35]]))
        return start, goal, fg, bg, cfg

    def test_three_seeds_solve_and_validate(self):
        for seed in (0, 1, 2):
            start, goal, fg, bg, cfg = self.make_problem(seed)
            res = plan_rrt_connect(start, goal, fg, bg, cfg)
            assert res.found, f"seed {seed}"
            assert validate_path(res, fg, bg)

    def test_determinism(self):
        start, goal, fg, bg, cfg = self.make_problem(5)
        a = plan_rrt_connect(start, goal, fg, bg, cfg)
        b = plan_rrt_connect(start, goal, fg, bg, cfg)
        assert a.found == b.found and len(a.waypoints) == len(b.waypoints)
        for wa, wb in zip(a.waypoints, b.waypoints):
            assert np.array_equal(wa.matrix(), wb.matrix())

    def test_shortcut_never_longer(self):
        start, goal, fg, bg, cfg = self.make_problem(7)
        raw_cfg = PlannerConfig(**{**cfg.__dict__, "shortcut_attempts": 0})
        raw = plan_rrt_connect(start, goal, fg, bg, raw_cfg)
        smoothed = plan_rrt_connect(start, goal, fg, bg, cfg)
        assert smoothed.found and raw.found
        assert smoothed.length <= raw.length + 1e-9
        assert validate_path(smoothed, fg, bg)


class TestSimulate:
    def test_success_places_at_goal(self):
        task = TaskSpec("apple", ["apple", "bowl"], "g", "n")
        goal = Pose(translation=[0.2, 0.1, 0.05])
        plan = PathResult([Pose.identity(), goal], 0.23, 5, True)
        state = simulate_pick_place(task, Pose.identity(), goal, plan)
        assert state.executed
        assert np.allclose(state.final_pose.matrix(), goal.matrix())

    def test_failure_keeps_base_pose(self):
        task = TaskSpec("apple", ["apple"], "g", "n")
        base = Pose(translation=[0.05, 0.0, 0.03])
        plan = PathResult([], 0.0, 10_000, False)
        state = simulate_pick_place(task, base, Pose(translation=[1, 1, 1]), plan)
        assert not state.executed
        assert np.allclose(state.final_pose.matrix(), base.matrix())

    def test_path_json_export(self, tmp_path):
        plan = PathResult([Pose.identity(), Pose(translation=[0.1, 0, 0])],
                          0.1, 3, True)
        out = tmp_path / "path.json"
        save_path_json(plan, out)
        import json
        data = json.loads(out.read_text())
        assert data["found"] and len(data["waypoints"]) == 2
