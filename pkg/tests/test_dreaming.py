"""Candidate lattice enumeration, masked Gaussian smoothing against a dense
convolution oracle, selection rules, and field CSV round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from d2r.dreaming import (ConfigurationError, EvalSettings, NoFeasiblePoseError,
                          PoseLattice, ScoreField, evaluate_candidates,
                          load_field_csv, sample_candidate_poses, save_field_csv,
                          select_goal_pose, smooth_score_field)
from d2r.geometry import (Pose, compose_poses, orientation_set, quat_multiply,
                          octahedral_orientations)
from d2r.physics import PhysicsParams
from d2r.render import RenderCamera
from d2r.scoring import OracleScorer, RelationSpec
from d2r.dataset import TaskSpec
from d2r.volumetric import make_volume_from_sdf, voxelize_object
from d2r.geometry import CameraIntrinsics, look_at_pose


def cube_lattice(extent=0.3, step=0.05, orientations=None, base=None):
    return PoseLattice(bounds=np.array([[0.0, 0.0, 0.0],
                                        [extent, extent, extent]]),
                       position_step=step,
                       orientations=orientations or orientation_set("single"),
                       base_pose=base or Pose.identity())


def make_field(values, valid=None, step=0.05, orientations=None):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[..., None]
    lattice = PoseLattice(
        bounds=np.array([[0.0, 0.0, 0.0],
                         [step * (values.shape[0] - 1),
                          step * (values.shape[1] - 1),
                          step * (values.shape[2] - 1)]]),
        position_step=step,
        orientations=orientations or orientation_set("single"),
        base_pose=Pose.identity())
    if valid is None:
        valid = np.isfinite(values)
    raw = np.where(valid, values, np.nan)
    return ScoreField(lattice, valid, raw, raw.copy())


class TestLattice:
    def test_cube_count(self):
        # 0.3 m cube at 0.05 m step: 7 points per axis, one orientation
        assert cube_lattice().candidate_count == 7 ** 3

    def test_octahedral_count(self):
        lat = cube_lattice(orientations=orientation_set("octahedral24"))
        assert lat.candidate_count == 7 ** 3 * 24

    def test_millimeter_step_accepted_within_cap(self):
        lat = PoseLattice(bounds=np.array([[0.0, 0.0, 0.026],
                                           [0.12, 0.12, 0.026]]),
                          position_step=0.001,
                          orientations=orientation_set("single"),
                          base_pose=Pose.identity())
        assert lat.candidate_count == 121 * 121
        next(sample_candidate_poses(lat))     # accepted, no error

    def test_cap_enforced(self):
        lat = PoseLattice(bounds=np.array([[0.0, 0.0, 0.0], [1.3, 1.3, 1.3]]),
                          position_step=0.001,
                          orientations=orientation_set("single"),
                          base_pose=Pose.identity())
        assert lat.candidate_count > 2_000_000
        with pytest.raises(ConfigurationError, match="cap"):
            next(sample_candidate_poses(lat))

    def test_enumeration_row_major_and_deterministic(self):
        lat = cube_lattice(extent=0.1, step=0.05,
                           orientations=orientation_set("octahedral24")[:2],
                           base=Pose(np.array([0.9, 0.1, 0.2, 0.1]), [1, 2, 3]))
        stream = list(sample_candidate_poses(lat))
        assert [idx for idx, _ in stream[:4]] == [(0, 0, 0, 0), (0, 0, 0, 1),
                                                  (0, 0, 1, 0), (0, 0, 1, 1)]
        # candidate pose composes bin with base orientation and grid translation
        idx, pose = stream[1]
        expected_rot = quat_multiply(lat.orientations[1], lat.base_pose.rotation)
        assert np.allclose(pose.rotation, expected_rot / np.linalg.norm(expected_rot))
        assert np.allclose(pose.translation, [0.0, 0.0, 0.0])
        again = list(sample_candidate_poses(lat))
        assert all(np.allclose(p.matrix(), q.matrix()) and i == j
                   for (i, p), (j, q) in zip(stream, again))

    def test_candidate_delta_moves_base_to_grid(self):
        base = Pose(np.array([0.7, 0.1, 0.6, 0.2]), [0.3, -0.2, 0.1])
        lat = cube_lattice(extent=0.2, step=0.1,
                           orientations=orientation_set("octahedral24"), base=base)
        idx = (1, 2, 0, 7)
        delta = lat.candidate_delta(idx)
        moved = compose_poses(delta, base)
        assert np.allclose(moved.matrix(), lat.candidate_pose(idx).matrix(), atol=1e-12)


class TestSmoothing:
    def test_constant_field_unchanged(self):
        field = make_field(np.full((5, 5, 3), 2.5))
        out = smooth_score_field(field, sigma=0.07)
        assert np.allclose(out.smoothed[out.valid], 2.5, atol=1e-12)

    def test_sigma_zero_identity(self):
        rng = np.random.default_rng(0)
        field = make_field(rng.uniform(0, 1, (4, 4, 4)))
        out = smooth_score_field(field, sigma=0.0)
        assert np.array_equal(out.smoothed, field.raw)

    def test_spike_matches_dense_convolution_oracle(self):
        values = np.zeros((7, 7, 7))
        values[3, 3, 3] = 1.0
        step = 0.05
        sigma = step          # one cell
        field = make_field(values, step=step)
        out = smooth_score_field(field, sigma=sigma)

        # dense oracle: triple loop over the full grid, gaussian weights
        cells = sigma / step
        expected = np.zeros_like(values)
        for i in range(7):
            for j in range(7):
                for k in range(7):
                    num = den = 0.0
                    for a in range(7):
                        for b in range(7):
                            for c in range(7):
                                d2 = ((i - a) ** 2 + (j - b) ** 2 + (k - c) ** 2) / cells ** 2
                                if max(abs(i - a), abs(j - b), abs(k - c)) > np.ceil(3 * cells):
                                    continue
                                w = np.exp(-0.5 * d2)
                                num += w * values[a, b, c]
                                den += w
                    expected[i, j, k] = num / den
        assert np.allclose(out.smoothed[..., 0], expected, atol=1e-9)

    def test_masked_renormalization_excludes_invalid(self):
        values = np.zeros((5, 5, 1))
        valid = np.ones((5, 5, 1, 1), dtype=bool)
        values[2, 2, 0] = 1.0
        valid[1, 2, 0, 0] = False      # a hole next to the spike
        field = make_field(values, valid=valid)
        out = smooth_score_field(field, sigma=0.05)
        assert np.isnan(out.smoothed[1, 2, 0, 0])
        # valid neighbors of the hole are unaffected by its (missing) value
        assert out.smoothed[2, 2, 0, 0] > 0

    def test_bounds_convex_combination(self):
        rng = np.random.default_rng(3)
        values = rng.uniform(-2, 5, (6, 6, 4))
        valid = rng.uniform(0, 1, (6, 6, 4, 1)) > 0.3
        field = make_field(values, valid=valid)
        out = smooth_score_field(field, sigma=0.08)
        vmin, vmax = values[valid[..., 0]].min(), values[valid[..., 0]].max()
        sm = out.smoothed[out.valid]
        assert np.all(sm >= vmin - 1e-9) and np.all(sm <= vmax + 1e-9)

    def test_spike_attenuated_below_plateau(self):
        spike = np.zeros((9, 9, 9))
        spike[4, 4, 4] = 1.0
        plateau = np.zeros((9, 9, 9))
        plateau[3:6, 3:6, 3:6] = 1.0
        for sigma_cells in (0.5, 1.0, 2.0):
            sigma = sigma_cells * 0.05
            s_out = smooth_score_field(make_field(spike), sigma)
            p_out = smooth_score_field(make_field(plateau), sigma)
            assert s_out.smoothed[4, 4, 4, 0] < p_out.smoothed[4, 4, 4, 0]

    def test_orientation_bins_smoothed_independently(self):
        values = np.zeros((5, 5, 1, 2))
        values[2, 2, 0, 0] = 1.0      # spike only in bin 0
        lattice = PoseLattice(bounds=np.array([[0.0, 0.0, 0.0], [0.2, 0.2, 0.0]]),
                              position_step=0.05,
                              orientations=orientation_set("octahedral24")[:2],
                              base_pose=Pose.identity())
        valid = np.ones((5, 5, 1, 2), dtype=bool)
        field = ScoreField(lattice, valid, values.copy(), values.copy())
        out = smooth_score_field(field, sigma=0.05)
        assert out.smoothed[..., 1].max() == 0.0
        assert out.smoothed[2, 2, 0, 0] > 0.0

    def test_negative_sigma_rejected(self):
        with pytest.raises(ConfigurationError):
            smooth_score_field(make_field(np.zeros((3, 3, 3))), -0.1)


class TestSelect:
    def test_single_valid_cell(self):
        values = np.full((3, 3, 3), np.nan)
        valid = np.zeros((3, 3, 3, 1), dtype=bool)
        values[1, 2, 0] = 0.7
        valid[1, 2, 0, 0] = True
        field = make_field(values, valid=valid)
        pose, idx = select_goal_pose(field)
        assert idx == (1, 2, 0, 0)

    def test_tie_breaks_to_lowest_enumeration_index(self):
        values = np.zeros((3, 3, 3))
        values[0, 1, 0] = 1.0
        values[2, 0, 1] = 1.0
        field = make_field(values)
        _, idx = select_goal_pose(field)
        assert idx == (0, 1, 0, 0)

    def test_all_invalid_raises(self):
        values = np.full((3, 3, 3), np.nan)
        field = make_field(values, valid=np.zeros((3, 3, 3, 1), dtype=bool))
        with pytest.raises(NoFeasiblePoseError, match="no feasible pose"):
            select_goal_pose(field)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_smoothing_bounds_property(seed):
    rng = np.random.default_rng(seed)
    values = rng.uniform(-1, 1, (4, 4, 3))
    valid = rng.uniform(0, 1, (4, 4, 3, 1)) > 0.4
    if not valid.any():
        return
    field = make_field(values, valid=valid)
    out = smooth_score_field(field, sigma=rng.uniform(0.01, 0.2))
    sm = out.smoothed[out.valid]
    assert np.all(sm >= values[valid[..., 0]].min() - 1e-9)
    assert np.all(sm <= values[valid[..., 0]].max() + 1e-9)


@pytest.fixture(scope="module")
def small_world():
    """Plane background with a point target; tiny foreground cube."""
    bg = make_volume_from_sdf(lambda p: p[:, 2],
                              [-0.2, -0.2, -0.04], [0.2, 0.2, 0.2], 0.005)
    fg_vol = make_volume_from_sdf(
        lambda p: np.maximum.reduce([np.abs(p[:, 0] - 0.0) - 0.015,
                                     np.abs(p[:, 1] - 0.0) - 0.015,
                                     np.abs(p[:, 2] - 0.1) - 0.015]),
        [-0.03, -0.03, 0.07], [0.03, 0.03, 0.13], 0.005)
    fg_occ = voxelize_object(fg_vol)
    base = Pose(translation=fg_occ.centroid())
    intr = CameraIntrinsics(fx=60.0, fy=60.0, cx=24.0, cy=24.0, width=48, height=48)
    cam = RenderCamera(intr, look_at_pose([0.3, 0.0, 0.35], [0.0, 0.0, 0.0]))
    return bg, fg_vol, fg_occ, base, cam


class TestEvaluate:
    def task(self):
        return TaskSpec("obj", ["obj", "target"], "goal caption", "norm caption")

    def relation(self, target):
        return RelationSpec(kind="point", goal_caption="goal caption",
                            sigma_pos=0.05, target=np.asarray(target))

    def lattice(self, base, step=0.02):
        return PoseLattice(bounds=np.array([[-0.1, -0.1, 0.015], [0.1, 0.1, 0.035]]),
                           position_step=step,
                           orientations=orientation_set("single"),
                           base_pose=base)

    def settings(self):
        return EvalSettings(physics=PhysicsParams(clearance=0.002, drop=0.025,
                                                  scene_bounds=np.array(
                                                      [[-0.2, -0.2, -0.04],
                                                       [0.2, 0.2, 0.2]])))

    def test_argmax_lands_at_target(self, small_world):
        bg, fg_vol, fg_occ, base, cam = small_world
        target = np.array([0.06, -0.04, 0.02])
        scorer = OracleScorer(self.relation(target))
        field = evaluate_candidates(self.lattice(base), fg_occ, fg_vol, bg, cam,
                                    self.task(), scorer, self.settings())
        assert field.n_valid > 10
        field = smooth_score_field(field, 0.0)
        pose, idx = select_goal_pose(field)
        # nearest valid grid point to the target in xy
        assert np.linalg.norm(pose.translation[:2] - target[:2]) <= 0.015

    def test_field_matches_cell_recomputation(self, small_world):
        bg, fg_vol, fg_occ, base, cam = small_world
        target = np.array([0.0, 0.0, 0.02])
        relation = self.relation(target)
        scorer = OracleScorer(relation)
        lattice = self.lattice(base, step=0.04)
        field = evaluate_candidates(lattice, fg_occ, fg_vol, bg, cam,
                                    self.task(), scorer, self.settings())
        valid_cells = np.argwhere(field.valid)[:20]
        from d2r.scoring import normalized_score, ORACLE_NEUTRAL_SIM
        for cell in valid_cells:
            idx = tuple(int(v) for v in cell)
            pose = lattice.candidate_pose(idx)
            goal = float(np.exp(-relation.pose_error_sq(pose)))
            expected = normalized_score(goal, ORACLE_NEUTRAL_SIM)
            assert field.raw[idx] == pytest.approx(expected, rel=1e-12)

    def test_all_colliding_gives_empty_field(self, small_world):
        bg, fg_vol, fg_occ, base, cam = small_world
        lattice = PoseLattice(bounds=np.array([[-0.05, -0.05, -0.03],
                                               [0.05, 0.05, -0.02]]),
                              position_step=0.02,
                              orientations=orientation_set("single"),
                              base_pose=base)
        scorer = OracleScorer(self.relation([0, 0, 0]))
        field = evaluate_candidates(lattice, fg_occ, fg_vol, bg, cam,
                                    self.task(), scorer, self.settings())
        assert field.n_valid == 0
        with pytest.raises(NoFeasiblePoseError):
            select_goal_pose(field)

    def test_end_to_end_argmax_matches_brute_force(self, small_world):
        """Selection equals the brute-force maximum over independently
        recomputed scores on a small lattice with orientations."""
        bg, fg_vol, fg_occ, base, cam = small_world
        target = np.array([0.04, 0.02, 0.02])
        relation = RelationSpec(kind="point", goal_caption="goal caption",
                                sigma_pos=0.05, target=target,
                                axis_body=np.array([0.0, 0.0, 1.0]),
                                axis_world=np.array([0.0, 0.0, 1.0]), sigma_rot=0.5)
        scorer = OracleScorer(relation)
        lattice = PoseLattice(bounds=np.array([[-0.06, -0.06, 0.015],
                                               [0.06, 0.06, 0.035]]),
                              position_step=0.03,
                              orientations=octahedral_orientations()[:4],
                              base_pose=base)
        field = evaluate_candidates(lattice, fg_occ, fg_vol, bg, cam,
                                    self.task(), scorer, self.settings())
        field = smooth_score_field(field, 0.0)
        _, idx = select_goal_pose(field)

        best, best_score = None, -np.inf
        from d2r.scoring import normalized_score, ORACLE_NEUTRAL_SIM
        for cidx, pose in sample_candidate_poses(lattice):
            if not field.valid[cidx]:
                continue
            score = normalized_score(float(np.exp(-relation.pose_error_sq(pose))),
                                     ORACLE_NEUTRAL_SIM)
            if score > best_score + 1e-15:
                best, best_score = cidx, score
        assert idx == best


class TestFieldCsv:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        values = rng.uniform(0, 2, (4, 3, 2))
        valid = rng.uniform(0, 1, (4, 3, 2, 1)) > 0.4
        field = make_field(values, valid=valid)
        field = smooth_score_field(field, 0.06)
        path = tmp_path / "field.csv"
        save_field_csv(field, path, movable_object_id="apple")
        loaded, meta = load_field_csv(path)
        assert meta["movable_object_id"] == "apple"
        assert np.array_equal(loaded.valid, field.valid)
        assert np.allclose(np.nan_to_num(loaded.raw), np.nan_to_num(field.raw))
        assert np.allclose(np.nan_to_num(loaded.smoothed),
                           np.nan_to_num(field.smoothed))
        assert loaded.lattice.grid_shape == field.lattice.grid_shape
