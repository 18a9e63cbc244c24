"""TSDF fusion against analytic plane and sphere oracles, interpolation,
meshing, and occupancy."""

import warnings

import numpy as np
import pytest

from d2r.dataset import RGBDFrame
from d2r.geometry import CameraIntrinsics, Pose, quat_from_axis_angle
from d2r.volumetric import (BackgroundPolicy, ForegroundPolicy, TsdfVolume,
                            extract_mesh, integrate_frame, make_volume_from_sdf,
                            query_sdf, query_sdf_batch, save_mesh_obj,
                            save_occupancy_csv, voxelize_object)
from conftest import SPHERE_CENTER, SPHERE_RADIUS, sphere_scene_sdf


def overhead_plane_frame(height: float = 0.5, size: int = 60):
    """Camera looking straight down at the plane z=0 from `height`: the depth
    map is exactly constant because depth is distance along the optical axis."""
    intr = CameraIntrinsics(fx=80.0, fy=80.0, cx=size / 2, cy=size / 2,
                            width=size, height=size)
    down = quat_from_axis_angle((1, 0, 0), np.pi)      # camera +z -> world -z
    pose = Pose(down, [0.0, 0.0, height])
    depth = np.full((size, size), height)
    rgb = np.full((size, size, 3), 120, dtype=np.uint8)
    return RGBDFrame(rgb=rgb, depth=depth, camera_pose=pose, masks={}), intr


class TestIntegrate:
    def test_voxel_on_surface_near_zero(self):
        frame, intr = overhead_plane_frame()
        vol = TsdfVolume.from_bounds([-0.1, -0.1, -0.04], [0.1, 0.1, 0.08], 0.005)
        integrate_frame(vol, frame, intr, BackgroundPolicy(frozenset()))
        s, w = query_sdf(vol, [0.0, 0.0, 0.0])
        assert w > 0
        assert abs(s) <= vol.voxel_size

    def test_voxel_5mm_in_front(self):
        # point between camera and plane at height 0.005: true distance 0.005
        frame, intr = overhead_plane_frame()
        vol = TsdfVolume.from_bounds([-0.1, -0.1, -0.04], [0.1, 0.1, 0.08], 0.005,
                                     truncation=0.02)
        integrate_frame(vol, frame, intr, BackgroundPolicy(frozenset()))
        s, w = query_sdf(vol, [0.0, 0.0, 0.005])
        assert w > 0
        assert s == pytest.approx(0.005, abs=0.002)

    def test_voxel_beyond_truncation_not_updated(self):
        frame, intr = overhead_plane_frame()
        vol = TsdfVolume.from_bounds([-0.1, -0.1, -0.08], [0.1, 0.1, 0.08], 0.005,
                                     truncation=0.02)
        integrate_frame(vol, frame, intr, BackgroundPolicy(frozenset()))
        # 50 mm behind the surface (inside the table): outside the band
        s, w = query_sdf(vol, [0.0, 0.0, -0.05])
        assert w == 0.0
        assert s == pytest.approx(vol.truncation)

    def test_clamp_invariant(self, sphere_volume):
        assert np.max(np.abs(sphere_volume.sdf)) <= sphere_volume.truncation + 1e-12

    def test_weight_monotone_over_frames(self, sphere_dataset):
        vol = TsdfVolume.from_bounds([-0.16, -0.16, -0.06], [0.16, 0.16, 0.26], 0.01)
        prev = vol.weight.copy()
        for f in sphere_dataset.frames[:6]:
            integrate_frame(vol, f, sphere_dataset.intrinsics,
                            BackgroundPolicy(frozenset()))
            assert np.all(vol.weight >= prev - 1e-12)
            prev = vol.weight.copy()

    def test_order_robustness(self, sphere_dataset):
        def fuse(order):
            vol = TsdfVolume.from_bounds([-0.16, -0.16, -0.06], [0.16, 0.16, 0.26], 0.01)
            for i in order:
                integrate_frame(vol, sphere_dataset.frames[i],
                                sphere_dataset.intrinsics, BackgroundPolicy(frozenset()))
            return vol
        a = fuse(range(len(sphere_dataset.frames)))
        b = fuse(list(reversed(range(len(sphere_dataset.frames)))))
        assert np.max(np.abs(a.sdf - b.sdf)) <= 1e-6

    def test_frame_outside_volume_warns(self, sphere_dataset):
        vol = TsdfVolume.from_bounds([5.0, 5.0, 5.0], [5.2, 5.2, 5.2], 0.01)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            integrate_frame(vol, sphere_dataset.frames[0], sphere_dataset.intrinsics,
                            BackgroundPolicy(frozenset()))
        assert vol.frames_outside == 1
        assert any("frustum" in str(w.message) for w in caught)
        assert np.all(vol.weight == 0)

    def test_sphere_band_accuracy(self, sphere_volume):
        centers = sphere_volume.voxel_centers()
        true = sphere_scene_sdf(centers)
        w = sphere_volume.weight.reshape(-1)
        band = (np.abs(true) < sphere_volume.truncation) & (w > 0)
        err = sphere_volume.sdf.reshape(-1)[band] - true[band]
        assert np.sqrt(np.mean(err ** 2)) <= sphere_volume.voxel_size


class TestForegroundPolicy:
    def test_foreground_emptiness(self, mini_dataset):
        """Voxels whose projections always fall outside the apple mask carry
        only free-space evidence and are never occupied."""
        vol = TsdfVolume.from_bounds([-0.25, -0.25, -0.02], [0.25, 0.25, 0.2], 0.01)
        for f in mini_dataset.frames:
            integrate_frame(vol, f, mini_dataset.intrinsics, ForegroundPolicy("apple"))
        occ = voxelize_object(vol)
        pts = occ.occupied_points()
        apple = [o for o in mini_dataset.objects if o.object_id == "apple"]
        assert apple and len(pts) > 0
        # every occupied voxel is near the apple (radius 0.032 plus slack)
        centroid = pts.mean(axis=0)
        assert np.all(np.linalg.norm(pts - centroid, axis=1) < 0.06)

    def test_missing_mask_means_all_free(self, mini_dataset):
        vol = TsdfVolume.from_bounds([-0.25, -0.25, -0.02], [0.25, 0.25, 0.2], 0.01)
        integrate_frame(vol, mini_dataset.frames[0], mini_dataset.intrinsics,
                        ForegroundPolicy("nonexistent"))
        assert voxelize_object(vol).count == 0


class TestQuery:
    def test_outside_volume(self, sphere_volume):
        s, w = query_sdf(sphere_volume, [10.0, 0.0, 0.0])
        assert s == pytest.approx(sphere_volume.truncation) and w == 0.0

    def test_voxel_center_identity(self, sphere_volume):
        idx = (10, 12, 20)
        center = sphere_volume.origin + (np.array(idx) + 0.5) * sphere_volume.voxel_size
        s, w = query_sdf(sphere_volume, center)
        assert s == pytest.approx(sphere_volume.sdf[idx], abs=1e-12)
        assert w == pytest.approx(sphere_volume.weight[idx], abs=1e-12)

    def test_sphere_offset_query(self, sphere_volume):
        # 5 mm outside the fused sphere along +x
        p = SPHERE_CENTER + np.array([SPHERE_RADIUS + 0.005, 0.0, 0.0])
        s, w = query_sdf(sphere_volume, p)
        assert w > 0
        assert s == pytest.approx(0.005, abs=sphere_volume.voxel_size)

    def test_batch_matches_scalar(self, sphere_volume):
        rng = np.random.default_rng(0)
        pts = rng.uniform([-0.18, -0.18, -0.08], [0.18, 0.18, 0.28], (50, 3))
        sb, wb = query_sdf_batch(sphere_volume, pts)
        for i, p in enumerate(pts):
            s, w = query_sdf(sphere_volume, p)
            assert s == pytest.approx(sb[i], abs=1e-12)
            assert w == pytest.approx(wb[i], abs=1e-12)


class TestMesh:
    def test_sphere_mesh_accuracy(self, sphere_volume):
        mesh = extract_mesh(sphere_volume)
        assert len(mesh.triangles) > 100
        err = np.abs(sphere_scene_sdf(mesh.vertices))
        assert err.max() <= 0.005

    def test_all_positive_volume_empty_mesh(self):
        vol = TsdfVolume([0, 0, 0], 0.01, (8, 8, 8))
        vol.weight[:] = 1.0
        vol.sdf[:] = vol.truncation
        assert extract_mesh(vol).empty

    def test_no_weight_empty_mesh(self):
        vol = TsdfVolume([0, 0, 0], 0.01, (8, 8, 8))
        vol.sdf[:] = -0.01      # negative but unobserved
        assert extract_mesh(vol).empty

    def test_plane_mesh_height(self):
        frame, intr = overhead_plane_frame()
        vol = TsdfVolume.from_bounds([-0.1, -0.1, -0.04], [0.1, 0.1, 0.08], 0.005)
        integrate_frame(vol, frame, intr, BackgroundPolicy(frozenset()))
        mesh = extract_mesh(vol)
        assert not mesh.empty
        assert np.max(np.abs(mesh.vertices[:, 2])) <= vol.voxel_size

    def test_unobserved_cells_produce_no_triangles(self):
        # negative blob observed only in one octant: triangles stay there
        def blob(p):
            return np.linalg.norm(p - 0.05, axis=1) - 0.03
        vol = make_volume_from_sdf(blob, [0, 0, 0], [0.1, 0.1, 0.1], 0.005)
        vol.weight[10:, :, :] = 0.0
        mesh = extract_mesh(vol)
        assert not mesh.empty
        boundary = vol.origin[0] + 10 * vol.voxel_size
        assert mesh.vertices[:, 0].max() <= boundary + 1e-9

    def test_obj_export(self, tmp_path, sphere_volume):
        mesh = extract_mesh(sphere_volume)
        path = tmp_path / "mesh.obj"
        save_mesh_obj(mesh, path)
        lines = path.read_text().splitlines()
        n_v = sum(1 for line in lines if line.startswith("v "))
        n_f = sum(1 for line in lines if line.startswith("f "))
        assert n_v == len(mesh.vertices) and n_f == len(mesh.triangles)


class TestOccupancy:
    def test_empty_volume(self):
        vol = TsdfVolume([0, 0, 0], 0.01, (8, 8, 8))
        assert voxelize_object(vol).count == 0

    def test_solid_sphere_volume_fraction(self):
        center = np.array([0.0, 0.0, 0.1])
        vol = make_volume_from_sdf(
            lambda p: np.linalg.norm(p - center, axis=1) - 0.1,
            [-0.12, -0.12, -0.02], [0.12, 0.12, 0.22], 0.01)
        occ = voxelize_object(vol)
        expected = 4 / 3 * np.pi * 0.1 ** 3 / 0.01 ** 3
        assert abs(occ.count - expected) / expected <= 0.15

    def test_idempotent(self, sphere_volume):
        a = voxelize_object(sphere_volume)
        b = voxelize_object(sphere_volume)
        assert np.array_equal(a.occupied, b.occupied)

    def test_csv_export(self, tmp_path):
        vol = make_volume_from_sdf(
            lambda p: np.linalg.norm(p - 0.05, axis=1) - 0.02,
            [0, 0, 0], [0.1, 0.1, 0.1], 0.01)
        occ = voxelize_object(vol)
        path = tmp_path / "occ.csv"
        save_occupancy_csv(occ, path)
        rows = path.read_text().splitlines()
        assert rows[0] == "ix,iy,iz"
        assert len(rows) - 1 == occ.count
