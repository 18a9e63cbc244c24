"""Raycast renderer: hit geometry against analytic volumes, composition by
depth, determinism, and pose equivariance."""

import numpy as np
import pytest

from d2r.geometry import CameraIntrinsics, Pose, compose_poses, invert_pose, look_at_pose
from d2r.render import (MISS_COLOR, RenderCamera, compose_render,
                        raycast_volume, raycast_volume_batch)
from d2r.volumetric import (BackgroundPolicy, TsdfVolume, integrate_frame,
                            make_volume_from_sdf)
from conftest import SPHERE_CENTER


INTR = CameraIntrinsics(fx=200.0, fy=200.0, cx=64.0, cy=64.0, width=128, height=128)


def sphere_vol(center, radius, voxel=0.005, pad=0.05):
    c = np.asarray(center, dtype=np.float64)
    return make_volume_from_sdf(
        lambda p: np.linalg.norm(p - c, axis=1) - radius,
        c - radius - pad, c + radius + pad, voxel)


def plane_vol(height, extent=0.3, voxel=0.005):
    return make_volume_from_sdf(
        lambda p: p[:, 2] - height,
        [-extent, -extent, height - 0.04], [extent, extent, height + 0.04], voxel)


class TestRaycast:
    def test_empty_volume_all_miss(self):
        vol = TsdfVolume([0, 0, 0], 0.01, (10, 10, 10))
        cam = RenderCamera(INTR, look_at_pose([0.3, 0, 0.05], [0.05, 0.05, 0.05]))
        rgb, depth = raycast_volume(vol, cam)
        assert np.all(np.isinf(depth))
        assert np.all(rgb == np.array(MISS_COLOR, dtype=np.uint8))

    def test_center_depth_on_fused_sphere(self, sphere_volume):
        # camera 0.5 m from the sphere center: first surface at 0.4 m
        cam = RenderCamera(INTR, look_at_pose(SPHERE_CENTER + [0.5, 0, 0],
                                              SPHERE_CENTER))
        _, depth = raycast_volume(sphere_volume, cam)
        assert depth[64, 64] == pytest.approx(0.4, abs=2 * sphere_volume.voxel_size)

    def test_translation_shifts_silhouette(self):
        # analytic sphere r=0.03 at origin-ish; camera on +x looking at it.
        # Moving the object +0.1 along the camera x axis shifts the projected
        # center by fx * 0.1 / depth = 200 * 0.1 / 0.5 = 40 px.
        center = np.array([0.0, 0.0, 0.0])
        vol = sphere_vol(center, 0.03)
        cam = RenderCamera(INTR, look_at_pose([0.5, 0, 0], center))
        cam_x_world = np.array([0.0, 1.0, 0.0])   # right axis of that camera
        _, d0 = raycast_volume(vol, cam)
        _, d1 = raycast_volume(vol, cam, Pose(translation=0.1 * cam_x_world))

        def centroid(depth):
            ys, xs = np.nonzero(np.isfinite(depth))
            return xs.mean(), ys.mean()

        x0, y0 = centroid(d0)
        x1, y1 = centroid(d1)
        assert x1 - x0 == pytest.approx(40.0, abs=2.0)
        assert y1 - y0 == pytest.approx(0.0, abs=2.0)

    def test_determinism(self, sphere_volume):
        cam = RenderCamera(INTR, look_at_pose([0.4, 0.3, 0.4], SPHERE_CENTER))
        delta = Pose(np.array([0.9, 0.1, 0.3, 0.1]), [0.03, -0.02, 0.05])
        a = raycast_volume(sphere_volume, cam, delta)
        b = raycast_volume(sphere_volume, cam, delta)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_pose_equivariance(self, sphere_volume):
        # delta D from camera C == identity delta from camera invert(D) o C
        cam_pose = look_at_pose([0.45, 0.2, 0.35], SPHERE_CENTER)
        delta = Pose(np.array([0.92, 0.2, 0.1, 0.3]), [0.04, -0.03, 0.06])
        r1, _ = raycast_volume(sphere_volume, RenderCamera(INTR, cam_pose), delta)
        moved_cam = compose_poses(invert_pose(delta), cam_pose)
        r2, _ = raycast_volume(sphere_volume, RenderCamera(INTR, moved_cam))
        mean_abs = np.abs(r1.astype(float) - r2.astype(float)).mean()
        assert mean_abs <= 2.0    # 2/255 in normalized units

    def test_batch_equals_single(self, sphere_volume):
        cam = RenderCamera(INTR, look_at_pose([0.4, 0.1, 0.4], SPHERE_CENTER))
        deltas = [None, Pose(translation=[0.05, 0.0, 0.02]),
                  Pose(np.array([0.8, 0.0, 0.6, 0.0]), [0.0, 0.04, 0.0])]
        rgbs, depths = raycast_volume_batch(sphere_volume, cam, deltas)
        for i, d in enumerate(deltas):
            rgb, depth = raycast_volume(sphere_volume, cam, d)
            assert np.array_equal(rgbs[i], rgb)
            assert np.array_equal(depths[i], depth)


class TestCompose:
    def test_fg_outside_frustum_equals_bg(self):
        bg = plane_vol(0.0)
        fg = sphere_vol([0, 0, 0.05], 0.03)
        cam = RenderCamera(INTR, look_at_pose([0.35, 0, 0.25], [0, 0, 0.0]))
        bg_only = raycast_volume(bg, cam)
        out = compose_render(bg, fg, Pose(translation=[5.0, 5.0, 5.0]), cam)
        assert np.array_equal(out.rgb, bg_only[0])
        assert np.array_equal(out.depth, bg_only[1])

    def test_fg_occludes_bg(self):
        bg = plane_vol(0.0)
        fg = sphere_vol([0.0, 0.0, 0.12], 0.04)
        cam_pose = look_at_pose([0.0, -0.4, 0.35], [0.0, 0.0, 0.05])
        cam = RenderCamera(INTR, cam_pose)
        bg_rgb, bg_depth = raycast_volume(bg, cam)
        out = compose_render(bg, fg, Pose.identity(), cam)
        fg_rgb, fg_depth = raycast_volume(fg, cam, None)
        overlap = np.isfinite(fg_depth) & np.isfinite(bg_depth) & (fg_depth < bg_depth)
        assert overlap.sum() > 50
        assert np.array_equal(out.rgb[overlap], fg_rgb[overlap])

    def test_depth_is_pixelwise_min(self):
        bg = plane_vol(0.0)
        fg = sphere_vol([0.0, 0.0, 0.12], 0.04)
        cam = RenderCamera(INTR, look_at_pose([0.0, -0.4, 0.35], [0.0, 0.0, 0.05]))
        out = compose_render(bg, fg, Pose.identity(), cam)
        _, bg_depth = raycast_volume(bg, cam)
        _, fg_depth = raycast_volume(fg, cam)
        assert np.array_equal(out.depth, np.minimum(bg_depth, fg_depth))

    def test_both_miss_gets_neutral_color(self):
        bg = TsdfVolume([0, 0, 0], 0.01, (5, 5, 5))
        fg = TsdfVolume([0, 0, 0], 0.01, (5, 5, 5))
        cam = RenderCamera(INTR, look_at_pose([0.5, 0, 0.2], [0.02, 0.02, 0.02]))
        out = compose_render(bg, fg, Pose.identity(), cam)
        assert np.all(out.rgb == np.array(MISS_COLOR, dtype=np.uint8))
        assert np.all(np.isinf(out.depth))


class TestCompositingEquivalence:
    def test_identity_delta_matches_full_fusion(self, mini_dataset):
        """Foreground at identity composed over the background must match the
        jointly fused full-scene render."""
        from d2r.volumetric import ForegroundPolicy
        from d2r.pipeline import choose_eval_camera
        from d2r.config import PipelineConfig

        cfg = PipelineConfig(render_width=96, render_height=96, bg_voxel=0.008)
        lo, hi = mini_dataset.scene_bounds
        full = TsdfVolume.from_bounds(lo, hi, cfg.bg_voxel)
        bg = TsdfVolume.from_bounds(lo, hi, cfg.bg_voxel)
        apple_pos = None
        for f in mini_dataset.frames:
            integrate_frame(full, f, mini_dataset.intrinsics, BackgroundPolicy(frozenset()))
            integrate_frame(bg, f, mini_dataset.intrinsics,
                            BackgroundPolicy(frozenset({"apple"})))
        fg = TsdfVolume.from_bounds([-0.3, -0.3, -0.02], [0.3, 0.3, 0.2], 0.005)
        for f in mini_dataset.frames:
            integrate_frame(fg, f, mini_dataset.intrinsics, ForegroundPolicy("apple"))

        cam = choose_eval_camera(mini_dataset, cfg)
        composed = compose_render(bg, fg, Pose.identity(), cam)
        full_rgb, _ = raycast_volume(full, cam)
        mean_abs = np.abs(composed.rgb.astype(float) - full_rgb.astype(float)).mean()
        assert mean_abs <= 2.0    # 2/255 in normalized units
