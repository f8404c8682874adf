"""Scene generation: depth rendering, keypoint sampling, radial maps, labels.

The per-pixel oracle tests recompute radial distances with independent
backprojection so the rasterizer and the map builder cannot share a bug.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from deskpose import (
    CameraIntrinsics,
    DomainError,
    Pose,
    apply,
    backproject,
    cube,
    cylinder,
    generate_scene,
    icosphere,
    make_radial_maps,
    normalize_depth_local,
    normalize_keypoints2d,
    project,
    render_depth,
    render_scene_depth,
    rotation_zyx,
    select_keypoints_fps,
)
from deskpose.synth import RADIAL_BACKGROUND


def _k_square(fx=200.0, size=128) -> CameraIntrinsics:
    return CameraIntrinsics(fx=fx, fy=fx, cx=size / 2, cy=size / 2,
                            width=size, height=size)


class TestRenderDepth:
    def test_cube_front_face_depth(self):
        # unit cube centered at z=3: the +z-facing near face sits at z=2.5
        k = _k_square()
        depth, mask = render_depth(cube(side=1.0), Pose(np.eye(3), np.array([0, 0, 3.0])), k)
        assert mask[64, 64] == 1
        assert abs(depth[64, 64] - 2.5) < 1e-9

    def test_empty_scene_is_all_zero(self):
        k = _k_square()
        depth, mask = render_scene_depth([], [], k)
        assert not depth.any()
        assert not mask.any()

    def test_sphere_front_point(self):
        k = _k_square()
        depth, mask = render_depth(icosphere(3, 0.2), Pose(np.eye(3), np.array([0, 0, 2.0])), k)
        assert abs(float(depth[mask > 0].min()) - 1.8) < 2e-3

    def test_mask_and_depth_foreground_coincide(self):
        k = _k_square()
        depth, mask = render_depth(cube(side=0.3), Pose(rotation_zyx((0.4, 0.3, 0.2)),
                                                        np.array([0, 0, 1.5])), k)
        assert np.array_equal(mask > 0, depth > 0)

    def test_object_behind_camera_rejected(self):
        k = _k_square()
        with pytest.raises(DomainError):
            render_depth(cube(side=0.3), Pose(np.eye(3), np.array([0, 0, -1.0])), k)

    def test_nearer_of_two_objects_wins(self):
        k = _k_square()
        near = Pose(np.eye(3), np.array([0, 0, 1.0]))
        far = Pose(np.eye(3), np.array([0, 0, 2.0]))
        depth, mask = render_scene_depth([cube(side=0.2), cube(side=0.2)], [near, far], k)
        assert mask[64, 64] == 1
        assert abs(depth[64, 64] - 0.9) < 1e-9


class TestSelectKeypointsFps:
    def test_single_point_is_a_corner(self):
        pts = select_keypoints_fps(cube(side=1.0), 1, seed=0)
        assert np.allclose(np.abs(pts[0]), 0.5)

    def test_two_points_are_opposite_corners(self):
        pts = select_keypoints_fps(cube(side=1.0), 2, seed=0)
        assert abs(np.linalg.norm(pts[0] - pts[1]) - math.sqrt(3)) < 1e-12

    def test_four_points_on_sphere_spread_out(self):
        radius = 0.06
        pts = select_keypoints_fps(icosphere(2, radius), 4, seed=0)
        dmin = min(np.linalg.norm(pts[i] - pts[j])
                   for i in range(4) for j in range(i + 1, 4))
        assert dmin >= radius

    def test_deterministic_given_seed(self):
        mesh = cylinder(segments=32)
        a = select_keypoints_fps(mesh, 6, seed=5)
        b = select_keypoints_fps(mesh, 6, seed=5)
        assert np.array_equal(a, b)

    def test_too_many_points_rejected(self):
        with pytest.raises(DomainError):
            select_keypoints_fps(cube(), 9, seed=0)


class TestMakeRadialMaps:
    def test_zero_at_pixel_under_keypoint(self):
        k = _k_square()
        depth = np.zeros((128, 128), dtype=np.float32)
        mask = np.zeros((128, 128), dtype=np.int32)
        depth[60, 70] = 1.25
        mask[60, 70] = 1
        kp = backproject(np.array([70.5, 60.5]), 1.25, k)  # pixel center
        maps = make_radial_maps(depth, mask > 0, Pose.identity(), kp[None, :], k)
        assert abs(maps[0, 60, 70]) < 1e-6

    def test_background_is_exactly_minus_one(self, desk_camera):
        scene = generate_scene([cube()], 0, desk_camera)
        bg = scene.labels.mask == 0
        assert np.all(scene.radial.maps[:, bg] == RADIAL_BACKGROUND)

    def test_foreground_matches_per_pixel_recompute(self, desk_camera):
        scene = generate_scene([cube()], 3, desk_camera)
        pose = scene.labels.poses[0]
        kps_cam = apply(pose, scene.labels.keypoints3d[0])
        for j in range(len(kps_cam)):
            m = scene.radial.maps[j]
            ys, xs = np.nonzero(scene.labels.mask == 1)
            for y, x in zip(ys[::7], xs[::7]):  # stride keeps the loop quick
                p = backproject(np.array([x + 0.5, y + 0.5]),
                                float(scene.depth[y, x]), desk_camera)
                assert abs(m[y, x] - np.linalg.norm(p - kps_cam[j])) < 1e-6


class TestGenerateScene:
    def test_deterministic_given_seed(self, desk_camera):
        a = generate_scene([cube()], 42, desk_camera)
        b = generate_scene([cube()], 42, desk_camera)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.labels.mask, b.labels.mask)
        assert np.array_equal(a.radial.maps, b.radial.maps)
        assert np.array_equal(a.labels.keypoints2d, b.labels.keypoints2d)

    def test_single_object_mask_ids(self, desk_camera):
        scene = generate_scene([cube()], 1, desk_camera)
        assert set(np.unique(scene.labels.mask)) == {0, 1}

    def test_multi_object_spheres_never_intersect(self, desk_camera):
        meshes = [cube(side=0.05), icosphere(1, 0.025), cylinder(0.02, 0.05, 16)]
        infos = [m.bounding_sphere() for m in meshes]
        for seed in range(100):
            scene = generate_scene(meshes, seed, desk_camera)
            centers = [apply(p, infos[i][0]) for i, p in enumerate(scene.labels.poses)]
            for i in range(3):
                for j in range(i + 1, 3):
                    gap = np.linalg.norm(centers[i] - centers[j])
                    assert gap > infos[i][1] + infos[j][1]

    def test_keypoint_labels_reproject_exactly(self, desk_camera):
        scene = generate_scene([cube()], 9, desk_camera, n_keypoints=4)
        pose = scene.labels.poses[0]
        expected = project(apply(pose, scene.labels.keypoints3d[0]), desk_camera)
        assert np.max(np.abs(scene.labels.keypoints2d[0] - expected)) < 1e-9

    def test_mask_foreground_equals_depth_foreground(self, desk_camera):
        scene = generate_scene([cube(side=0.06), icosphere(2, 0.03)], 4,
                               desk_camera)
        assert np.array_equal(scene.labels.mask > 0, scene.depth > 0)

    def test_radial_stack_channel_bookkeeping(self, desk_camera):
        scene = generate_scene([cube(side=0.06), icosphere(2, 0.03)], 5,
                               desk_camera, n_keypoints=4)
        assert scene.radial.maps.shape[0] == 8
        assert list(scene.radial.class_ids) == [1] * 4 + [2] * 4
        assert list(scene.radial.kp_index) == [0, 1, 2, 3] * 2


class TestNormalization:
    def test_depth_foreground_mapped_to_unit_interval(self, desk_camera):
        scene = generate_scene([cube()], 2, desk_camera)
        norm = normalize_depth_local(scene.depth)
        fg = scene.depth > 0
        assert norm[fg].min() == 0.0
        assert norm[fg].max() == 1.0
        assert not norm[~fg].any()

    def test_keypoints_mapped_to_unit_square(self, desk_camera):
        scene = generate_scene([cube()], 2, desk_camera)
        norm = normalize_keypoints2d(scene.labels.keypoints2d[0], desk_camera)
        assert norm.min() >= 0.0 and norm.max() <= 1.0
