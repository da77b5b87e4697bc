"""Synthetic scene rendering and ground-truth sidecars."""

import json

import numpy as np
import pytest

from semloc.core import Pose, quat_from_axis_angle
from semloc.synth import (Primitive, SceneSpec, SensorModel, render_frame,
                          render_scene, scene_spec_from_json,
                          trajectory_poses)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def box_at(pos, dims=(1.0, 1.0, 1.0), class_id=1, hsv=(0.1, 0.8, 0.6),
           yaw=0.0, color_noise=0.0):
    return Primitive("box", Pose(np.asarray(pos, float),
                                 quat_from_axis_angle([0, 0, 1], yaw)),
                     dims, class_id=class_id, base_hsv=hsv,
                     color_noise=color_noise)


def spec_with(prims, waypoints=((0.0, 0.0, 0.5), (1.0, 0.0, 0.5)), **kw):
    sensor = kw.pop("sensor", SensorModel(horizontal_step=2.0,
                                          vertical_step=4.0))
    return SceneSpec(primitives=tuple(prims), waypoints=waypoints,
                     sensor=sensor, **kw)


class TestPrimitives:
    def test_unknown_shape_rejected(self):
        with pytest.raises(ValueError):
            Primitive("sphere", Pose.identity(), (1.0,), class_id=0)

    def test_non_positive_dimensions_rejected(self):
        with pytest.raises(ValueError):
            box_at([0, 0, 0], dims=(1.0, 0.0, 1.0))

    def test_single_waypoint_rejected(self):
        with pytest.raises(ValueError):
            SceneSpec(primitives=(), waypoints=((0, 0, 0),))


class TestTrajectory:
    def test_covers_polyline(self):
        spec = spec_with([box_at([5, 0, 0])],
                         waypoints=((0, 0, 0), (2, 0, 0), (2, 2, 0)))
        poses = trajectory_poses(spec)
        assert np.allclose(poses[0][1].translation, [0, 0, 0])
        assert np.allclose(poses[-1][1].translation, [2, 2, 0], atol=0.3)
        times = [t for t, _ in poses]
        assert all(b > a for a, b in zip(times, times[1:]))

    def test_yaw_follows_travel_direction(self):
        spec = spec_with([box_at([5, 0, 0])],
                         waypoints=((0, 0, 0), (0, 3, 0)))
        _, pose = trajectory_poses(spec)[1]
        # heading +y is a 90 degree yaw
        fwd = pose.rotation_matrix() @ np.array([1.0, 0.0, 0.0])
        assert np.allclose(fwd, [0, 1, 0], atol=1e-12)

    def test_frame_count_scales_with_speed(self):
        slow = spec_with([box_at([5, 0, 0])], speed=0.5)
        fast = spec_with([box_at([5, 0, 0])], speed=2.0)
        assert len(trajectory_poses(slow)) > len(trajectory_poses(fast))


class TestRenderFrame:
    def test_points_lie_on_box_surface(self):
        prim = box_at([3.0, 0.0, 0.5])
        spec = spec_with([prim])
        rng = np.random.default_rng(0)
        sf = render_frame(spec, Pose(np.array([0.0, 0.0, 0.5]), IDENTITY_Q),
                          0.0, rng)
        assert len(sf.frame) > 0
        world = sf.frame.world_xyz()
        local = world - prim.pose.translation
        half = np.array(prim.dimensions) / 2.0
        assert np.all(np.abs(local) <= half + 1e-9)
        on_face = np.any(np.isclose(np.abs(local), half, atol=1e-9), axis=1)
        assert on_face.all()
        assert set(sf.object_ids.tolist()) == {0}

    def test_occlusion_keeps_nearer_object(self):
        near = box_at([2.0, 0.0, 0.5], class_id=1)
        far = box_at([6.0, 0.0, 0.5], dims=(1.0, 4.0, 2.0), class_id=2)
        spec = spec_with([far, near])
        rng = np.random.default_rng(0)
        sf = render_frame(spec, Pose(np.array([0.0, 0.0, 0.5]), IDENTITY_Q),
                          0.0, rng)
        # rays straight ahead must report the near box (primitive index 1)
        dists = np.linalg.norm(sf.frame.xyz, axis=1)
        ahead = np.abs(sf.frame.xyz[:, 1]) < 0.2
        assert (sf.object_ids[ahead & (dists < 3.0)] == 1).all()

    def test_cylinder_hits_respect_radius(self):
        prim = Primitive("cylinder", Pose(np.array([4.0, 0.0, 1.0]),
                                          IDENTITY_Q), (0.8, 2.0), class_id=1)
        spec = spec_with([prim])
        rng = np.random.default_rng(0)
        sf = render_frame(spec, Pose(np.array([0.0, 0.0, 1.0]), IDENTITY_Q),
                          0.0, rng)
        assert len(sf.frame) > 0
        local = sf.frame.world_xyz() - prim.pose.translation
        r = np.linalg.norm(local[:, :2], axis=1)
        assert np.all(r <= 0.8 + 1e-9)
        assert np.all(np.abs(local[:, 2]) <= 1.0 + 1e-9)

    def test_plane_rendering(self):
        ground = Primitive("plane", Pose(np.zeros(3), IDENTITY_Q),
                           (20.0, 20.0), class_id=0)
        spec = spec_with([ground], sensor=SensorModel(horizontal_step=2.0,
                                                      vertical_step=4.0,
                                                      vertical_fov=60.0))
        rng = np.random.default_rng(0)
        sf = render_frame(spec, Pose(np.array([0.0, 0.0, 1.0]), IDENTITY_Q),
                          0.0, rng)
        assert len(sf.frame) > 0
        assert np.allclose(sf.frame.world_xyz()[:, 2], 0.0, atol=1e-9)

    def test_zero_noise_exact_labels_and_colors(self):
        spec = spec_with([box_at([3, 0, 0.5], class_id=4, hsv=(0.3, 0.7, 0.9))])
        rng = np.random.default_rng(0)
        sf = render_frame(spec, Pose(np.array([0.0, 0.0, 0.5]), IDENTITY_Q),
                          0.0, rng)
        assert (sf.frame.cls == 4).all()
        assert np.allclose(sf.frame.hsv, [0.3, 0.7, 0.9])

    def test_label_noise_rate(self):
        spec = spec_with([box_at([3, 0, 0.5], dims=(1.0, 6.0, 2.0),
                                 class_id=1)],
                         label_noise_prob=0.3, class_ids=(1, 2, 3),
                         sensor=SensorModel(horizontal_step=0.5,
                                            vertical_step=1.0))
        rng = np.random.default_rng(0)
        sf = render_frame(spec, Pose(np.array([0.0, 0.0, 0.5]), IDENTITY_Q),
                          0.0, rng)
        n = len(sf.frame)
        assert n > 500
        flipped = (sf.frame.cls != 1).mean()
        # a third of corrupted labels draw the original id back
        assert 0.1 < flipped < 0.3

    def test_max_range_cutoff(self):
        spec = spec_with([box_at([40.0, 0.0, 0.5])],
                         sensor=SensorModel(max_range=10.0,
                                            horizontal_step=2.0,
                                            vertical_step=4.0))
        rng = np.random.default_rng(0)
        sf = render_frame(spec, Pose(np.array([0.0, 0.0, 0.5]), IDENTITY_Q),
                          0.0, rng)
        assert len(sf.frame) == 0


class TestRenderScene:
    def test_deterministic(self):
        spec = spec_with([box_at([3, 0, 0.5], color_noise=0.05)],
                         label_noise_prob=0.1, class_ids=(1, 2), seed=5)
        a = render_scene(spec)
        b = render_scene(spec)
        assert len(a) == len(b)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.frame.xyz, fb.frame.xyz)
            assert np.array_equal(fa.frame.hsv, fb.frame.hsv)
            assert np.array_equal(fa.frame.cls, fb.frame.cls)
            assert np.array_equal(fa.object_ids, fb.object_ids)

    def test_seed_changes_noise(self):
        base = dict(label_noise_prob=0.0, class_ids=())
        a = render_scene(spec_with([box_at([3, 0, 0.5], color_noise=0.05)],
                                   seed=1, **base))
        b = render_scene(spec_with([box_at([3, 0, 0.5], color_noise=0.05)],
                                   seed=2, **base))
        assert not np.array_equal(a[0].frame.hsv, b[0].frame.hsv)

    def test_sidecar_aligns_with_frames(self):
        spec = spec_with([box_at([3, 0, 0.5]), box_at([0, 3, 0.5],
                                                      class_id=2)])
        for sf in render_scene(spec):
            assert len(sf.object_ids) == len(sf.frame)
            assert set(np.unique(sf.object_ids).tolist()) <= {0, 1}


class TestSceneSpecJson:
    def test_load(self, tmp_path):
        raw = {
            "primitives": [
                {"shape": "box", "position": [1, 2, 0.5], "yaw": 0.5,
                 "dimensions": [1, 1, 1], "class_id": 2,
                 "base_hsv": [0.2, 0.5, 0.5], "color_noise": 0.01},
                {"shape": "cylinder", "dimensions": [0.5, 1.5], "class_id": 3},
            ],
            "waypoints": [[0, 0, 0.3], [2, 0, 0.3]],
            "speed": 0.5,
            "frame_rate": 2.0,
            "sensor": {"horizontal_step": 2.0, "vertical_step": 4.0},
            "label_noise_prob": 0.05,
            "class_ids": [1, 2, 3],
            "seed": 9,
        }
        path = tmp_path / "scene.json"
        path.write_text(json.dumps(raw))
        spec = scene_spec_from_json(path)
        assert len(spec.primitives) == 2
        assert spec.primitives[0].class_id == 2
        assert spec.primitives[1].shape == "cylinder"
        assert spec.speed == 0.5
        assert spec.sensor.horizontal_step == 2.0
        assert spec.class_ids == (1, 2, 3)
        assert spec.seed == 9
        # the loaded spec renders
        frames = render_scene(spec)
        assert len(frames) >= 2
