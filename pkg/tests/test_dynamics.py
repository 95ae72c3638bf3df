import logging

import numpy as np
import pytest

from splat4dlib.build import CameraFrame, ContextFrame, build_context_frame, clamp_depth
from splat4dlib.dynamics import (
    ObjectTrack,
    apply_flow,
    estimate_instance_velocities,
    rasterize_flow,
    velocity_from_centroids,
    velocity_from_track,
)
from splat4dlib.exceptions import DynamicsError, MissingInstanceError, ShapeError
from splat4dlib.gauss import GaussianSet
from splat4dlib.geom import SE3
from splat4dlib.synth import default_spec, ego_pose_at, generate_attribute_maps, generate_frame


def _set(centers):
    centers = np.asarray(centers, dtype=np.float64)
    count = centers.shape[0]
    return GaussianSet(
        centers=centers,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (count, 1)),
        scales=np.full((count, 3), 0.1),
        opacities=np.full(count, 0.9),
        sh=np.zeros((count, 1, 3)),
        velocities=np.zeros((count, 3)),
        dynamic=np.zeros(count, dtype=bool),
        t_start=0.0,
        t_end=0.5,
    )


def _context_frame(spec, t, with_tracks=True, drop_mask=False):
    frame = generate_frame(spec, t, "front")
    maps = generate_attribute_maps(spec, frame, "front")
    mask = np.zeros_like(frame.mask) if drop_mask else frame.mask
    view = CameraFrame("front", frame.image, clamp_depth(frame.depth), maps, mask)
    return ContextFrame(t, (view,), tracks=frame.tracks if with_tracks else {})


def test_track_velocity_is_displacement_over_dt():
    track = ObjectTrack(1, [10.0, 0.0, 0.0], [12.0, 0.0, 0.0])
    velocity = velocity_from_track(track, SE3.identity(), 0.5)
    assert velocity.tolist() == [4.0, 0.0, 0.0]


def test_track_velocity_is_expressed_in_the_segment_start_frame():
    track = ObjectTrack(1, [10.0, 0.0, 0.0], [12.0, 0.0, 0.0])
    ego = SE3.from_yaw(90.0, (3.0, 1.0, 0.0))
    np.testing.assert_allclose(velocity_from_track(track, ego, 0.5), [0.0, -4.0, 0.0], atol=1e-12)


def test_velocity_requires_positive_dt():
    track = ObjectTrack(1, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(DynamicsError):
        velocity_from_track(track, SE3.identity(), 0.0)


def test_centroid_velocity_compensates_ego_motion():
    g_Ts = _set([[10.0, 0.0, 0.0], [12.0, 0.0, 0.0], [50.0, 0.0, 0.0]])
    g_Ts1 = _set([[9.0, 0.0, 0.0], [11.0, 0.0, 0.0], [50.0, 0.0, 0.0]])
    mask = np.array([1, 1, 0])
    T_s1_to_s = SE3.translation_only(3.0, 0.0, 0.0)
    velocities = velocity_from_centroids(mask, mask, g_Ts, g_Ts1, T_s1_to_s, 0.5)
    np.testing.assert_allclose(velocities[1], [4.0, 0.0, 0.0], atol=1e-12)


def test_centroid_velocity_requires_instance_in_both_frames():
    g = _set([[10.0, 0.0, 0.0], [12.0, 0.0, 0.0]])
    with pytest.raises(MissingInstanceError):
        velocity_from_centroids(np.array([1, 0]), np.array([0, 0]), g, g, SE3.identity(), 0.5)
    with pytest.raises(ShapeError):
        velocity_from_centroids(np.array([1, 0, 0]), np.array([1, 0]), g, g, SE3.identity(), 0.5)


def test_rasterize_flow_fills_instance_pixels():
    mask = np.array([[0, 1], [2, 1]])
    flow = rasterize_flow({1: [1.0, 0.0, 0.0], 2: [0.0, 2.0, 0.0]}, mask)
    assert flow.shape == (2, 2, 3)
    assert flow[0, 0].tolist() == [0.0, 0.0, 0.0]
    assert flow[0, 1].tolist() == [1.0, 0.0, 0.0]
    assert flow[1, 0].tolist() == [0.0, 2.0, 0.0]
    with pytest.raises(MissingInstanceError):
        rasterize_flow({1: [1.0, 0.0, 0.0]}, mask)


def test_apply_flow_marks_masked_kernels_dynamic():
    gaussians = _set([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    flow = np.array([[5.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    flowed = apply_flow(gaussians, flow, np.array([0, 1, 0]))
    assert flowed.dynamic.tolist() == [False, True, False]
    assert flowed.velocities.tolist() == [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    with pytest.raises(ShapeError):
        apply_flow(gaussians, flow[:2], np.array([0, 1]))


def test_track_and_centroid_estimates_agree_when_the_box_holds_still_in_view():
    # the ego drives at the box's own 4 m/s, so both frames see the same silhouette
    spec = default_spec(width=64, height=36, ego_speed=4.0)
    rig = spec.rig()
    ego_s, ego_s1 = ego_pose_at(spec, 0.0), ego_pose_at(spec, 0.5)

    by_track = (_context_frame(spec, 0.0), _context_frame(spec, 0.5))
    by_centroid = (
        _context_frame(spec, 0.0, with_tracks=False),
        _context_frame(spec, 0.5, with_tracks=False),
    )
    built = [build_context_frame(frame, rig, 0.0, 0.5) for frame in by_track]
    assert built[0].centers.shape[0] == 64 * 36

    tracked = estimate_instance_velocities(*by_track, *built, ego_s, ego_s1, rig)
    centroid = estimate_instance_velocities(*by_centroid, *built, ego_s, ego_s1, rig)
    assert tracked[1].source == "track"
    assert centroid[1].source == "centroid"
    np.testing.assert_allclose(tracked[1].velocity, [4.0, 0.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(centroid[1].velocity, tracked[1].velocity, atol=1e-6)


def test_centroid_estimate_stays_close_while_the_ego_closes_in():
    spec = default_spec(width=64, height=36)
    rig = spec.rig()
    frames = (
        _context_frame(spec, 0.0, with_tracks=False),
        _context_frame(spec, 0.5, with_tracks=False),
    )
    built = [build_context_frame(frame, rig, 0.0, 0.5) for frame in frames]
    estimates = estimate_instance_velocities(
        *frames, *built, ego_pose_at(spec, 0.0), ego_pose_at(spec, 0.5), rig
    )
    assert estimates[1].source == "centroid"
    # visible-surface centroids shift a little as the silhouette grows
    np.testing.assert_allclose(estimates[1].velocity, [4.0, 0.0, 0.0], atol=0.5)


def test_instance_seen_once_falls_back_to_zero_with_warning(caplog):
    spec = default_spec(width=64, height=36)
    rig = spec.rig()
    frame_s = _context_frame(spec, 0.0, with_tracks=False)
    frame_s1 = _context_frame(spec, 0.5, with_tracks=False, drop_mask=True)
    built = [build_context_frame(frame, rig, 0.0, 0.5) for frame in (frame_s, frame_s1)]
    with caplog.at_level(logging.WARNING, logger="splat4dlib.dynamics"):
        estimates = estimate_instance_velocities(
            frame_s, frame_s1, *built, ego_pose_at(spec, 0.0), ego_pose_at(spec, 0.5), rig
        )
    assert estimates[1].source == "none"
    assert estimates[1].velocity.tolist() == [0.0, 0.0, 0.0]
    assert "only one of the frames" in caplog.text
