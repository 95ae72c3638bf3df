import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from splat4dlib.exceptions import GaussianError, SegmentTimeError, ShapeError, UnsupportedDegreeError
from splat4dlib.gauss import (
    SH_C0,
    Gaussian4D,
    GaussianSet,
    Scene4D,
    SceneSegment,
    center_at,
    rotate_sh,
    sh_degree_for,
    sh_to_rgb,
)
from splat4dlib.geom import SE3, CameraEntry, CameraRig, Intrinsics


def _kernel(**overrides):
    values = dict(
        center=[1.0, 2.0, 3.0],
        rotation=[1.0, 0.0, 0.0, 0.0],
        scale=[0.1, 0.1, 0.1],
        opacity=0.5,
        sh=np.zeros((1, 3)),
        velocity=[0.0, 0.0, 0.0],
        dynamic=False,
        t_start=0.0,
        t_end=1.0,
    )
    values.update(overrides)
    return Gaussian4D(**values)


def _set(count, t_start, t_end):
    return GaussianSet(
        centers=np.zeros((count, 3)),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (count, 1)),
        scales=np.full((count, 3), 0.1),
        opacities=np.full(count, 0.5),
        sh=np.zeros((count, 1, 3)),
        velocities=np.zeros((count, 3)),
        dynamic=np.zeros(count, dtype=bool),
        t_start=t_start,
        t_end=t_end,
    )


def _rig():
    K = Intrinsics(10.0, 10.0, 2.0, 1.0, 4, 3)
    return CameraRig((CameraEntry("front", K, SE3.identity()),))


def _scene(boundaries):
    segments = tuple(
        SceneSegment(a, b, SE3.identity(), _set(2, a, b)) for a, b in zip(boundaries, boundaries[1:])
    )
    return Scene4D(segments, _rig(), (boundaries[0], boundaries[-1]), (SE3.identity(), SE3.identity()))


def test_center_at_moves_dynamic_kernels_only():
    moving = _kernel(dynamic=True, velocity=[4.0, 0.0, 0.0])
    np.testing.assert_allclose(center_at(moving, 0.5), [3.0, 2.0, 3.0])
    np.testing.assert_allclose(center_at(_kernel(), 0.5), [1.0, 2.0, 3.0])
    with pytest.raises(SegmentTimeError):
        center_at(moving, 1.5)


def test_kernel_invariants_are_enforced():
    with pytest.raises(GaussianError):
        _kernel(opacity=1.5)
    with pytest.raises(GaussianError):
        _kernel(scale=[0.1, 0.0, 0.1])
    with pytest.raises(GaussianError):
        _kernel(rotation=[1.0, 1.0, 0.0, 0.0])
    with pytest.raises(GaussianError):
        _kernel(velocity=[1.0, 0.0, 0.0])
    with pytest.raises(GaussianError):
        _kernel(t_start=1.0, t_end=1.0)


def test_sh_degree_for_validates_counts():
    assert sh_degree_for(1) == 0
    assert sh_degree_for(16) == 3
    with pytest.raises(ShapeError):
        sh_degree_for(5)
    with pytest.raises(UnsupportedDegreeError):
        sh_degree_for(25)


def test_degree_zero_colour_is_view_independent():
    sh = np.zeros((1, 3))
    sh[0] = (np.array([0.2, 0.4, 0.9]) - 0.5) / SH_C0
    for direction in ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]):
        np.testing.assert_allclose(sh_to_rgb(sh, direction), [0.2, 0.4, 0.9], atol=1e-12)
    with pytest.raises(GaussianError):
        sh_to_rgb(sh, [0.0, 0.0, 2.0])


def test_rotate_sh_preserves_colour_under_rotated_view():
    rng = np.random.default_rng(5)
    sh = rng.normal(scale=0.2, size=(8, 4, 3))
    R = Rotation.random(random_state=9).as_matrix()
    directions = rng.normal(size=(8, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    expected = sh_to_rgb(sh, directions)
    rotated = sh_to_rgb(rotate_sh(sh, R), directions @ R.T)
    np.testing.assert_allclose(rotated, expected, atol=1e-12)


def test_rotate_sh_rejects_degree_two():
    with pytest.raises(UnsupportedDegreeError):
        rotate_sh(np.zeros((2, 9, 3)), np.eye(3))


def test_gaussian_set_round_trips_kernels_and_advances_centers():
    kernels = [_kernel(), _kernel(dynamic=True, velocity=[0.0, 2.0, 0.0])]
    gaussians = GaussianSet.from_gaussians(kernels)
    assert len(gaussians) == 2
    assert gaussians.sh_degree == 0
    assert gaussians[1].dynamic
    np.testing.assert_allclose(gaussians.centers_at(0.25), [[1.0, 2.0, 3.0], [1.0, 2.5, 3.0]])
    with pytest.raises(SegmentTimeError):
        gaussians.centers_at(-0.1)


def test_gaussian_set_concatenate_requires_shared_span():
    joined = GaussianSet.concatenate([_set(2, 0.0, 1.0), _set(3, 0.0, 1.0)])
    assert len(joined) == 5
    with pytest.raises(GaussianError):
        GaussianSet.concatenate([_set(2, 0.0, 1.0), _set(3, 0.0, 2.0)])


def test_gaussian_set_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        _set(2, 0.0, 1.0).replace(centers=np.zeros((3, 3)))


def test_segment_span_must_match_kernels():
    with pytest.raises(GaussianError):
        SceneSegment(0.0, 0.5, SE3.identity(), _set(1, 0.0, 1.0))


def test_segment_lookup_is_half_open_with_closed_final_segment():
    scene = _scene([0.0, 0.5, 1.0])
    assert scene.segment_index(0.0) == 0
    assert scene.segment_index(0.5) == 1
    assert scene.segment_index(1.0) == 1
    assert scene.timeline == (0.0, 1.0)
    assert scene.kernel_count() == 4
    with pytest.raises(SegmentTimeError):
        scene.segment_at(1.01)


def test_scene_segments_must_be_contiguous():
    first = SceneSegment(0.0, 0.5, SE3.identity(), _set(1, 0.0, 0.5))
    gap = SceneSegment(0.6, 1.0, SE3.identity(), _set(1, 0.6, 1.0))
    with pytest.raises(GaussianError):
        Scene4D((first, gap), _rig(), (0.0, 1.0), (SE3.identity(), SE3.identity()))
