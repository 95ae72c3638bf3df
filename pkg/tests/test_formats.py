import logging
import struct

import numpy as np
import pytest

from splat4dlib.exceptions import FormatError, ManifestError
from splat4dlib.formats import (
    ARCHIVE_HEADER,
    RASTER_HEADER,
    SEGMENT_HEADER,
    checked_quaternion,
    decode_raster,
    decode_segment,
    encode_raster,
    encode_segment,
    load_image,
    load_raster,
    load_scene,
    load_scene_index,
    load_segment,
    quantize_image,
    save_image,
    save_raster,
    save_scene_index,
    save_segment,
)
from splat4dlib.gauss import GaussianSet, Scene4D, SceneSegment
from splat4dlib.geom import SE3
from splat4dlib.synth import default_spec, materialize


def _segment(count, sh_degree=0, seed=0, t_start=0.0, t_end=0.5):
    rng = np.random.default_rng(seed)
    rotations = rng.normal(size=(count, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    dynamic = rng.uniform(size=count) < 0.3
    velocities = np.where(dynamic[:, None], rng.normal(size=(count, 3)), 0.0)
    gaussians = GaussianSet(
        centers=rng.normal(scale=10.0, size=(count, 3)),
        rotations=rotations,
        scales=rng.uniform(0.01, 1.0, size=(count, 3)),
        opacities=rng.uniform(size=count),
        sh=rng.normal(size=(count, (sh_degree + 1) ** 2, 3)),
        velocities=velocities,
        dynamic=dynamic,
        t_start=t_start,
        t_end=t_end,
    )
    return SceneSegment(t_start, t_end, SE3.from_yaw(12.0, (3.0, -1.0, 0.2)), gaussians)


def test_float_and_integer_rasters_round_trip(tmp_path):
    depth = np.linspace(1.5, 110.0, 24, dtype=np.float32).reshape(4, 6)
    save_raster(tmp_path / "depth.s4df", depth)
    np.testing.assert_array_equal(load_raster(tmp_path / "depth.s4df"), depth)

    mask = np.arange(24, dtype=np.int32).reshape(4, 6) % 3
    save_raster(tmp_path / "mask.s4di", mask)
    loaded = load_raster(tmp_path / "mask.s4di")
    assert loaded.dtype == np.int32
    np.testing.assert_array_equal(loaded, mask)

    multi = np.random.default_rng(0).normal(size=(3, 5, 4)).astype(np.float32)
    np.testing.assert_array_equal(decode_raster(encode_raster(multi)), multi)


def test_raster_rejects_bad_magic_and_truncation():
    data = encode_raster(np.zeros((2, 2), dtype=np.float32))
    with pytest.raises(FormatError, match="magic"):
        decode_raster(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="truncated"):
        decode_raster(data[:-1])
    with pytest.raises(FormatError, match="truncated raster header"):
        decode_raster(data[: RASTER_HEADER.size - 2])


def test_image_quantization_rounds_halves_up(tmp_path):
    assert quantize_image(np.array([0.5, 0.0, 1.0, 1.7, -0.2])).tolist() == [128, 0, 255, 255, 0]
    rng = np.random.default_rng(1)
    pixels = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    save_image(tmp_path / "frame.ppm", pixels)
    np.testing.assert_allclose(load_image(tmp_path / "frame.ppm"), pixels, atol=1e-12)


def test_empty_archive_round_trips():
    segment = SceneSegment(0.0, 1.0, SE3.identity(), GaussianSet.empty(0, 0.0, 1.0))
    data = encode_segment(segment)
    assert len(data) == ARCHIVE_HEADER.size + SEGMENT_HEADER.size
    decoded = decode_segment(data)
    assert len(decoded) == 0
    assert (decoded.t_start, decoded.t_end) == (0.0, 1.0)
    assert encode_segment(decoded) == data


def test_million_record_archive_re_encodes_byte_identically():
    data = encode_segment(_segment(1_000_000))
    assert len(data) == 128 + 153 * 1_000_000
    assert encode_segment(decode_segment(data)) == data


@pytest.mark.parametrize("value", [float("nan"), float("inf")])
def test_non_finite_opacity_is_rejected_on_decode(value):
    data = bytearray(encode_segment(_segment(4)))
    # opacity of record 2 sits 80 bytes into the record
    struct.pack_into("<d", data, 128 + 2 * 153 + 80, value)
    with pytest.raises(FormatError, match="Non-finite opacities at kernel 2"):
        decode_segment(bytes(data))


def test_degree_one_archive_preserves_every_field(tmp_path):
    segment = _segment(50, sh_degree=1, seed=3)
    path = tmp_path / "segment.s4dg"
    save_segment(path, segment)
    loaded = load_segment(path)
    np.testing.assert_array_equal(loaded.gaussians.sh, segment.gaussians.sh)
    np.testing.assert_array_equal(loaded.gaussians.dynamic, segment.gaussians.dynamic)
    np.testing.assert_array_equal(loaded.anchor_pose.rotation, segment.anchor_pose.rotation)
    assert loaded.gaussians.sh_degree == 1


def test_archive_errors_name_the_offset():
    data = encode_segment(_segment(3))
    with pytest.raises(FormatError, match="inside record 2"):
        decode_segment(data[:-5])
    with pytest.raises(FormatError, match="unsupported archive version 9 at byte 4"):
        decode_segment(data[:4] + bytes([9]) + data[5:])
    with pytest.raises(FormatError, match="truncated archive header"):
        decode_segment(data[: ARCHIVE_HEADER.size - 1])


def test_missing_archive_is_reported(tmp_path):
    with pytest.raises(FormatError, match="not found"):
        load_segment(tmp_path / "absent.s4dg")


def test_quaternion_tolerance(caplog):
    with caplog.at_level(logging.WARNING, logger="splat4dlib.formats"):
        q = checked_quaternion([0.999, 0.0, 0.0, 0.0], "camera 'front'")
    assert q.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert "re-normalizing" in caplog.text
    with pytest.raises(ManifestError, match="camera 'front'"):
        checked_quaternion([0.99, 0.0, 0.0, 0.0], "camera 'front'")


def test_load_scene_reads_a_synthetic_scene(tmp_path):
    spec = default_spec(width=32, height=18)
    manifest_path = materialize(spec, tmp_path)
    inputs = load_scene(manifest_path)
    assert inputs.rig.camera_ids == ("front",)
    assert [frame.timestamp for frame in inputs.context_frames] == [0.0, 0.5]
    assert len(inputs.held_out) == 5
    view = inputs.context_frames[0].views[0]
    assert view.image.shape == (18, 32, 3)
    assert view.attributes.raw_rotation.shape == (18, 32, 4)
    assert inputs.context_frames[0].tracks[1].tolist() == [12.0, -2.5, 0.8]


def test_load_scene_rejects_a_wrong_sized_depth(tmp_path):
    manifest_path = materialize(default_spec(width=32, height=18), tmp_path)
    bad = tmp_path / "depth" / "front_003.s4df"
    save_raster(bad, np.full((17, 32), 10.0, dtype=np.float32))
    with pytest.raises(ManifestError, match="front_003.s4df"):
        load_scene(manifest_path)


def test_segment_index_round_trips(tmp_path):
    first = _segment(10, t_start=0.0, t_end=0.5)
    second = _segment(12, seed=1, t_start=0.5, t_end=1.0)
    second = SceneSegment(
        second.t_start, second.t_end, second.anchor_pose, second.gaussians, velocity_sources={1: "track"}
    )
    rig = default_spec(width=32, height=18).rig()
    scene = Scene4D((first, second), rig, (0.0, 1.0), (SE3.identity(), SE3.translation_only(5.0)))
    index_path = save_scene_index(tmp_path, scene, build_count=3)
    assert index_path.name == "segments.json"

    loaded = load_scene_index(tmp_path)
    assert [len(segment) for segment in loaded.segments] == [10, 12]
    assert loaded.segments[1].velocity_sources == {1: "track"}
    assert loaded.rig.camera("front").intrinsics == rig.camera("front").intrinsics
    np.testing.assert_allclose(loaded.pose_at(0.5).translation, [2.5, 0.0, 0.0])
    np.testing.assert_array_equal(loaded.segments[0].gaussians.centers, first.gaussians.centers)


def test_missing_segment_index_is_a_manifest_error(tmp_path):
    with pytest.raises(ManifestError, match="segments.json"):
        load_scene_index(tmp_path)
