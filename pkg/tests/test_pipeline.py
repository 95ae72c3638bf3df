import numpy as np
import pytest

from splat4dlib.cli import main
from splat4dlib.exceptions import ManifestError, SegmentTimeError
from splat4dlib.formats import load_image, load_raster, load_scene_index, load_segment, save_image
from splat4dlib.geom import offset_pose
from splat4dlib.photo import psnr, ssim, warp
from splat4dlib.pipeline import ScenePipeline
from splat4dlib.render import RenderRequest, render
from splat4dlib.synth import default_spec, generate_frame, mask_centroid, materialize


@pytest.fixture(scope="module")
def closure(tmp_path_factory):
    root = tmp_path_factory.mktemp("closure")
    spec = default_spec()
    manifest_path = materialize(spec, root / "scene")
    pipeline = ScenePipeline(threads=2)
    summary = pipeline.fuse(manifest_path, root / "segments")
    return spec, manifest_path, root, summary


def test_fuse_summary_reports_one_segment(closure):
    _, _, _, summary = closure
    assert summary.segment_count == 1
    assert summary.build_count == 2
    assert summary.kernel_counts == [2 * 518 * 280]
    assert summary.velocity_sources == [{1: "track"}]


@pytest.mark.parametrize("t", [0.0, 0.5])
def test_render_at_context_poses_reproduces_the_oracle(closure, t):
    spec, _, root, _ = closure
    scene = load_scene_index(root / "segments")
    request = RenderRequest(
        time=t,
        camera=scene.rig.camera("front"),
        ego_pose=scene.pose_at(t),
        background=spec.background,
    )
    rendered = render(scene, request, max_workers=2).rgb
    expected = generate_frame(spec, t, "front").image
    assert psnr(rendered, expected) >= 35.0
    assert ssim(rendered, expected) >= 0.95


def test_dynamic_silhouette_lands_on_the_moving_box(closure):
    spec, _, root, _ = closure
    scene = load_scene_index(root / "segments")
    t = 0.25
    request = RenderRequest(
        time=t,
        camera=scene.rig.camera("front"),
        ego_pose=scene.pose_at(t),
        dynamic_only=True,
    )
    alpha = render(scene, request, max_workers=2).alpha
    rendered = mask_centroid(alpha > 0.5)
    expected = mask_centroid(generate_frame(spec, t, "front").mask)
    assert np.linalg.norm(rendered - expected) <= 1.5


def test_lateral_ego_offset_warps_back_onto_the_centered_render(closure):
    spec, _, root, _ = closure
    background = ",".join(str(c) for c in spec.background)
    paths = {}
    for name, extra in (("centered", []), ("shifted", ["--ego-offset", "dy=1.0"])):
        paths[name] = root / f"{name}.ppm"
        argv = ["--threads", "2", "render", "--segments", str(root / "segments"), "--time", "0"]
        argv += ["--camera", "front", "--background", background, "--out", str(paths[name]), *extra]
        assert main(argv) == 0

    scene = load_scene_index(root / "segments")
    camera = scene.rig.camera("front")
    pose = scene.pose_at(0.0)
    centered_to_shifted = (offset_pose(pose, dy=1.0) @ camera.extrinsic).inverse() @ (
        pose @ camera.extrinsic
    )
    result = warp(
        load_image(paths["shifted"]),
        generate_frame(spec, 0.0, "front").depth,
        camera.intrinsics,
        centered_to_shifted,
    )
    valid = result.mask.astype(bool)
    error = np.abs(result.warped_image - load_image(paths["centered"])).max(axis=-1)
    assert valid.mean() > 0.5
    assert np.mean(error[valid] < 2.0 / 255.0) >= 0.95


def test_build_then_fuse_from_archives_matches_direct_fusion(tmp_path):
    spec = default_spec(width=48, height=27)
    manifest_path = materialize(spec, tmp_path / "scene")
    pipeline = ScenePipeline()

    built = pipeline.build(manifest_path, tmp_path / "frames")
    assert [path.name for path in built.archives] == ["frame_000.s4dg", "frame_001.s4dg"]
    assert built.kernel_counts == [48 * 27, 48 * 27]
    first = load_segment(built.archives[0])
    assert first.gaussians.dynamic.any()
    assert (first.t_start, first.t_end) == (0.0, 0.5)

    direct = pipeline.fuse(manifest_path, tmp_path / "direct")
    cached = pipeline.fuse(manifest_path, tmp_path / "cached", frames_dir=tmp_path / "frames")
    assert cached.kernel_counts == direct.kernel_counts
    a = load_scene_index(tmp_path / "direct").segments[0].gaussians
    b = load_scene_index(tmp_path / "cached").segments[0].gaussians
    np.testing.assert_allclose(b.centers, a.centers, atol=1e-9)
    np.testing.assert_allclose(b.velocities, a.velocities, atol=1e-9)


def test_fuse_reports_missing_frame_archives(tmp_path):
    manifest_path = materialize(default_spec(width=32, height=18), tmp_path / "scene")
    with pytest.raises(ManifestError, match="frame_000.s4dg"):
        ScenePipeline().fuse(manifest_path, tmp_path / "segments", frames_dir=tmp_path / "nothing")


def test_render_writes_image_and_depth(tmp_path):
    manifest_path = materialize(default_spec(width=32, height=18), tmp_path / "scene")
    pipeline = ScenePipeline()
    pipeline.fuse(manifest_path, tmp_path / "segments")
    output = pipeline.render(
        tmp_path / "segments",
        time=0.25,
        camera_id="front",
        out=tmp_path / "render.ppm",
        ego_offset=(0.0, 1.0, 0.0),
        depth_out=tmp_path / "render.s4df",
    )
    assert (tmp_path / "render.ppm").exists()
    depth = load_raster(tmp_path / "render.s4df")
    assert depth.shape == (18, 32)
    np.testing.assert_allclose(depth, output.depth.astype(np.float32))
    with pytest.raises(SegmentTimeError):
        pipeline.render(tmp_path / "segments", time=0.75, camera_id="front", out=tmp_path / "late.ppm")


def test_warp_eval_scores_neighbouring_frames(tmp_path):
    spec = default_spec(width=32, height=18, dynamic=False)
    manifest_path = materialize(spec, tmp_path / "scene")
    summary = ScenePipeline().warp_eval(
        manifest_path,
        target_time=spec.frame_times[1],
        source_time=spec.frame_times[0],
        camera_id="front",
        out_dir=tmp_path / "warp",
    )
    assert 0.5 < summary.valid_fraction <= 1.0
    assert summary.terms.l1 < 0.1
    assert (tmp_path / "warp" / "warped.ppm").exists()
    assert (tmp_path / "warp" / "mask.s4di").exists()
    lines = (tmp_path / "warp" / "losses.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "term,value"
    assert [line.split(",")[0] for line in lines[1:]] == ["l1", "ssim", "combined"]


def test_metrics_table_has_a_mean_row(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("a.ppm", "b.ppm"):
        image = rng.uniform(size=(16, 16, 3))
        save_image(tmp_path / "gt" / name, image)
        save_image(tmp_path / "pred" / name, image)
    rows = ScenePipeline().metrics(tmp_path / "pred", tmp_path / "gt", out=tmp_path / "metrics.csv")
    assert [row[0] for row in rows] == ["a.ppm", "b.ppm", "mean"]
    assert rows[-1][1:] == [99.0, 1.0]
    assert (tmp_path / "metrics.csv").read_text(encoding="utf-8").startswith("image,psnr,ssim\n")

    (tmp_path / "pred" / "b.ppm").unlink()
    with pytest.raises(ManifestError, match="b.ppm"):
        ScenePipeline().metrics(tmp_path / "pred", tmp_path / "gt")


def test_evaluate_splits_reconstruction_and_novel_frames(tmp_path):
    manifest_path = materialize(default_spec(width=32, height=18), tmp_path / "scene")
    pipeline = ScenePipeline()
    pipeline.fuse(manifest_path, tmp_path / "segments")
    table = pipeline.evaluate(manifest_path, tmp_path / "segments")
    splits = [row[2] for row in table]
    assert splits.count("reconstruction") == 3
    assert splits.count("novel") == 6
    assert table[2][:3] == ["mean", "", "reconstruction"]
    assert table[-1][:3] == ["mean", "", "novel"]
