import json

import pytest

from splat4dlib.cli import _parse_offset, main
from splat4dlib.synth import default_spec


def _run(capsys, *argv):
    code = main(["--threads", "1", *argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _write_spec(tmp_path, **kwargs):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(default_spec(**kwargs).to_dict()), encoding="utf-8")
    return path


def test_synth_build_fuse_render_round(tmp_path, capsys):
    spec_path = _write_spec(tmp_path, width=64, height=36)
    scene_dir = tmp_path / "scene"

    code, out, _ = _run(capsys, "--seed", "3", "synth", "--spec", str(spec_path), "--out", str(scene_dir))
    assert code == 0
    assert json.loads(out)["seed"] == 3
    manifest = scene_dir / "scene.json"
    assert manifest.exists()

    code, out, _ = _run(capsys, "build", "--scene", str(manifest), "--out", str(tmp_path / "frames"))
    assert code == 0
    assert json.loads(out)["archives"] == ["frame_000.s4dg", "frame_001.s4dg"]

    code, out, _ = _run(
        capsys,
        "fuse",
        "--scene",
        str(manifest),
        "--frames",
        str(tmp_path / "frames"),
        "--out",
        str(tmp_path / "segments"),
    )
    assert code == 0
    summary = json.loads(out)
    assert summary["segment_count"] == 1
    assert summary["build_count"] == 2
    assert summary["velocity_sources"] == [{"1": "track"}]

    renders = []
    for name in ("first.ppm", "second.ppm"):
        code, out, _ = _run(
            capsys,
            "render",
            "--segments",
            str(tmp_path / "segments"),
            "--time",
            "0.25",
            "--camera",
            "front",
            "--ego-offset",
            "dy=1.0",
            "--background",
            "0.55,0.7,0.9",
            "--depth-out",
            str(tmp_path / "depth.s4df"),
            "--out",
            str(tmp_path / name),
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["kernels"] == 2 * 64 * 36
        assert 0.0 < payload["coverage"] <= 1.0
        renders.append((tmp_path / name).read_bytes())
    assert renders[0] == renders[1]
    assert (tmp_path / "depth.s4df").exists()


def test_metrics_prints_a_csv_table(tmp_path, capsys):
    spec_path = _write_spec(tmp_path, width=32, height=18)
    _run(capsys, "synth", "--spec", str(spec_path), "--out", str(tmp_path / "scene"))
    images = str(tmp_path / "scene" / "images")

    code, out, _ = _run(capsys, "metrics", "--pred", images, "--gt", images)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "image,psnr,ssim"
    assert len(lines) == 1 + 7 + 1
    assert lines[1] == "front_000.ppm,99.000000,1.000000"
    assert lines[-1] == "mean,99.000000,1.000000"


def test_evaluate_and_warp_eval(tmp_path, capsys):
    spec_path = _write_spec(tmp_path, width=32, height=18)
    scene_dir = tmp_path / "scene"
    _run(capsys, "synth", "--spec", str(spec_path), "--out", str(scene_dir))
    manifest = str(scene_dir / "scene.json")
    _run(capsys, "fuse", "--scene", manifest, "--out", str(tmp_path / "segments"))

    code, out, _ = _run(capsys, "evaluate", "--scene", manifest, "--segments", str(tmp_path / "segments"))
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "frame,camera,split,psnr,ssim"
    assert lines[-1].startswith("mean,,novel,")

    weights = tmp_path / "weights.json"
    weights.write_text(json.dumps({"l1": 1.0, "ssim": 0.0}), encoding="utf-8")
    code, out, _ = _run(
        capsys,
        "warp-eval",
        "--scene",
        manifest,
        "--target",
        "0.5",
        "--source",
        "0.0",
        "--camera",
        "front",
        "--weights",
        str(weights),
        "--out",
        str(tmp_path / "warp"),
    )
    assert code == 0
    result = json.loads(out)
    assert result["combined"] == pytest.approx(result["l1"])
    assert (tmp_path / "warp" / "losses.csv").exists()


def test_context_stride_partitions_a_long_drive(tmp_path, capsys):
    spec_path = _write_spec(tmp_path, width=32, height=18, frame_count=25, context_stride=6)
    _run(capsys, "synth", "--spec", str(spec_path), "--out", str(tmp_path / "scene"))
    code, out, _ = _run(
        capsys,
        "fuse",
        "--scene",
        str(tmp_path / "scene" / "scene.json"),
        "--out",
        str(tmp_path / "segments"),
    )
    assert code == 0
    summary = json.loads(out)
    assert summary["build_count"] == 5
    assert summary["segment_count"] == 4
    assert summary["cache_hits"] == 3


def test_errors_exit_with_a_single_line(tmp_path, capsys):
    code, out, err = _run(
        capsys,
        "render",
        "--segments",
        str(tmp_path / "missing"),
        "--time",
        "0",
        "--camera",
        "front",
        "--out",
        str(tmp_path / "x.ppm"),
    )
    assert code == 1
    assert out == ""
    assert err.startswith("error: ")
    assert len(err.strip().splitlines()) == 1
    assert "segments.json" in err


def test_parse_offset_rejects_unknown_keys():
    assert _parse_offset(["dx=1", "dz=-0.5"]) == (1.0, 0.0, -0.5)
    assert _parse_offset(None) == (0.0, 0.0, 0.0)
    with pytest.raises(ValueError, match="Unknown ego offset keys"):
        _parse_offset(["dw=2"])
