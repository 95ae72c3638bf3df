from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .build import build_context_frame, clamp_depth
from .exceptions import ManifestError, SegmentTimeError
from .formats import (
    load_image,
    load_manifest,
    load_raster,
    load_scene,
    load_scene_index,
    load_segment,
    save_image,
    save_raster,
    save_scene_index,
    save_segment,
)
from .fuse import aggregate_scene, flow_segment, frame_spans
from .gauss import GaussianSet, SceneSegment
from .geom import interpolate_pose, offset_pose
from .models import FrameRecord, SceneInputs, ViewRecord
from .photo import LossWeights, ProjectLossTerms, project_loss_terms, psnr, ssim, warp
from .render import RenderOutput, RenderRequest, render
from .synth import SynthSpec, default_spec, load_spec, materialize
from .utils import write_csv

logger = logging.getLogger(__name__)

FRAME_ARCHIVE = "frame_{index:03d}.s4dg"
TIME_MATCH_TOLERANCE = 1e-9

METRIC_HEADER = ("image", "psnr", "ssim")
EVALUATION_HEADER = ("frame", "camera", "split", "psnr", "ssim")
LOSS_HEADER = ("term", "value")


@dataclass(slots=True)
class BuildSummary:
    out_dir: Path
    archives: list[Path]
    kernel_counts: list[int]

    def to_dict(self) -> dict[str, object]:
        return {
            "out_dir": str(self.out_dir),
            "archives": [path.name for path in self.archives],
            "kernel_counts": list(self.kernel_counts),
        }


@dataclass(slots=True)
class FuseSummary:
    index_path: Path
    build_count: int
    cache_hits: int
    segment_count: int
    kernel_counts: list[int] = field(default_factory=list)
    velocity_sources: list[dict[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, object]:
        return {
            "index_path": str(self.index_path),
            "build_count": self.build_count,
            "cache_hits": self.cache_hits,
            "segment_count": self.segment_count,
            "kernel_counts": list(self.kernel_counts),
            "velocity_sources": [
                {str(k): v for k, v in sources.items()} for sources in self.velocity_sources
            ],
        }


@dataclass(slots=True)
class WarpSummary:
    out_dir: Path
    terms: ProjectLossTerms
    valid_fraction: float

    def to_dict(self) -> dict[str, object]:
        return {
            "out_dir": str(self.out_dir),
            "valid_fraction": self.valid_fraction,
            **self.terms.to_dict(),
        }


def _mean_row(label: Sequence[str], rows: Sequence[Sequence[object]]) -> list[object]:
    scores = np.array([[float(row[-2]), float(row[-1])] for row in rows])
    return [*label, float(scores[:, 0].mean()), float(scores[:, 1].mean())]


class ScenePipeline:
    """End-to-end orchestration behind the command-line front end."""

    def __init__(self, threads: int = 1, seed: int = 0) -> None:
        self.threads = threads
        self.seed = seed

    def synth(self, out_dir: Path, spec_path: Path | None = None) -> Path:
        spec: SynthSpec = load_spec(spec_path) if spec_path is not None else default_spec()
        spec = replace(spec, seed=self.seed)
        manifest_path = materialize(spec, Path(out_dir))
        logger.info("Wrote synthetic scene '%s' to %s.", spec.name, manifest_path)
        return manifest_path

    def load(self, manifest_path: Path) -> SceneInputs:
        return load_scene(Path(manifest_path), max_workers=self.threads)

    def build(self, manifest_path: Path, out_dir: Path) -> BuildSummary:
        """Write one flow-applied archive per context frame.

        Frame k takes its velocities from the segment it starts; the last
        frame takes them from the segment it ends.
        """
        inputs = self.load(manifest_path)
        frames = inputs.context_frames
        spans = frame_spans([frame.timestamp for frame in frames])
        egos = [interpolate_pose(frame.timestamp, inputs.pose_times, inputs.poses) for frame in frames]
        built = [
            build_context_frame(frame, inputs.rig, *span) for frame, span in zip(frames, spans)
        ]

        flowed: list[GaussianSet] = []
        sources: list[dict[int, str]] = []
        for index in range(len(frames) - 1):
            g_Ts, g_Ts1, estimates = flow_segment(
                frames[index],
                frames[index + 1],
                built[index],
                built[index + 1],
                egos[index],
                egos[index + 1],
                inputs.rig,
            )
            flowed.append(g_Ts)
            sources.append({k: v.source for k, v in estimates.items()})
            if index == len(frames) - 2:
                flowed.append(g_Ts1)
                sources.append(dict(sources[-1]))

        out_dir = Path(out_dir)
        archives = []
        for index, (gaussians, span) in enumerate(zip(flowed, spans)):
            path = out_dir / FRAME_ARCHIVE.format(index=index)
            save_segment(
                path,
                SceneSegment(
                    t_start=span[0],
                    t_end=span[1],
                    anchor_pose=egos[index],
                    gaussians=gaussians,
                    velocity_sources=sources[index],
                ),
            )
            archives.append(path)
        logger.info("Built %d context frames into %s.", len(archives), out_dir)
        return BuildSummary(out_dir=out_dir, archives=archives, kernel_counts=[len(g) for g in flowed])

    def fuse(self, manifest_path: Path, out_dir: Path, frames_dir: Path | None = None) -> FuseSummary:
        inputs = self.load(manifest_path)
        result = aggregate_scene(
            inputs.context_frames,
            inputs.rig,
            inputs.pose_times,
            inputs.poses,
            builder=_archive_loader(Path(frames_dir)) if frames_dir is not None else None,
            max_workers=self.threads,
        )
        index_path = save_scene_index(Path(out_dir), result.scene, build_count=result.build_count)
        return FuseSummary(
            index_path=index_path,
            build_count=result.build_count,
            cache_hits=result.cache_hits,
            segment_count=len(result.scene.segments),
            kernel_counts=[len(segment) for segment in result.scene.segments],
            velocity_sources=[dict(segment.velocity_sources) for segment in result.scene.segments],
        )

    def render(
        self,
        segments_dir: Path,
        time: float,
        camera_id: str,
        out: Path,
        ego_offset: tuple[float, float, float] = (0.0, 0.0, 0.0),
        background: tuple[float, float, float] = (0.0, 0.0, 0.0),
        dynamic_only: bool = False,
        depth_out: Path | None = None,
    ) -> RenderOutput:
        scene = load_scene_index(Path(segments_dir))
        dx, dy, dz = ego_offset
        request = RenderRequest(
            time=time,
            camera=scene.rig.camera(camera_id),
            ego_pose=offset_pose(scene.pose_at(time), dx, dy, dz),
            background=background,
            dynamic_only=dynamic_only,
        )
        output = render(scene, request, max_workers=self.threads)
        save_image(Path(out), output.rgb)
        if depth_out is not None:
            save_raster(Path(depth_out), output.depth)
        return output

    def warp_eval(
        self,
        manifest_path: Path,
        target_time: float,
        source_time: float,
        camera_id: str,
        out_dir: Path,
        weights: LossWeights | None = None,
    ) -> WarpSummary:
        """Warp the source frame into the target frame with the target depth and score it."""
        inputs = self.load(manifest_path)
        camera = inputs.rig.camera(camera_id)
        target = _frame_at(inputs.manifest.frames, target_time)
        source = _frame_at(inputs.manifest.frames, source_time)
        target_view = _view(target, camera_id)
        source_view = _view(source, camera_id)

        root = inputs.root
        target_image = load_image(root / target_view.image)
        target_depth = clamp_depth(load_raster(root / target_view.depth))
        source_image = load_image(root / source_view.image)

        ego_t = interpolate_pose(target.timestamp, inputs.pose_times, inputs.poses)
        ego_s = interpolate_pose(source.timestamp, inputs.pose_times, inputs.poses)
        T_t_to_s = (ego_s @ camera.extrinsic).inverse() @ (ego_t @ camera.extrinsic)
        result = warp(source_image, target_depth, camera.intrinsics, T_t_to_s)
        terms = project_loss_terms(result.warped_image, target_image, result.mask, weights or LossWeights())

        out_dir = Path(out_dir)
        save_image(out_dir / "warped.ppm", result.warped_image)
        save_raster(out_dir / "mask.s4di", result.mask.astype(np.int32))
        write_csv(
            out_dir / "losses.csv",
            LOSS_HEADER,
            [("l1", terms.l1), ("ssim", terms.ssim), ("combined", terms.combined)],
        )
        return WarpSummary(out_dir=out_dir, terms=terms, valid_fraction=float(result.mask.mean()))

    def metrics(self, pred_dir: Path, gt_dir: Path, out: Path | None = None) -> list[list[object]]:
        """PSNR/SSIM per ground-truth image with a final mean row."""
        pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
        names = sorted(path.name for path in gt_dir.glob("*.ppm"))
        if not names:
            raise ManifestError(f"No .ppm images found in {gt_dir}.")
        rows: list[list[object]] = []
        for name in names:
            predicted = pred_dir / name
            if not predicted.exists():
                raise ManifestError(f"Prediction missing for {name}: {predicted}")
            gt = load_image(gt_dir / name)
            pred = load_image(predicted)
            rows.append([name, psnr(pred, gt), ssim(pred, gt)])
        rows.append(_mean_row(("mean",), rows))
        if out is not None:
            write_csv(Path(out), METRIC_HEADER, rows)
        return rows

    def evaluate(self, manifest_path: Path, segments_dir: Path, out: Path | None = None) -> list[list[object]]:
        """Render every manifest frame inside the scene timeline and score it.

        Context frames form the reconstruction split and held-out frames the
        novel-view split; each split gets a mean row.
        """
        manifest_path = Path(manifest_path)
        manifest = load_manifest(manifest_path)
        root = manifest_path.parent
        scene = load_scene_index(Path(segments_dir))
        start, end = scene.timeline

        rows: dict[str, list[list[object]]] = {"reconstruction": [], "novel": []}
        for index, record in enumerate(manifest.frames):
            if not start <= record.timestamp <= end:
                logger.info("Skipping frame %d at t=%s outside the scene timeline.", index, record.timestamp)
                continue
            split = "reconstruction" if record.context else "novel"
            for view in record.views:
                request = RenderRequest(
                    time=record.timestamp,
                    camera=scene.rig.camera(view.camera_id),
                    ego_pose=scene.pose_at(record.timestamp),
                )
                predicted = render(scene, request, max_workers=self.threads).rgb
                gt = load_image(root / view.image)
                rows[split].append([index, view.camera_id, split, psnr(predicted, gt), ssim(predicted, gt)])

        table: list[list[object]] = []
        for split, split_rows in rows.items():
            table.extend(split_rows)
            if split_rows:
                table.append(_mean_row(("mean", "", split), split_rows))
        if out is not None:
            write_csv(Path(out), EVALUATION_HEADER, table)
        return table


def _frame_at(frames: Sequence[FrameRecord], t: float) -> FrameRecord:
    for record in frames:
        if abs(record.timestamp - t) <= TIME_MATCH_TOLERANCE:
            return record
    stamps = [record.timestamp for record in frames]
    raise SegmentTimeError(f"No manifest frame at t={t}; available timestamps: {stamps}.")


def _view(record: FrameRecord, camera_id: str) -> ViewRecord:
    for view in record.views:
        if view.camera_id == camera_id:
            return view
    raise ManifestError(f"Frame at t={record.timestamp} has no view for camera '{camera_id}'.")


def _archive_loader(frames_dir: Path) -> Callable[[int], GaussianSet]:
    """Builder that reads the per-frame archives written by ScenePipeline.build."""

    def _load(index: int) -> GaussianSet:
        path = frames_dir / FRAME_ARCHIVE.format(index=index)
        if not path.exists():
            raise ManifestError(f"Frame archive not found: {path}")
        return load_segment(path).gaussians

    return _load
