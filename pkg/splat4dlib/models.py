from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .build import ContextFrame
from .geom import SE3, CameraRig, Intrinsics

SCHEMA_VERSION = 1


def _floats(values: Any) -> list[float]:
    return [float(v) for v in values]


@dataclass(slots=True)
class CameraRecord:
    camera_id: str
    intrinsics: dict[str, float]
    rotation: list[float]
    translation: list[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "camera_id": self.camera_id,
            "intrinsics": dict(self.intrinsics),
            "extrinsic": {
                "rotation": list(self.rotation),
                "translation": list(self.translation),
            },
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CameraRecord:
        extrinsic = data["extrinsic"]
        return cls(
            camera_id=str(data["camera_id"]),
            intrinsics={key: float(value) for key, value in data["intrinsics"].items()},
            rotation=_floats(extrinsic["rotation"]),
            translation=_floats(extrinsic["translation"]),
        )

    @classmethod
    def from_entry(cls, camera_id: str, intrinsics: Intrinsics, extrinsic: SE3) -> CameraRecord:
        pose = extrinsic.to_dict()
        return cls(
            camera_id=camera_id,
            intrinsics=intrinsics.to_dict(),
            rotation=pose["rotation"],
            translation=pose["translation"],
        )


@dataclass(slots=True)
class PoseRecord:
    t: float
    rotation: list[float]
    translation: list[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "rotation": list(self.rotation),
            "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PoseRecord:
        return cls(
            t=float(data["t"]),
            rotation=_floats(data["rotation"]),
            translation=_floats(data["translation"]),
        )

    @classmethod
    def from_pose(cls, t: float, pose: SE3) -> PoseRecord:
        payload = pose.to_dict()
        return cls(t=t, rotation=payload["rotation"], translation=payload["translation"])


@dataclass(slots=True)
class ViewRecord:
    """Relative raster paths of one camera at one timestamp.

    attributes maps rotation/scale/opacity/sh to raw attribute rasters and
    is only present for context frames.
    """

    camera_id: str
    image: str
    depth: str
    mask: str | None = None
    attributes: dict[str, str] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "camera_id": self.camera_id,
            "image": self.image,
            "depth": self.depth,
            "mask": self.mask,
            "attributes": dict(self.attributes) if self.attributes else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ViewRecord:
        return cls(
            camera_id=str(data["camera_id"]),
            image=str(data["image"]),
            depth=str(data["depth"]),
            mask=str(data["mask"]) if data.get("mask") else None,
            attributes={str(k): str(v) for k, v in data["attributes"].items()}
            if data.get("attributes")
            else None,
        )


@dataclass(slots=True)
class FrameRecord:
    timestamp: float
    context: bool
    views: list[ViewRecord]
    tracks: dict[int, list[float]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "context": self.context,
            "views": [view.to_dict() for view in self.views],
            "tracks": {str(k): list(v) for k, v in self.tracks.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> FrameRecord:
        return cls(
            timestamp=float(data["timestamp"]),
            context=bool(data.get("context", False)),
            views=[ViewRecord.from_dict(view) for view in data["views"]],
            tracks={int(k): _floats(v) for k, v in data.get("tracks", {}).items()},
        )


@dataclass(slots=True)
class SceneManifest:
    cameras: list[CameraRecord]
    poses: list[PoseRecord]
    frames: list[FrameRecord]
    sh_degree: int = 0
    name: str = "scene"
    schema_version: int = SCHEMA_VERSION

    @property
    def timeline(self) -> tuple[float, float]:
        stamps = [frame.timestamp for frame in self.frames]
        return (min(stamps), max(stamps)) if stamps else (0.0, 0.0)

    @property
    def context_timestamps(self) -> list[float]:
        return [frame.timestamp for frame in self.frames if frame.context]

    def to_dict(self) -> dict[str, Any]:
        start, end = self.timeline
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "timeline": [start, end],
            "context_timestamps": self.context_timestamps,
            "sh_degree": self.sh_degree,
            "cameras": [camera.to_dict() for camera in self.cameras],
            "poses": [pose.to_dict() for pose in self.poses],
            "frames": [frame.to_dict() for frame in self.frames],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SceneManifest:
        return cls(
            schema_version=int(data.get("schema_version", SCHEMA_VERSION)),
            name=str(data.get("name", "scene")),
            sh_degree=int(data.get("sh_degree", 0)),
            cameras=[CameraRecord.from_dict(camera) for camera in data["cameras"]],
            poses=[PoseRecord.from_dict(pose) for pose in data["poses"]],
            frames=[FrameRecord.from_dict(frame) for frame in data["frames"]],
        )


@dataclass(slots=True)
class SegmentRecord:
    t_start: float
    t_end: float
    archive: str
    kernel_count: int
    velocity_sources: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "t_start": self.t_start,
            "t_end": self.t_end,
            "archive": self.archive,
            "kernel_count": self.kernel_count,
            "velocity_sources": {str(k): v for k, v in self.velocity_sources.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SegmentRecord:
        return cls(
            t_start=float(data["t_start"]),
            t_end=float(data["t_end"]),
            archive=str(data["archive"]),
            kernel_count=int(data.get("kernel_count", 0)),
            velocity_sources={int(k): str(v) for k, v in data.get("velocity_sources", {}).items()},
        )


@dataclass(slots=True)
class SegmentIndex:
    cameras: list[CameraRecord]
    poses: list[PoseRecord]
    segments: list[SegmentRecord]
    build_count: int = 0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "build_count": self.build_count,
            "cameras": [camera.to_dict() for camera in self.cameras],
            "poses": [pose.to_dict() for pose in self.poses],
            "segments": [segment.to_dict() for segment in self.segments],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SegmentIndex:
        return cls(
            schema_version=int(data.get("schema_version", SCHEMA_VERSION)),
            build_count=int(data.get("build_count", 0)),
            cameras=[CameraRecord.from_dict(camera) for camera in data["cameras"]],
            poses=[PoseRecord.from_dict(pose) for pose in data["poses"]],
            segments=[SegmentRecord.from_dict(segment) for segment in data["segments"]],
        )


@dataclass(slots=True)
class SceneInputs:
    """Validated in-memory form of a scene manifest."""

    root: Path
    manifest: SceneManifest
    rig: CameraRig
    pose_times: tuple[float, ...]
    poses: tuple[SE3, ...]
    context_frames: tuple[ContextFrame, ...]
    held_out: tuple[FrameRecord, ...] = ()

    @property
    def frames(self) -> list[FrameRecord]:
        return list(self.manifest.frames)
