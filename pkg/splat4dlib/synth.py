"""Procedural driving-like scenes with analytic images, depth and masks."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.spatial.transform import Rotation

from .build import DEPTH_MAX, AttributeMaps, clamp_depth, deactivate_attributes
from .exceptions import GeometryError, ManifestError, SegmentTimeError
from .formats import save_image, save_manifest, save_raster
from .gauss import SH_C0, sh_coefficient_count
from .geom import SE3, CameraEntry, CameraRig, Intrinsics, interpolate_pose, matrix_to_quaternion
from .models import CameraRecord, FrameRecord, PoseRecord, SceneManifest, ViewRecord
from .utils import SCENE_FILENAME, load_json

logger = logging.getLogger(__name__)

# Camera (x right, y down, z forward) to ego (x forward, y left, z up).
FRONT_CAMERA_ROTATION = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def _triple(values: Any) -> tuple[float, float, float]:
    x, y, z = (float(v) for v in values)
    return x, y, z


@dataclass(frozen=True, slots=True)
class BoxSpec:
    """Axis-aligned world box; velocity is zero for static boxes."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    albedo: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def center_at(self, t: float, t0: float = 0.0) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.velocity) * (t - t0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "center": list(self.center),
            "size": list(self.size),
            "albedo": list(self.albedo),
            "velocity": list(self.velocity),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BoxSpec:
        return cls(
            center=_triple(data["center"]),
            size=_triple(data["size"]),
            albedo=_triple(data["albedo"]),
            velocity=_triple(data.get("velocity", (0.0, 0.0, 0.0))),
        )


@dataclass(frozen=True, slots=True)
class SynthCamera:
    camera_id: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: tuple[float, float, float, float]
    translation: tuple[float, float, float]

    def entry(self) -> CameraEntry:
        return CameraEntry(
            camera_id=self.camera_id,
            intrinsics=Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height),
            extrinsic=SE3.from_quaternion(self.rotation, self.translation),
        )

    def to_dict(self) -> dict[str, Any]:
        return CameraRecord.from_entry(self.camera_id, self.entry().intrinsics, self.entry().extrinsic).to_dict()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SynthCamera:
        record = CameraRecord.from_dict(data)
        intrinsics = record.intrinsics
        qw, qx, qy, qz = record.rotation
        return cls(
            camera_id=record.camera_id,
            fx=intrinsics["fx"],
            fy=intrinsics["fy"],
            cx=intrinsics["cx"],
            cy=intrinsics["cy"],
            width=int(intrinsics["width"]),
            height=int(intrinsics["height"]),
            rotation=(qw, qx, qy, qz),
            translation=_triple(record.translation),
        )


@dataclass(frozen=True, slots=True)
class SynthSpec:
    cameras: tuple[SynthCamera, ...]
    trajectory: tuple[PoseRecord, ...]
    static_boxes: tuple[BoxSpec, ...] = ()
    dynamic_boxes: tuple[BoxSpec, ...] = ()
    seed: int = 0
    ground_extent: float = 5000.0
    ground_albedo: tuple[float, float, float] = (0.35, 0.35, 0.38)
    background: tuple[float, float, float] = (0.55, 0.7, 0.9)
    frame_rate: float = 12.0
    frame_count: int = 7
    context_stride: int = 6
    footprint: float = 0.2
    opacity: float = 0.99
    sh_degree: int = 0
    emit_tracks: bool = True
    name: str = "synthetic"

    def __post_init__(self) -> None:
        if not self.cameras:
            raise ManifestError("A synthetic scene needs at least one camera.")
        if len(self.trajectory) < 1:
            raise ManifestError("A synthetic scene needs at least one trajectory key.")
        if self.frame_count < 2 or self.context_stride < 1:
            raise ManifestError("Need at least two frames and a positive context stride.")
        if not 0.0 < self.opacity < 1.0:
            raise ManifestError(f"Surface opacity must lie in (0, 1), got {self.opacity}.")

    @property
    def t0(self) -> float:
        return self.trajectory[0].t

    @property
    def frame_times(self) -> list[float]:
        return [self.t0 + k / self.frame_rate for k in range(self.frame_count)]

    @property
    def context_indices(self) -> list[int]:
        return list(range(0, self.frame_count, self.context_stride))

    def rig(self) -> CameraRig:
        return CameraRig(tuple(camera.entry() for camera in self.cameras))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "ground_extent": self.ground_extent,
            "ground_albedo": list(self.ground_albedo),
            "background": list(self.background),
            "frame_rate": self.frame_rate,
            "frame_count": self.frame_count,
            "context_stride": self.context_stride,
            "footprint": self.footprint,
            "opacity": self.opacity,
            "sh_degree": self.sh_degree,
            "emit_tracks": self.emit_tracks,
            "cameras": [camera.to_dict() for camera in self.cameras],
            "trajectory": [key.to_dict() for key in self.trajectory],
            "static_boxes": [box.to_dict() for box in self.static_boxes],
            "dynamic_boxes": [box.to_dict() for box in self.dynamic_boxes],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SynthSpec:
        try:
            return cls(
                name=str(data.get("name", "synthetic")),
                seed=int(data.get("seed", 0)),
                ground_extent=float(data.get("ground_extent", 5000.0)),
                ground_albedo=_triple(data.get("ground_albedo", (0.35, 0.35, 0.38))),
                background=_triple(data.get("background", (0.55, 0.7, 0.9))),
                frame_rate=float(data.get("frame_rate", 12.0)),
                frame_count=int(data.get("frame_count", 7)),
                context_stride=int(data.get("context_stride", 6)),
                footprint=float(data.get("footprint", 0.2)),
                opacity=float(data.get("opacity", 0.99)),
                sh_degree=int(data.get("sh_degree", 0)),
                emit_tracks=bool(data.get("emit_tracks", True)),
                cameras=tuple(SynthCamera.from_dict(camera) for camera in data["cameras"]),
                trajectory=tuple(PoseRecord.from_dict(key) for key in data["trajectory"]),
                static_boxes=tuple(BoxSpec.from_dict(box) for box in data.get("static_boxes", [])),
                dynamic_boxes=tuple(BoxSpec.from_dict(box) for box in data.get("dynamic_boxes", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"Malformed synthetic scene spec ({exc!r}).") from exc


def load_spec(path: Path) -> SynthSpec:
    if not path.exists():
        raise ManifestError(f"Synthetic scene spec not found: {path}")
    return SynthSpec.from_dict(load_json(path))


def front_camera(width: int, height: int, camera_id: str = "front") -> SynthCamera:
    """Forward-looking camera 1.5 m above the ego origin."""
    focal = 0.75 * width
    qw, qx, qy, qz = (float(v) for v in matrix_to_quaternion(FRONT_CAMERA_ROTATION))
    return SynthCamera(
        camera_id=camera_id,
        fx=focal,
        fy=focal,
        cx=float(width // 2),
        cy=float(height // 2),
        width=width,
        height=height,
        rotation=(qw, qx, qy, qz),
        translation=(0.0, 0.0, 1.5),
    )


def straight_trajectory(duration: float, speed: float, yaw_rate: float = 0.0) -> tuple[PoseRecord, ...]:
    """Keyframes at the start and end of a constant-speed drive along ego +x."""
    end_yaw = Rotation.from_euler("z", yaw_rate * duration, degrees=True).as_matrix()
    end = SE3(end_yaw, (speed * duration, 0.0, 0.0))
    return (
        PoseRecord.from_pose(0.0, SE3.identity()),
        PoseRecord.from_pose(duration, end),
    )


def default_spec(
    width: int = 518,
    height: int = 280,
    frame_count: int = 7,
    context_stride: int = 6,
    seed: int = 0,
    ego_speed: float = 5.0,
    dynamic: bool = True,
) -> SynthSpec:
    """12 Hz drive past one parked box while one box drives ahead at 4 m/s."""
    frame_rate = 12.0
    duration = (frame_count - 1) / frame_rate
    return SynthSpec(
        cameras=(front_camera(width, height),),
        trajectory=straight_trajectory(duration, ego_speed),
        static_boxes=(BoxSpec(center=(18.0, 5.0, 1.0), size=(4.0, 3.0, 2.0), albedo=(0.8, 0.3, 0.2)),),
        dynamic_boxes=(
            BoxSpec(
                center=(12.0, -2.5, 0.8),
                size=(4.0, 1.8, 1.6),
                albedo=(0.2, 0.4, 0.85),
                velocity=(4.0, 0.0, 0.0),
            ),
        )
        if dynamic
        else (),
        seed=seed,
        frame_rate=frame_rate,
        frame_count=frame_count,
        context_stride=context_stride,
    )


def ego_pose_at(spec: SynthSpec, t: float) -> SE3:
    times = [key.t for key in spec.trajectory]
    poses = [SE3.from_quaternion(key.rotation, key.translation) for key in spec.trajectory]
    if len(times) == 1:
        if t != times[0]:
            raise SegmentTimeError(f"Time {t} is outside the single-key trajectory at {times[0]}.")
        return poses[0]
    return interpolate_pose(t, times, poses)


@dataclass(frozen=True, slots=True, eq=False)
class SynthFrame:
    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    tracks: dict[int, np.ndarray] = field(default_factory=dict)


def _intersect_boxes(
    origin: np.ndarray,
    directions: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
) -> np.ndarray:
    """Slab test; returns the entry ray parameter or inf on a miss."""
    moving = directions != 0.0
    safe = np.where(moving, directions, 1.0)
    t1 = (lower - origin) / safe
    t2 = (upper - origin) / safe
    inside = (origin >= lower) & (origin <= upper)
    near = np.where(moving, np.minimum(t1, t2), np.where(inside, -np.inf, np.inf))
    far = np.where(moving, np.maximum(t1, t2), np.where(inside, np.inf, -np.inf))
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def generate_frame(spec: SynthSpec, t: float, camera_id: str) -> SynthFrame:
    """Ray-cast the scene for one camera; the ray parameter equals pixel depth.

    The ground plane runs out to ``ground_extent`` meters, far enough by default
    to meet the horizon, so every descending ray lands on ground. Rays that hit
    nothing get the background color and depth ``DEPTH_MAX``.
    """
    camera = spec.rig().camera(camera_id)
    K = camera.intrinsics
    camera_to_world = ego_pose_at(spec, t) @ camera.extrinsic

    u, v = K.pixel_grid()
    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    directions = camera_to_world.rotate(rays)
    origin = camera_to_world.translation

    count = u.size
    nearest = np.full(count, np.inf)
    color = np.tile(np.asarray(spec.background, dtype=np.float64), (count, 1))
    ids = np.zeros(count, dtype=np.int32)

    if spec.ground_extent > 0.0:
        descending = np.flatnonzero(directions[:, 2] < 0.0)
        t_ground = -origin[2] / directions[descending, 2]
        hit = origin[:2] + t_ground[:, None] * directions[descending, :2]
        landed = (t_ground > 0.0) & np.all(np.abs(hit) <= spec.ground_extent, axis=1)
        on_ground = descending[landed]
        nearest[on_ground] = t_ground[landed]
        color[on_ground] = spec.ground_albedo

    boxes = [(box, 0) for box in spec.static_boxes]
    boxes += [(box, index + 1) for index, box in enumerate(spec.dynamic_boxes)]
    for box, instance in boxes:
        center = box.center_at(t, spec.t0)
        half = np.asarray(box.size) / 2.0
        t_box = _intersect_boxes(origin, directions, center - half, center + half)
        closer = t_box < nearest
        nearest = np.where(closer, t_box, nearest)
        color[closer] = box.albedo
        ids[closer] = instance

    # surfaces past the depth clamp stay visible and read back at DEPTH_MAX
    depth = np.minimum(nearest, DEPTH_MAX)

    tracks = {
        index + 1: box.center_at(t, spec.t0) for index, box in enumerate(spec.dynamic_boxes)
    }
    return SynthFrame(
        image=color.reshape(K.height, K.width, 3),
        depth=depth.reshape(K.height, K.width),
        mask=ids.reshape(K.height, K.width),
        tracks=tracks,
    )


def generate_attribute_maps(
    spec: SynthSpec,
    frame: SynthFrame,
    camera_id: str,
    stream: int = 0,
) -> AttributeMaps:
    """Raw maps whose activations give isotropic, near-opaque kernels coloured by the image."""
    K = spec.rig().camera(camera_id).intrinsics
    height, width = frame.depth.shape
    depth = clamp_depth(frame.depth)

    scale = np.repeat((spec.footprint * depth / K.fx)[..., None], 3, axis=-1)
    opacity = np.full((height, width), spec.opacity)

    rng = np.random.default_rng([spec.seed, stream])
    quaternions = rng.normal(size=(height, width, 4))
    quaternions /= np.linalg.norm(quaternions, axis=-1, keepdims=True)
    quaternions = np.where(quaternions[..., :1] < 0.0, -quaternions, quaternions)

    sh = np.zeros((height, width, sh_coefficient_count(spec.sh_degree), 3))
    sh[..., 0, :] = (frame.image - 0.5) / SH_C0
    return deactivate_attributes(quaternions, scale, opacity, sh)


def materialize(spec: SynthSpec, out_dir: Path) -> Path:
    """Write every frame's rasters and a scene manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    rig = spec.rig()
    context = set(spec.context_indices)
    frames: list[FrameRecord] = []
    poses: list[PoseRecord] = []
    for index, t in enumerate(spec.frame_times):
        try:
            poses.append(PoseRecord.from_pose(t, ego_pose_at(spec, t)))
        except (SegmentTimeError, GeometryError) as exc:
            raise ManifestError(f"Frame {index} at t={t} is outside the trajectory: {exc}") from exc
        views = []
        tracks: dict[int, list[float]] = {}
        for camera_index, camera in enumerate(rig):
            stem = f"{camera.camera_id}_{index:03d}"
            frame = generate_frame(spec, t, camera.camera_id)
            save_image(out_dir / "images" / f"{stem}.ppm", frame.image)
            save_raster(out_dir / "depth" / f"{stem}.s4df", frame.depth)
            save_raster(out_dir / "masks" / f"{stem}.s4di", frame.mask)
            attributes = None
            if index in context:
                maps = generate_attribute_maps(
                    spec, frame, camera.camera_id, stream=index * len(rig) + camera_index
                )
                attributes = {}
                for key, raster in (
                    ("rotation", maps.raw_rotation),
                    ("scale", maps.raw_scale),
                    ("opacity", maps.raw_opacity),
                    ("sh", maps.raw_sh),
                ):
                    relative = f"attributes/{stem}_{key}.s4df"
                    save_raster(out_dir / relative, raster)
                    attributes[key] = relative
            views.append(
                ViewRecord(
                    camera_id=camera.camera_id,
                    image=f"images/{stem}.ppm",
                    depth=f"depth/{stem}.s4df",
                    mask=f"masks/{stem}.s4di",
                    attributes=attributes,
                )
            )
            if spec.emit_tracks:
                tracks = {k: [float(x) for x in position] for k, position in frame.tracks.items()}
        frames.append(FrameRecord(timestamp=t, context=index in context, views=views, tracks=tracks))
        logger.debug("Materialized frame %d at t=%.4f.", index, t)

    manifest = SceneManifest(
        name=spec.name,
        sh_degree=spec.sh_degree,
        cameras=[CameraRecord.from_entry(c.camera_id, c.intrinsics, c.extrinsic) for c in rig],
        poses=poses,
        frames=frames,
    )
    return save_manifest(out_dir / SCENE_FILENAME, manifest)


def mask_centroid(mask: np.ndarray) -> np.ndarray:
    """(u, v) centroid of the non-zero pixels of a raster."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise GeometryError("Mask has no foreground pixels.")
    return np.array([cols.mean(), rows.mean()])


def project_box_center(spec: SynthSpec, box: BoxSpec, t: float, camera_id: str) -> np.ndarray:
    """Analytic pixel position of a box center at time t."""
    camera = spec.rig().camera(camera_id)
    world_to_camera = (ego_pose_at(spec, t) @ camera.extrinsic).inverse()
    point = world_to_camera.apply(box.center_at(t, spec.t0))
    K = camera.intrinsics
    return np.array([K.fx * point[0] / point[2] + K.cx, K.fy * point[1] / point[2] + K.cy])
