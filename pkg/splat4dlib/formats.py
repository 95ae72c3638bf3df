"""On-disk formats: rasters, PPM images, Gaussian archives and scene manifests.

Byte layouts are documented in FORMATS.md at the repository root.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import io
import logging
from pathlib import Path
import struct
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike
from PIL import Image, UnidentifiedImageError

from .build import AttributeMaps, CameraFrame, ContextFrame, clamp_depth
from .exceptions import FormatError, GaussianError, GeometryError, ManifestError
from .gauss import MAX_SH_DEGREE, GaussianSet, Scene4D, SceneSegment, sh_coefficient_count
from .geom import SE3, CameraEntry, CameraRig, Intrinsics
from .models import (
    SCHEMA_VERSION,
    CameraRecord,
    FrameRecord,
    PoseRecord,
    SceneInputs,
    SceneManifest,
    SegmentIndex,
    SegmentRecord,
    ViewRecord,
)
from .utils import SEGMENT_INDEX_FILENAME, atomic_write_bytes, atomic_write_json, load_json

logger = logging.getLogger(__name__)

RASTER_FLOAT_MAGIC = b"S4DF"
RASTER_INT_MAGIC = b"S4DI"
RASTER_HEADER = struct.Struct("<4sIII")

ARCHIVE_MAGIC = b"S4DG"
ARCHIVE_VERSION = 1
ARCHIVE_HEADER = struct.Struct("<4sBBHQ")
SEGMENT_HEADER = struct.Struct("<2d9d3d")

QUATERNION_REJECT = 1e-3
QUATERNION_WARN = 1e-9


# Rasters ---------------------------------------------------------------------


def encode_raster(array: ArrayLike) -> bytes:
    """Float rasters are stored as float32, integer rasters as int32."""
    values = np.asarray(array)
    if values.ndim == 2:
        values = values[..., None]
    if values.ndim != 3:
        raise FormatError(f"Rasters must be HxW or HxWxC, got shape {values.shape}.")
    if np.issubdtype(values.dtype, np.integer) or values.dtype == bool:
        magic, data = RASTER_INT_MAGIC, values.astype("<i4")
    elif np.issubdtype(values.dtype, np.floating):
        magic, data = RASTER_FLOAT_MAGIC, values.astype("<f4")
    else:
        raise FormatError(f"Unsupported raster dtype {values.dtype}.")
    height, width, channels = data.shape
    return RASTER_HEADER.pack(magic, width, height, channels) + np.ascontiguousarray(data).tobytes()


def decode_raster(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Inverse of encode_raster; single-channel rasters come back as HxW."""
    if len(data) < RASTER_HEADER.size:
        raise FormatError(
            f"{source}: truncated raster header at byte {len(data)} "
            f"(need {RASTER_HEADER.size} bytes)."
        )
    magic, width, height, channels = RASTER_HEADER.unpack_from(data, 0)
    if magic == RASTER_FLOAT_MAGIC:
        dtype = np.dtype("<f4")
    elif magic == RASTER_INT_MAGIC:
        dtype = np.dtype("<i4")
    else:
        raise FormatError(f"{source}: bad raster magic {magic!r} at byte 0.")
    expected = RASTER_HEADER.size + width * height * channels * dtype.itemsize
    if len(data) < expected:
        raise FormatError(
            f"{source}: raster truncated at byte {len(data)}, expected {expected} bytes."
        )
    if len(data) > expected:
        raise FormatError(f"{source}: unexpected trailing data at byte {expected}.")
    values = np.frombuffer(data, dtype=dtype, offset=RASTER_HEADER.size).reshape(
        height, width, channels
    )
    values = values.astype(dtype.newbyteorder("="))
    return values[..., 0] if channels == 1 else values


def save_raster(path: Path, array: ArrayLike) -> None:
    atomic_write_bytes(path, encode_raster(array))


def load_raster(path: Path) -> np.ndarray:
    return decode_raster(path.read_bytes(), source=str(path))


def read_raster_shape(path: Path) -> tuple[int, int, int]:
    """(height, width, channels) from the header alone."""
    with path.open("rb") as handle:
        header = handle.read(RASTER_HEADER.size)
    if len(header) < RASTER_HEADER.size:
        raise FormatError(f"{path}: truncated raster header at byte {len(header)}.")
    magic, width, height, channels = RASTER_HEADER.unpack(header)
    if magic not in (RASTER_FLOAT_MAGIC, RASTER_INT_MAGIC):
        raise FormatError(f"{path}: bad raster magic {magic!r} at byte 0.")
    return height, width, channels


# Images ----------------------------------------------------------------------


def quantize_image(rgb: ArrayLike) -> np.ndarray:
    """[0, 1] floats to 8 bits, rounding halves away from zero."""
    values = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    return np.floor(values * 255.0 + 0.5).astype(np.uint8)


def save_image(path: Path, rgb: ArrayLike) -> None:
    pixels = quantize_image(rgb)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"Images must be HxWx3, got shape {pixels.shape}.")
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PPM")
    atomic_write_bytes(path, buffer.getvalue())


def load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as image:
            if image.format != "PPM" or image.mode != "RGB":
                raise FormatError(f"{path}: expected an 8-bit RGB PPM image, got {image.format} {image.mode}.")
            pixels = np.asarray(image, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image.") from exc
    return pixels.astype(np.float64) / 255.0


def read_image_shape(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as image:
            width, height = image.size
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a readable image.") from exc
    return height, width


# Gaussian archives -----------------------------------------------------------


def record_dtype(sh_degree: int) -> np.dtype:
    coefficients = sh_coefficient_count(sh_degree) * 3
    return np.dtype(
        [
            ("center", "<f8", (3,)),
            ("rotation", "<f8", (4,)),
            ("scale", "<f8", (3,)),
            ("opacity", "<f8"),
            ("sh", "<f8", (coefficients,)),
            ("velocity", "<f8", (3,)),
            ("dynamic", "u1"),
            ("t_start", "<f8"),
            ("t_end", "<f8"),
        ]
    )


def encode_segment(segment: SceneSegment) -> bytes:
    gaussians = segment.gaussians
    count = len(gaussians)
    degree = gaussians.sh_degree
    dtype = record_dtype(degree)
    offset = ARCHIVE_HEADER.size + SEGMENT_HEADER.size
    buffer = bytearray(offset + count * dtype.itemsize)
    pose = segment.anchor_pose
    ARCHIVE_HEADER.pack_into(buffer, 0, ARCHIVE_MAGIC, ARCHIVE_VERSION, degree, 0, count)
    SEGMENT_HEADER.pack_into(
        buffer,
        ARCHIVE_HEADER.size,
        segment.t_start,
        segment.t_end,
        *pose.rotation.reshape(-1),
        *pose.translation,
    )
    if count:
        # filled in place, one copy of the payload at the end
        records = np.frombuffer(buffer, dtype=dtype, count=count, offset=offset)
        records["center"] = gaussians.centers
        records["rotation"] = gaussians.rotations
        records["scale"] = gaussians.scales
        records["opacity"] = gaussians.opacities
        records["sh"] = gaussians.sh.reshape(count, sh_coefficient_count(degree) * 3)
        records["velocity"] = gaussians.velocities
        records["dynamic"] = gaussians.dynamic
        records["t_start"] = gaussians.t_start
        records["t_end"] = gaussians.t_end
    return bytes(buffer)


def decode_segment(data: bytes, source: str = "<bytes>") -> SceneSegment:
    if len(data) < ARCHIVE_HEADER.size:
        raise FormatError(
            f"{source}: truncated archive header at byte {len(data)} "
            f"(need {ARCHIVE_HEADER.size} bytes)."
        )
    magic, version, degree, _flags, count = ARCHIVE_HEADER.unpack_from(data, 0)
    if magic != ARCHIVE_MAGIC:
        raise FormatError(f"{source}: bad archive magic {magic!r} at byte 0.")
    if version != ARCHIVE_VERSION:
        raise FormatError(
            f"{source}: unsupported archive version {version} at byte 4 "
            f"(this build reads version {ARCHIVE_VERSION})."
        )
    offset = ARCHIVE_HEADER.size
    if len(data) < offset + SEGMENT_HEADER.size:
        raise FormatError(f"{source}: truncated segment header at byte {len(data)}.")
    span = SEGMENT_HEADER.unpack_from(data, offset)
    offset += SEGMENT_HEADER.size

    if degree > MAX_SH_DEGREE:
        raise FormatError(f"{source}: unsupported SH degree {degree} at byte 5.")
    dtype = record_dtype(degree)
    expected = offset + count * dtype.itemsize
    if len(data) < expected:
        complete = (len(data) - offset) // dtype.itemsize
        raise FormatError(
            f"{source}: archive truncated at byte {len(data)} inside record {complete}; "
            f"expected {expected} bytes for {count} records."
        )
    if len(data) > expected:
        raise FormatError(f"{source}: unexpected trailing data at byte {expected}.")
    records = np.frombuffer(data, dtype=dtype, count=count, offset=offset)

    t_start, t_end = span[0], span[1]
    if count and (np.any(records["t_start"] != t_start) or np.any(records["t_end"] != t_end)):
        raise FormatError(f"{source}: record time spans disagree with the segment header.")
    n = sh_coefficient_count(degree)
    try:
        gaussians = GaussianSet(
            centers=records["center"],
            rotations=records["rotation"],
            scales=records["scale"],
            opacities=records["opacity"],
            sh=records["sh"].reshape(count, n, 3),
            velocities=records["velocity"],
            dynamic=records["dynamic"].astype(bool),
            t_start=t_start,
            t_end=t_end,
        )
        anchor = SE3(np.asarray(span[2:11]).reshape(3, 3), span[11:14])
        return SceneSegment(t_start=t_start, t_end=t_end, anchor_pose=anchor, gaussians=gaussians)
    except (GaussianError, GeometryError) as exc:
        raise FormatError(f"{source}: invalid archive contents: {exc}") from exc


def save_segment(path: Path, segment: SceneSegment) -> None:
    atomic_write_bytes(path, encode_segment(segment))


def load_segment(path: Path) -> SceneSegment:
    if not path.exists():
        raise FormatError(f"Archive not found: {path}")
    return decode_segment(path.read_bytes(), source=str(path))


# Manifests -------------------------------------------------------------------


def checked_quaternion(values: Sequence[float], where: str) -> np.ndarray:
    q = np.asarray(values, dtype=np.float64)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise ManifestError(f"{where}: rotation must be four finite numbers (w, x, y, z).")
    deviation = abs(float(np.linalg.norm(q)) - 1.0)
    if deviation > QUATERNION_REJECT + 1e-12:
        raise ManifestError(
            f"{where}: quaternion norm deviates from 1 by {deviation:.3e} "
            f"(limit {QUATERNION_REJECT})."
        )
    if deviation > QUATERNION_WARN:
        logger.warning("%s: re-normalizing quaternion with norm error %.3e.", where, deviation)
    return q / np.linalg.norm(q)


def rig_from_records(records: Sequence[CameraRecord]) -> CameraRig:
    cameras = []
    for record in records:
        where = f"camera '{record.camera_id}'"
        try:
            intrinsics = Intrinsics.from_dict(record.intrinsics)
            extrinsic = SE3.from_quaternion(checked_quaternion(record.rotation, where), record.translation)
        except (KeyError, GeometryError) as exc:
            raise ManifestError(f"{where}: invalid calibration: {exc}") from exc
        cameras.append(CameraEntry(record.camera_id, intrinsics, extrinsic))
    try:
        return CameraRig(tuple(cameras))
    except GeometryError as exc:
        raise ManifestError(str(exc)) from exc


def rig_to_records(rig: CameraRig) -> list[CameraRecord]:
    return [
        CameraRecord.from_entry(camera.camera_id, camera.intrinsics, camera.extrinsic)
        for camera in rig
    ]


def poses_from_records(records: Sequence[PoseRecord]) -> tuple[tuple[float, ...], tuple[SE3, ...]]:
    times = tuple(record.t for record in records)
    if not times:
        raise ManifestError("The manifest lists no ego poses.")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ManifestError(f"Ego pose timestamps must be strictly increasing, got {list(times)}.")
    poses = []
    for record in records:
        where = f"ego pose at t={record.t}"
        try:
            poses.append(
                SE3.from_quaternion(checked_quaternion(record.rotation, where), record.translation)
            )
        except GeometryError as exc:
            raise ManifestError(f"{where}: {exc}") from exc
    return times, tuple(poses)


def poses_to_records(times: Sequence[float], poses: Sequence[SE3]) -> list[PoseRecord]:
    return [PoseRecord.from_pose(t, pose) for t, pose in zip(times, poses)]


def _resolve(root: Path, relative: str) -> Path:
    path = root / relative
    if not path.exists():
        raise ManifestError(f"Referenced file not found: {path}")
    return path


def _expect_shape(path: Path, shape: tuple[int, ...], expected: tuple[int, ...]) -> None:
    if shape != expected:
        raise ManifestError(f"{path}: raster is {shape}, expected {expected}.")


def _load_view(
    root: Path,
    view: ViewRecord,
    camera: CameraEntry,
    sh_degree: int,
    context: bool,
) -> CameraFrame | None:
    size = (camera.intrinsics.height, camera.intrinsics.width)
    image_path = _resolve(root, view.image)
    depth_path = _resolve(root, view.depth)
    mask_path = _resolve(root, view.mask) if view.mask else None
    _expect_shape(image_path, read_image_shape(image_path), size)
    _expect_shape(depth_path, read_raster_shape(depth_path), size + (1,))
    if mask_path is not None:
        _expect_shape(mask_path, read_raster_shape(mask_path), size + (1,))
    if not context:
        return None

    if not view.attributes:
        raise ManifestError(f"Context view '{view.camera_id}' lists no attribute rasters.")
    channels = {
        "rotation": 4,
        "scale": 3,
        "opacity": 1,
        "sh": 3 * sh_coefficient_count(sh_degree),
    }
    rasters: dict[str, np.ndarray] = {}
    for key, count in channels.items():
        if key not in view.attributes:
            raise ManifestError(f"Context view '{view.camera_id}' lacks the '{key}' attribute raster.")
        path = _resolve(root, view.attributes[key])
        _expect_shape(path, read_raster_shape(path), size + (count,))
        rasters[key] = load_raster(path)

    mask = load_raster(mask_path) if mask_path is not None else None
    return CameraFrame(
        camera_id=view.camera_id,
        image=load_image(image_path),
        depth=clamp_depth(load_raster(depth_path)),
        attributes=AttributeMaps(
            raw_rotation=rasters["rotation"],
            raw_scale=rasters["scale"],
            raw_opacity=rasters["opacity"],
            raw_sh=rasters["sh"],
        ),
        mask=mask,
    )


def _load_frame(
    root: Path,
    record: FrameRecord,
    rig: CameraRig,
    sh_degree: int,
) -> ContextFrame | None:
    by_camera = {view.camera_id: view for view in record.views}
    missing = [camera_id for camera_id in rig.camera_ids if camera_id not in by_camera]
    if missing:
        raise ManifestError(f"Frame at t={record.timestamp} has no view for cameras {missing}.")
    views = [
        _load_view(root, by_camera[camera.camera_id], camera, sh_degree, record.context)
        for camera in rig
    ]
    if not record.context:
        return None
    return ContextFrame(
        timestamp=record.timestamp,
        views=tuple(view for view in views if view is not None),
        tracks={instance: np.asarray(position, dtype=np.float64) for instance, position in record.tracks.items()},
    )


def load_manifest(path: Path) -> SceneManifest:
    if not path.exists():
        raise ManifestError(f"Scene manifest not found: {path}")
    try:
        manifest = SceneManifest.from_dict(load_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc!r}).") from exc
    if manifest.schema_version != SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: unsupported schema version {manifest.schema_version} "
            f"(expected {SCHEMA_VERSION})."
        )
    return manifest


def load_scene(manifest_path: Path, max_workers: int = 1) -> SceneInputs:
    """Load and validate a scene manifest and every raster it references."""
    manifest = load_manifest(manifest_path)
    root = manifest_path.parent
    rig = rig_from_records(manifest.cameras)
    pose_times, poses = poses_from_records(manifest.poses)

    stamps = [frame.timestamp for frame in manifest.frames]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ManifestError(f"Frame timestamps must be strictly increasing, got {stamps}.")
    if stamps and (stamps[0] < pose_times[0] or stamps[-1] > pose_times[-1]):
        raise ManifestError(
            f"Frames span [{stamps[0]}, {stamps[-1]}] but ego poses only cover "
            f"[{pose_times[0]}, {pose_times[-1]}]."
        )

    def _load(record: FrameRecord) -> ContextFrame | None:
        return _load_frame(root, record, rig, manifest.sh_degree)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            loaded = list(pool.map(_load, manifest.frames))
    else:
        loaded = [_load(record) for record in manifest.frames]

    return SceneInputs(
        root=root,
        manifest=manifest,
        rig=rig,
        pose_times=pose_times,
        poses=poses,
        context_frames=tuple(frame for frame in loaded if frame is not None),
        held_out=tuple(record for record in manifest.frames if not record.context),
    )


def save_scene_index(out_dir: Path, scene: Scene4D, build_count: int = 0) -> Path:
    """Write one archive per segment plus segments.json."""
    records = []
    for index, segment in enumerate(scene.segments):
        name = f"segment_{index:03d}.s4dg"
        save_segment(out_dir / name, segment)
        records.append(
            SegmentRecord(
                t_start=segment.t_start,
                t_end=segment.t_end,
                archive=name,
                kernel_count=len(segment),
                velocity_sources=dict(segment.velocity_sources),
            )
        )
    index_doc = SegmentIndex(
        cameras=rig_to_records(scene.rig),
        poses=poses_to_records(scene.pose_times, scene.poses),
        segments=records,
        build_count=build_count,
    )
    index_path = out_dir / SEGMENT_INDEX_FILENAME
    atomic_write_json(index_path, index_doc.to_dict())
    return index_path


def load_scene_index(segments_dir: Path) -> Scene4D:
    index_path = segments_dir / SEGMENT_INDEX_FILENAME
    if not index_path.exists():
        raise ManifestError(f"Segment index not found: {index_path}")
    try:
        index_doc = SegmentIndex.from_dict(load_json(index_path))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{index_path}: malformed segment index ({exc!r}).") from exc
    rig = rig_from_records(index_doc.cameras)
    pose_times, poses = poses_from_records(index_doc.poses)
    segments = []
    for record in index_doc.segments:
        loaded = load_segment(_resolve(segments_dir, record.archive))
        segments.append(
            SceneSegment(
                t_start=loaded.t_start,
                t_end=loaded.t_end,
                anchor_pose=loaded.anchor_pose,
                gaussians=loaded.gaussians,
                velocity_sources=dict(record.velocity_sources),
            )
        )
    try:
        return Scene4D(segments=tuple(segments), rig=rig, pose_times=pose_times, poses=poses)
    except GaussianError as exc:
        raise ManifestError(f"{index_path}: {exc}") from exc


def save_manifest(path: Path, manifest: SceneManifest) -> Path:
    atomic_write_json(path, manifest.to_dict())
    return path
