"""Instance velocity estimation and per-kernel motion assignment."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Iterable, Literal, Mapping

import numpy as np
from numpy.typing import ArrayLike

from .build import ContextFrame
from .exceptions import DynamicsError, MissingInstanceError, ShapeError
from .gauss import GaussianSet
from .geom import SE3, CameraRig

logger = logging.getLogger(__name__)

VelocitySource = Literal["track", "centroid", "none"]


@dataclass(frozen=True, slots=True, eq=False)
class ObjectTrack:
    instance_id: int
    position_start: np.ndarray
    position_end: np.ndarray

    def __post_init__(self) -> None:
        start = np.asarray(self.position_start, dtype=np.float64).reshape(3)
        end = np.asarray(self.position_end, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(start)) and np.all(np.isfinite(end))):
            raise DynamicsError(f"Track for instance {self.instance_id} has non-finite positions.")
        object.__setattr__(self, "position_start", start)
        object.__setattr__(self, "position_end", end)


@dataclass(frozen=True, slots=True, eq=False)
class InstanceVelocity:
    instance_id: int
    velocity: np.ndarray
    source: VelocitySource

    def to_dict(self) -> dict[str, object]:
        return {
            "instance_id": self.instance_id,
            "velocity": [float(v) for v in self.velocity],
            "source": self.source,
        }


def _check_dt(dt: float) -> None:
    if not dt > 0.0:
        raise DynamicsError(f"Time step must be positive, got {dt}.")


def velocity_from_track(track: ObjectTrack, ego_at_Ts: SE3, dt: float) -> np.ndarray:
    """Velocity of an annotated object in the ego frame of the segment start."""
    _check_dt(dt)
    world_to_ego = ego_at_Ts.inverse()
    start = world_to_ego.apply(track.position_start)
    end = world_to_ego.apply(track.position_end)
    return (end - start) / dt


def instance_ids(*masks: ArrayLike) -> list[int]:
    ids: set[int] = set()
    for mask in masks:
        ids.update(int(k) for k in np.unique(np.asarray(mask)) if k > 0)
    return sorted(ids)


def velocity_from_centroids(
    mask_Ts: ArrayLike,
    mask_Ts1: ArrayLike,
    g_Ts: GaussianSet,
    g_Ts1: GaussianSet,
    T_s1_to_s: SE3,
    dt: float,
    ids: Iterable[int] | None = None,
) -> dict[int, np.ndarray]:
    """Per-instance centroid displacement between two context frames.

    Masks are flattened in kernel order, so they may be given either as the
    HxW raster of a single camera or as the concatenated per-camera masks.
    """
    _check_dt(dt)
    flat_s = np.asarray(mask_Ts).reshape(-1)
    flat_s1 = np.asarray(mask_Ts1).reshape(-1)
    if flat_s.size != len(g_Ts) or flat_s1.size != len(g_Ts1):
        raise ShapeError(
            f"Masks cover {flat_s.size} and {flat_s1.size} pixels but the sets hold "
            f"{len(g_Ts)} and {len(g_Ts1)} kernels."
        )
    wanted = instance_ids(flat_s, flat_s1) if ids is None else list(ids)
    velocities: dict[int, np.ndarray] = {}
    for instance in wanted:
        in_s = flat_s == instance
        in_s1 = flat_s1 == instance
        if not in_s.any() or not in_s1.any():
            raise MissingInstanceError(
                f"Instance {instance} is not visible in both context frames."
            )
        centroid_s = g_Ts.centers[in_s].mean(axis=0)
        centroid_s1 = T_s1_to_s.apply(g_Ts1.centers[in_s1].mean(axis=0))
        velocities[instance] = (centroid_s1 - centroid_s) / dt
    return velocities


def rasterize_flow(velocities: Mapping[int, ArrayLike], mask: ArrayLike) -> np.ndarray:
    instance_mask = np.asarray(mask)
    flow = np.zeros(instance_mask.shape + (3,))
    for instance in instance_ids(instance_mask):
        if instance not in velocities:
            raise MissingInstanceError(f"No velocity entry for instance {instance}.")
        flow[instance_mask == instance] = np.asarray(velocities[instance], dtype=np.float64)
    return flow


def apply_flow(gaussians: GaussianSet, flow: ArrayLike, mask: ArrayLike) -> GaussianSet:
    """Give each pixel's kernel that pixel's velocity; masked pixels become dynamic."""
    per_kernel_flow = np.asarray(flow, dtype=np.float64).reshape(-1, 3)
    flat_mask = np.asarray(mask).reshape(-1)
    if per_kernel_flow.shape[0] != len(gaussians) or flat_mask.size != len(gaussians):
        raise ShapeError(
            f"Flow covers {per_kernel_flow.shape[0]} pixels and mask {flat_mask.size}, "
            f"but the set holds {len(gaussians)} kernels."
        )
    dynamic = flat_mask > 0
    velocities = np.where(dynamic[:, None], per_kernel_flow, 0.0)
    return gaussians.replace(velocities=velocities, dynamic=dynamic)


def flatten_masks(frame: ContextFrame, rig: CameraRig) -> np.ndarray:
    return np.concatenate([frame.view(camera.camera_id).mask.reshape(-1) for camera in rig])


def frame_flow(
    velocities: Mapping[int, ArrayLike],
    frame: ContextFrame,
    rig: CameraRig,
) -> np.ndarray:
    """Per-kernel flow (N, 3) for a multi-camera frame, cameras in rig order."""
    rasters = [
        rasterize_flow(velocities, frame.view(camera.camera_id).mask).reshape(-1, 3)
        for camera in rig
    ]
    return np.concatenate(rasters)


def estimate_instance_velocities(
    frame_s: ContextFrame,
    frame_s1: ContextFrame,
    g_Ts: GaussianSet,
    g_Ts1: GaussianSet,
    ego_Ts: SE3,
    ego_Ts1: SE3,
    rig: CameraRig,
) -> dict[int, InstanceVelocity]:
    """Velocity of every instance seen in either frame, in the T_s ego frame.

    Annotated tracks win; otherwise the centroid displacement is used; an
    instance visible in only one frame falls back to zero velocity.
    """
    dt = frame_s1.timestamp - frame_s.timestamp
    _check_dt(dt)
    mask_s = flatten_masks(frame_s, rig)
    mask_s1 = flatten_masks(frame_s1, rig)
    T_s1_to_s = ego_Ts.inverse() @ ego_Ts1
    estimates: dict[int, InstanceVelocity] = {}
    for instance in instance_ids(mask_s, mask_s1):
        if instance in frame_s.tracks and instance in frame_s1.tracks:
            track = ObjectTrack(instance, frame_s.tracks[instance], frame_s1.tracks[instance])
            velocity = velocity_from_track(track, ego_Ts, dt)
            estimates[instance] = InstanceVelocity(instance, velocity, "track")
            continue
        try:
            centroid = velocity_from_centroids(
                mask_s, mask_s1, g_Ts, g_Ts1, T_s1_to_s, dt, ids=[instance]
            )
        except MissingInstanceError:
            logger.warning(
                "Instance %d appears in only one of the frames at t=%s and t=%s; "
                "assigning zero velocity.",
                instance,
                frame_s.timestamp,
                frame_s1.timestamp,
            )
            estimates[instance] = InstanceVelocity(instance, np.zeros(3), "none")
            continue
        estimates[instance] = InstanceVelocity(instance, centroid[instance], "centroid")
    return estimates
