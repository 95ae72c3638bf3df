"""Pixel-wise Gaussian construction from depth and attribute maps."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike
from scipy.special import expit, logit

from .exceptions import DepthError, GaussianError, ShapeError
from .gauss import SH_C0, GaussianSet, sh_coefficient_count, sh_degree_for
from .geom import CameraEntry, CameraRig, backproject

logger = logging.getLogger(__name__)

DEPTH_MIN = 1.5
DEPTH_MAX = 110.0
SCALE_MIN = 1e-4
SCALE_MAX = 50.0
IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True, slots=True, eq=False)
class AttributeMaps:
    """Raw, pre-activation attribute rasters.

    raw_sh holds 3 * (degree+1)² channels laid out coefficient-major, so
    channel k * 3 + c is coefficient k of colour channel c.
    """

    raw_rotation: np.ndarray
    raw_scale: np.ndarray
    raw_opacity: np.ndarray
    raw_sh: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.asarray(self.raw_rotation, dtype=np.float64)
        scale = np.asarray(self.raw_scale, dtype=np.float64)
        opacity = np.asarray(self.raw_opacity, dtype=np.float64)
        sh = np.asarray(self.raw_sh, dtype=np.float64)
        if opacity.ndim == 2:
            opacity = opacity[..., None]
        if rotation.ndim != 3 or rotation.shape[2] != 4:
            raise ShapeError(f"raw_rotation must be HxWx4, got {rotation.shape}.")
        size = rotation.shape[:2]
        for name, value, channels in (
            ("raw_scale", scale, 3),
            ("raw_opacity", opacity, 1),
        ):
            if value.shape != size + (channels,):
                raise ShapeError(f"{name} must be {size[0]}x{size[1]}x{channels}, got {value.shape}.")
        if sh.ndim != 3 or sh.shape[:2] != size or sh.shape[2] % 3:
            raise ShapeError(f"raw_sh must be {size[0]}x{size[1]}x(3n), got {sh.shape}.")
        sh_degree_for(sh.shape[2] // 3)
        object.__setattr__(self, "raw_rotation", rotation)
        object.__setattr__(self, "raw_scale", scale)
        object.__setattr__(self, "raw_opacity", opacity)
        object.__setattr__(self, "raw_sh", sh)

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw_rotation.shape[0], self.raw_rotation.shape[1]

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.raw_sh.shape[2] // 3)


@dataclass(frozen=True, slots=True, eq=False)
class ActivatedAttributes:
    rotation: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray


@dataclass(frozen=True, slots=True, eq=False)
class CameraFrame:
    camera_id: str
    image: np.ndarray
    depth: np.ndarray
    attributes: AttributeMaps
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        image = np.asarray(self.image, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        size = depth.shape
        if depth.ndim != 2:
            raise ShapeError(f"Depth for camera '{self.camera_id}' must be HxW, got {depth.shape}.")
        if image.shape != size + (3,):
            raise ShapeError(
                f"Image for camera '{self.camera_id}' is {image.shape}, expected {size + (3,)}."
            )
        if self.attributes.shape != size:
            raise ShapeError(
                f"Attributes for camera '{self.camera_id}' are {self.attributes.shape}, "
                f"expected {size}."
            )
        mask = np.zeros(size, dtype=np.int32) if self.mask is None else np.asarray(self.mask)
        if mask.shape != size:
            raise ShapeError(f"Mask for camera '{self.camera_id}' is {mask.shape}, expected {size}.")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "mask", mask.astype(np.int32, copy=False))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True, slots=True, eq=False)
class ContextFrame:
    """All views captured at one context timestamp.

    tracks maps instance id to the annotated world-frame box center at this
    timestamp; instances without annotations are simply absent.
    """

    timestamp: float
    views: tuple[CameraFrame, ...]
    tracks: Mapping[int, np.ndarray] = field(default_factory=dict)

    def view(self, camera_id: str) -> CameraFrame:
        for view in self.views:
            if view.camera_id == camera_id:
                return view
        raise ShapeError(f"Context frame at t={self.timestamp} has no view for camera '{camera_id}'.")


def clamp_depth(d: ArrayLike) -> np.ndarray:
    depth = np.asarray(d, dtype=np.float64)
    bad = ~np.isfinite(depth)
    if np.any(bad):
        index = tuple(int(i) for i in np.argwhere(bad)[0])
        if len(index) == 2:
            raise DepthError(f"Non-finite depth {depth[index]} at pixel (u={index[1]}, v={index[0]}).")
        raise DepthError(f"Non-finite depth {depth[index]} at index {index}.")
    return np.clip(depth, DEPTH_MIN, DEPTH_MAX)


def activate_attributes(raw: AttributeMaps) -> ActivatedAttributes:
    height, width = raw.shape
    quaternions = raw.raw_rotation.copy()
    norms = np.linalg.norm(quaternions, axis=-1, keepdims=True)
    degenerate = norms[..., 0] == 0.0
    quaternions[degenerate] = IDENTITY_QUATERNION
    norms[degenerate] = 1.0
    quaternions = quaternions / norms
    n = sh_coefficient_count(raw.sh_degree)
    return ActivatedAttributes(
        rotation=quaternions,
        scale=np.clip(np.exp(raw.raw_scale), SCALE_MIN, SCALE_MAX),
        opacity=expit(raw.raw_opacity[..., 0]),
        sh=raw.raw_sh.reshape(height, width, n, 3),
    )


def deactivate_attributes(
    rotation: ArrayLike,
    scale: ArrayLike,
    opacity: ArrayLike,
    sh: ArrayLike,
) -> AttributeMaps:
    """Inverse of activate_attributes for attributes inside the activation ranges."""
    scale = np.asarray(scale, dtype=np.float64)
    opacity = np.asarray(opacity, dtype=np.float64)
    sh = np.asarray(sh, dtype=np.float64)
    if np.any((scale < SCALE_MIN) | (scale > SCALE_MAX)):
        raise GaussianError(f"Scales must lie in [{SCALE_MIN}, {SCALE_MAX}] to be invertible.")
    if np.any((opacity <= 0.0) | (opacity >= 1.0)):
        raise GaussianError("Opacities must lie strictly inside (0, 1) to be invertible.")
    height, width = opacity.shape[:2]
    return AttributeMaps(
        raw_rotation=np.asarray(rotation, dtype=np.float64),
        raw_scale=np.log(scale),
        raw_opacity=logit(opacity).reshape(height, width, 1),
        raw_sh=sh.reshape(height, width, -1),
    )


def build_frame_gaussians(
    image: ArrayLike,
    depth: ArrayLike,
    attrs: AttributeMaps,
    cam: CameraEntry,
    t_start: float,
    t_end: float,
) -> GaussianSet:
    """One kernel per pixel, index i = v * width + u, in the frame's ego coordinates."""
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    K = cam.intrinsics
    size = (K.height, K.width)
    if depth.shape != size:
        raise ShapeError(f"Depth raster is {depth.shape}, camera '{cam.camera_id}' expects {size}.")
    if image.shape != size + (3,):
        raise ShapeError(f"Image raster is {image.shape}, camera '{cam.camera_id}' expects {size + (3,)}.")
    if attrs.shape != size:
        raise ShapeError(f"Attribute rasters are {attrs.shape}, camera '{cam.camera_id}' expects {size}.")

    activated = activate_attributes(attrs)
    u, v = K.pixel_grid()
    points = backproject(np.stack([u, v], axis=-1), depth.reshape(-1), K)
    centers = cam.extrinsic.apply(points)

    count = K.width * K.height
    sh = activated.sh.reshape(count, -1, 3).copy()
    sh[:, 0, :] = (image.reshape(count, 3) - 0.5) / SH_C0
    logger.debug("Built %d kernels for camera %s.", count, cam.camera_id)
    return GaussianSet(
        centers=centers,
        rotations=activated.rotation.reshape(count, 4),
        scales=activated.scale.reshape(count, 3),
        opacities=activated.opacity.reshape(count),
        sh=sh,
        velocities=np.zeros((count, 3)),
        dynamic=np.zeros(count, dtype=bool),
        t_start=t_start,
        t_end=t_end,
    )


def build_context_frame(
    frame: ContextFrame,
    rig: CameraRig,
    t_start: float,
    t_end: float,
) -> GaussianSet:
    """Build every view of a context frame and concatenate them in rig order."""
    sets = []
    for camera in rig:
        view = frame.view(camera.camera_id)
        sets.append(
            build_frame_gaussians(
                view.image,
                clamp_depth(view.depth),
                view.attributes,
                camera,
                t_start,
                t_end,
            )
        )
    return GaussianSet.concatenate(sets)


def camera_offsets(rig: CameraRig) -> dict[str, int]:
    """First kernel index of each camera inside a context-frame set."""
    offsets: dict[str, int] = {}
    cursor = 0
    for camera in rig:
        offsets[camera.camera_id] = cursor
        cursor += camera.intrinsics.width * camera.intrinsics.height
    return offsets
