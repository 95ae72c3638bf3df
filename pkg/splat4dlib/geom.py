"""Rigid transforms, pinhole cameras and the projection primitives.

Conventions used throughout the package:

- camera frame: x right, y down, z forward (pixel u grows with x, v with y)
- ego frame: x forward, y left, z up
- quaternions are stored as (w, x, y, z)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.typing import ArrayLike
from scipy.spatial.transform import Rotation, Slerp

from .exceptions import BehindCameraError, GeometryError, SegmentTimeError

ORTHONORMAL_TOLERANCE = 1e-9
MIN_PROJECT_DEPTH = 1e-9


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def quaternion_to_matrix(quaternions: ArrayLike) -> np.ndarray:
    q = np.asarray(quaternions, dtype=np.float64)
    xyzw = q[..., [1, 2, 3, 0]]
    flat = xyzw.reshape(-1, 4)
    if flat.shape[0] == 0:
        return np.zeros(q.shape[:-1] + (3, 3))
    matrices = Rotation.from_quat(flat).as_matrix()
    return matrices.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quaternion(matrices: ArrayLike) -> np.ndarray:
    m = np.asarray(matrices, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    if flat.shape[0] == 0:
        return np.zeros(m.shape[:-2] + (4,))
    xyzw = Rotation.from_matrix(flat).as_quat()
    wxyz = xyzw[:, [3, 0, 1, 2]]
    return _canonical_sign(wxyz).reshape(m.shape[:-2] + (4,))


def quaternion_multiply(a: ArrayLike, b: ArrayLike) -> np.ndarray:
    """Hamilton product a ⊗ b, i.e. the rotation b followed by a."""
    qa = np.asarray(a, dtype=np.float64)
    qb = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(qa, -1, 0)
    bw, bx, by, bz = np.moveaxis(qb, -1, 0)
    product = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    norms = np.linalg.norm(product, axis=-1, keepdims=True)
    return _canonical_sign(product / norms)


def _canonical_sign(q: np.ndarray) -> np.ndarray:
    return np.where(q[..., :1] < 0.0, -q, q)


@dataclass(frozen=True, slots=True, eq=False)
class SE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3):
            raise GeometryError(f"Rotation must be 3x3, got shape {rotation.shape}.")
        if translation.shape != (3,):
            raise GeometryError(f"Translation must be a 3-vector, got shape {translation.shape}.")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise GeometryError("Rigid transform contains non-finite values.")
        gram_error = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        det_error = abs(np.linalg.det(rotation) - 1.0)
        if gram_error > ORTHONORMAL_TOLERANCE or det_error > ORTHONORMAL_TOLERANCE:
            raise GeometryError(
                "Rotation is not orthonormal with det +1 "
                f"(max |RᵀR-I| = {gram_error:.3e}, |det-1| = {det_error:.3e})."
            )
        object.__setattr__(self, "rotation", _readonly(rotation))
        object.__setattr__(self, "translation", _readonly(translation))

    @classmethod
    def identity(cls) -> SE3:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, quaternion: ArrayLike, translation: ArrayLike) -> SE3:
        q = np.asarray(quaternion, dtype=np.float64)
        norm = np.linalg.norm(q)
        if norm == 0.0 or not np.isfinite(norm):
            raise GeometryError("Quaternion has zero or non-finite norm.")
        return cls(quaternion_to_matrix(q / norm), translation)

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> SE3:
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise GeometryError(f"Homogeneous transform must be 4x4, got shape {m.shape}.")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, degrees: float, translation: ArrayLike = (0.0, 0.0, 0.0)) -> SE3:
        rotation = Rotation.from_euler("z", degrees, degrees=True).as_matrix()
        return cls(rotation, translation)

    @classmethod
    def translation_only(cls, x: float = 0.0, y: float = 0.0, z: float = 0.0) -> SE3:
        return cls(np.eye(3), (x, y, z))

    def apply(self, points: ArrayLike) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: ArrayLike) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64)
        return v @ self.rotation.T

    def inverse(self) -> SE3:
        rotation_t = self.rotation.T
        return SE3(rotation_t, -(rotation_t @ self.translation))

    def compose(self, other: SE3) -> SE3:
        return SE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: SE3) -> SE3:
        return self.compose(other)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.rotation)

    def to_dict(self) -> dict[str, list[float]]:
        return {
            "rotation": [float(v) for v in self.quaternion()],
            "translation": [float(v) for v in self.translation],
        }


def compose(a: SE3, b: SE3) -> SE3:
    """Return the transform x ↦ a(b(x))."""
    return a.compose(b)


def inverse(transform: SE3) -> SE3:
    return transform.inverse()


def offset_pose(pose: SE3, dx: float = 0.0, dy: float = 0.0, dz: float = 0.0) -> SE3:
    """Shift an ego pose by (dx, dy, dz) expressed in its own ego frame."""
    return pose @ SE3.translation_only(dx, dy, dz)


def interpolate_pose(t: float, times: Sequence[float], poses: Sequence[SE3]) -> SE3:
    stamps = np.asarray(times, dtype=np.float64)
    if stamps.size == 0 or len(poses) != stamps.size:
        raise GeometryError("Pose interpolation needs matching, non-empty times and poses.")
    if t < stamps[0] or t > stamps[-1]:
        raise SegmentTimeError(
            f"Time {t} is outside the pose timeline [{stamps[0]}, {stamps[-1]}]."
        )
    exact = np.nonzero(stamps == t)[0]
    if exact.size:
        return poses[int(exact[0])]
    upper = int(np.searchsorted(stamps, t, side="right"))
    lower = upper - 1
    t0, t1 = stamps[lower], stamps[upper]
    weight = (t - t0) / (t1 - t0)
    key_rotations = Rotation.from_matrix(
        np.stack([poses[lower].rotation, poses[upper].rotation])
    )
    rotation = Slerp([t0, t1], key_rotations)([t]).as_matrix()[0]
    translation = (1.0 - weight) * poses[lower].translation + weight * poses[upper].translation
    return SE3(rotation, translation)


@dataclass(frozen=True, slots=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"Focal lengths must be positive, got fx={self.fx}, fy={self.fy}.")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"Raster size must be at least 1x1, got {self.width}x{self.height}.")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"Principal point ({self.cx}, {self.cy}) lies outside the "
                f"{self.width}x{self.height} raster."
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major pixel coordinates (u, v), flattened so index = v * width + u."""
        v, u = np.meshgrid(
            np.arange(self.height, dtype=np.float64),
            np.arange(self.width, dtype=np.float64),
            indexing="ij",
        )
        return u.reshape(-1), v.reshape(-1)

    def to_dict(self) -> dict[str, float | int]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Intrinsics:
        return cls(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )


@dataclass(frozen=True, slots=True)
class CameraEntry:
    camera_id: str
    intrinsics: Intrinsics
    extrinsic: SE3


@dataclass(frozen=True, slots=True)
class CameraRig:
    cameras: tuple[CameraEntry, ...]

    def __post_init__(self) -> None:
        cameras = tuple(self.cameras)
        ids = [camera.camera_id for camera in cameras]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"Camera ids must be unique, got {ids}.")
        object.__setattr__(self, "cameras", cameras)

    def __iter__(self) -> Iterator[CameraEntry]:
        return iter(self.cameras)

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def camera_ids(self) -> tuple[str, ...]:
        return tuple(camera.camera_id for camera in self.cameras)

    def camera(self, camera_id: str) -> CameraEntry:
        for camera in self.cameras:
            if camera.camera_id == camera_id:
                return camera
        raise GeometryError(f"Unknown camera id '{camera_id}'. Known: {list(self.camera_ids)}.")


def backproject(pixel: ArrayLike, depth: ArrayLike, K: Intrinsics) -> np.ndarray:
    """Lift pixels (…, 2) at metric depth (…) to camera-frame points (…, 3)."""
    uv = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(uv)):
        raise GeometryError("Pixel coordinates must be finite.")
    if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
        raise GeometryError("Backprojection requires finite, strictly positive depth.")
    x = (uv[..., 0] - K.cx) * d / K.fx
    y = (uv[..., 1] - K.cy) * d / K.fy
    return np.stack([x, y, np.broadcast_to(d, x.shape)], axis=-1)


def project(point: ArrayLike, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (…, 3) to pixels (…, 2) and depths (…)."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(~(z > MIN_PROJECT_DEPTH)):
        raise BehindCameraError(f"Cannot project points with z <= {MIN_PROJECT_DEPTH}.")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z.copy()


def normalize_to_grid(pixel: ArrayLike, width: int, height: int) -> np.ndarray:
    """Map pixel centers to [-1, 1]: pixel 0 ↦ -1 and pixel size-1 ↦ +1."""
    if width < 2 or height < 2:
        raise GeometryError(f"Grid normalization needs at least 2x2 pixels, got {width}x{height}.")
    uv = np.asarray(pixel, dtype=np.float64)
    gx = 2.0 * uv[..., 0] / (width - 1) - 1.0
    gy = 2.0 * uv[..., 1] / (height - 1) - 1.0
    return np.stack([gx, gy], axis=-1)


def grid_to_pixel(grid: ArrayLike, width: int, height: int) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    u = (g[..., 0] + 1.0) * (width - 1) / 2.0
    v = (g[..., 1] + 1.0) * (height - 1) / 2.0
    return np.stack([u, v], axis=-1)
