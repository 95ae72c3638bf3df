"""Gaussian kernels, scene segments and spherical-harmonic colour."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike

from .exceptions import GaussianError, SegmentTimeError, ShapeError, UnsupportedDegreeError
from .geom import SE3, CameraRig, interpolate_pose

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
MAX_SH_DEGREE = 3
QUATERNION_TOLERANCE = 1e-9
VIEW_DIR_TOLERANCE = 1e-6

# Degree-1 basis is (-C1*y, C1*z, -C1*x); this permutation maps (x, y, z) to (-y, z, -x).
_BAND1_PERMUTATION = np.array(
    [
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
    ]
)


def sh_coefficient_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_for(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if degree < 0 or sh_coefficient_count(degree) != count:
        raise ShapeError(f"{count} coefficients per channel is not a complete SH basis.")
    if degree > MAX_SH_DEGREE:
        raise UnsupportedDegreeError(
            f"SH degree {degree} is not supported (maximum {MAX_SH_DEGREE})."
        )
    return degree


def sh_basis(directions: ArrayLike, degree: int) -> np.ndarray:
    """Real SH basis values (…, (degree+1)²) for unit directions (…, 3)."""
    if degree < 0 or degree > MAX_SH_DEGREE:
        raise UnsupportedDegreeError(
            f"SH degree {degree} is not supported (maximum {MAX_SH_DEGREE})."
        )
    d = np.asarray(directions, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    terms = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        terms += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        terms += [
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        terms += [
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    return np.stack(terms, axis=-1)


def sh_to_rgb(sh: ArrayLike, view_dir: ArrayLike) -> np.ndarray:
    """Evaluate colour for coefficients (…, n, 3) seen along unit view_dir (…, 3)."""
    coefficients = np.asarray(sh, dtype=np.float64)
    degree = sh_degree_for(coefficients.shape[-2])
    d = np.asarray(view_dir, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > VIEW_DIR_TOLERANCE):
        raise GaussianError("View directions must be unit vectors.")
    basis = sh_basis(d, degree)
    rgb = 0.5 + np.einsum("...k,...kc->...c", basis, coefficients)
    return np.clip(rgb, 0.0, 1.0)


def rotate_sh(sh: ArrayLike, R: ArrayLike) -> np.ndarray:
    """Re-express colour coefficients in a frame rotated by R.

    Satisfies sh_to_rgb(rotate_sh(sh, R), R @ d) == sh_to_rgb(sh, d). Only
    degrees 0 and 1 are supported.
    """
    coefficients = np.array(sh, dtype=np.float64)
    degree = sh_degree_for(coefficients.shape[-2])
    if degree > 1:
        raise UnsupportedDegreeError(
            f"Rotating degree-{degree} SH is not supported; only degrees 0 and 1 rotate exactly."
        )
    if degree == 0:
        return coefficients
    rotation = np.asarray(R, dtype=np.float64)
    band_map = _BAND1_PERMUTATION @ rotation @ _BAND1_PERMUTATION.T
    coefficients[..., 1:4, :] = np.einsum("ij,...jc->...ic", band_map, coefficients[..., 1:4, :])
    return coefficients


@dataclass(frozen=True, slots=True, eq=False)
class Gaussian4D:
    center: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray
    velocity: np.ndarray
    dynamic: bool
    t_start: float
    t_end: float

    def __post_init__(self) -> None:
        center = np.array(self.center, dtype=np.float64).reshape(3)
        rotation = np.array(self.rotation, dtype=np.float64).reshape(4)
        scale = np.array(self.scale, dtype=np.float64).reshape(3)
        sh = np.array(self.sh, dtype=np.float64)
        velocity = np.array(self.velocity, dtype=np.float64).reshape(3)
        if sh.ndim != 2 or sh.shape[1] != 3:
            raise ShapeError(f"SH coefficients must have shape (n, 3), got {sh.shape}.")
        sh_degree_for(sh.shape[0])
        if not all(np.all(np.isfinite(v)) for v in (center, rotation, scale, sh, velocity)):
            raise GaussianError("Gaussian attributes must be finite.")
        if not 0.0 <= self.opacity <= 1.0:
            raise GaussianError(f"Opacity {self.opacity} is outside [0, 1].")
        if np.any(scale <= 0.0):
            raise GaussianError(f"Scale components must be positive, got {scale}.")
        if abs(np.linalg.norm(rotation) - 1.0) > QUATERNION_TOLERANCE:
            raise GaussianError("Rotation quaternion is not unit length.")
        if not self.dynamic and np.any(velocity != 0.0):
            raise GaussianError("Static Gaussians must have zero velocity.")
        if not self.t_start < self.t_end:
            raise GaussianError(f"Empty time span [{self.t_start}, {self.t_end}].")
        for name, value in (
            ("center", center),
            ("rotation", rotation),
            ("scale", scale),
            ("sh", sh),
            ("velocity", velocity),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "dynamic", bool(self.dynamic))


def center_at(g: Gaussian4D, t: float) -> np.ndarray:
    if t < g.t_start or t > g.t_end:
        raise SegmentTimeError(f"Time {t} is outside the kernel span [{g.t_start}, {g.t_end}].")
    if not g.dynamic:
        return g.center.copy()
    return g.center + g.velocity * (t - g.t_start)


@dataclass(frozen=True, slots=True, eq=False)
class GaussianSet:
    """Struct-of-arrays container for kernels sharing one time span.

    Index i of every array describes the same kernel; builders keep the
    pixel order (index = v * width + u, cameras concatenated in rig order).
    """

    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    velocities: np.ndarray
    dynamic: np.ndarray
    t_start: float
    t_end: float

    def __post_init__(self) -> None:
        arrays = {
            "centers": np.array(self.centers, dtype=np.float64),
            "rotations": np.array(self.rotations, dtype=np.float64),
            "scales": np.array(self.scales, dtype=np.float64),
            "opacities": np.array(self.opacities, dtype=np.float64).reshape(-1),
            "sh": np.array(self.sh, dtype=np.float64),
            "velocities": np.array(self.velocities, dtype=np.float64),
            "dynamic": np.array(self.dynamic, dtype=bool).reshape(-1),
        }
        count = arrays["opacities"].shape[0]
        expected = {
            "centers": (count, 3),
            "rotations": (count, 4),
            "scales": (count, 3),
            "velocities": (count, 3),
            "dynamic": (count,),
        }
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {arrays[name].shape}.")
        sh = arrays["sh"]
        if sh.ndim != 3 or sh.shape[0] != count or sh.shape[2] != 3:
            raise ShapeError(f"sh must have shape ({count}, n, 3), got {sh.shape}.")
        sh_degree_for(sh.shape[1])
        for name, value in arrays.items():
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "t_start", float(self.t_start))
        object.__setattr__(self, "t_end", float(self.t_end))
        self.validate()

    def validate(self) -> None:
        if not self.t_start < self.t_end:
            raise GaussianError(f"Empty time span [{self.t_start}, {self.t_end}].")
        for name in ("centers", "rotations", "scales", "opacities", "sh", "velocities"):
            values = getattr(self, name)
            if not np.all(np.isfinite(values)):
                bad = int(np.flatnonzero(~np.isfinite(values).reshape(len(values), -1).all(axis=1))[0])
                raise GaussianError(f"Non-finite {name} at kernel {bad}.")
        if np.any((self.opacities < 0.0) | (self.opacities > 1.0)):
            raise GaussianError("Opacities must lie in [0, 1].")
        if np.any(self.scales <= 0.0):
            raise GaussianError("Scale components must be positive.")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > QUATERNION_TOLERANCE):
            raise GaussianError("Rotation quaternions must be unit length.")
        if np.any(self.velocities[~self.dynamic] != 0.0):
            raise GaussianError("Static Gaussians must have zero velocity.")

    @classmethod
    def empty(cls, sh_degree: int, t_start: float, t_end: float) -> GaussianSet:
        n = sh_coefficient_count(sh_degree)
        return cls(
            centers=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            scales=np.zeros((0, 3)),
            opacities=np.zeros(0),
            sh=np.zeros((0, n, 3)),
            velocities=np.zeros((0, 3)),
            dynamic=np.zeros(0, dtype=bool),
            t_start=t_start,
            t_end=t_end,
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian4D]) -> GaussianSet:
        if not gaussians:
            raise GaussianError("Cannot infer a time span from an empty kernel list.")
        span = (gaussians[0].t_start, gaussians[0].t_end)
        if any((g.t_start, g.t_end) != span for g in gaussians):
            raise GaussianError("All kernels of a set must share one time span.")
        return cls(
            centers=np.stack([g.center for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            scales=np.stack([g.scale for g in gaussians]),
            opacities=np.array([g.opacity for g in gaussians]),
            sh=np.stack([g.sh for g in gaussians]),
            velocities=np.stack([g.velocity for g in gaussians]),
            dynamic=np.array([g.dynamic for g in gaussians]),
            t_start=span[0],
            t_end=span[1],
        )

    @classmethod
    def concatenate(cls, sets: Sequence[GaussianSet]) -> GaussianSet:
        if not sets:
            raise GaussianError("Nothing to concatenate.")
        span = (sets[0].t_start, sets[0].t_end)
        if any((s.t_start, s.t_end) != span for s in sets):
            raise GaussianError("Concatenated sets must share one time span.")
        degrees = {s.sh_degree for s in sets}
        if len(degrees) != 1:
            raise ShapeError(f"Concatenated sets mix SH degrees {sorted(degrees)}.")
        return cls(
            centers=np.concatenate([s.centers for s in sets]),
            rotations=np.concatenate([s.rotations for s in sets]),
            scales=np.concatenate([s.scales for s in sets]),
            opacities=np.concatenate([s.opacities for s in sets]),
            sh=np.concatenate([s.sh for s in sets]),
            velocities=np.concatenate([s.velocities for s in sets]),
            dynamic=np.concatenate([s.dynamic for s in sets]),
            t_start=span[0],
            t_end=span[1],
        )

    def __len__(self) -> int:
        return int(self.opacities.shape[0])

    def __getitem__(self, index: int) -> Gaussian4D:
        return Gaussian4D(
            center=self.centers[index],
            rotation=self.rotations[index],
            scale=self.scales[index],
            opacity=float(self.opacities[index]),
            sh=self.sh[index],
            velocity=self.velocities[index],
            dynamic=bool(self.dynamic[index]),
            t_start=self.t_start,
            t_end=self.t_end,
        )

    def __iter__(self) -> Iterator[Gaussian4D]:
        for index in range(len(self)):
            yield self[index]

    @property
    def sh_degree(self) -> int:
        return sh_degree_for(self.sh.shape[1])

    def replace(self, **changes: Any) -> GaussianSet:
        return replace(self, **changes)

    def select(self, keep: ArrayLike) -> GaussianSet:
        mask = np.asarray(keep)
        return self.replace(
            centers=self.centers[mask],
            rotations=self.rotations[mask],
            scales=self.scales[mask],
            opacities=self.opacities[mask],
            sh=self.sh[mask],
            velocities=self.velocities[mask],
            dynamic=self.dynamic[mask],
        )

    def centers_at(self, t: float) -> np.ndarray:
        if t < self.t_start or t > self.t_end:
            raise SegmentTimeError(
                f"Time {t} is outside the set span [{self.t_start}, {self.t_end}]."
            )
        elapsed = t - self.t_start
        moved = self.centers + self.velocities * elapsed
        return np.where(self.dynamic[:, None], moved, self.centers)


@dataclass(frozen=True, slots=True, eq=False)
class SceneSegment:
    t_start: float
    t_end: float
    anchor_pose: SE3
    gaussians: GaussianSet
    velocity_sources: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.t_start < self.t_end:
            raise GaussianError(f"Empty segment span [{self.t_start}, {self.t_end}].")
        if (self.gaussians.t_start, self.gaussians.t_end) != (self.t_start, self.t_end):
            raise GaussianError(
                f"Kernel span [{self.gaussians.t_start}, {self.gaussians.t_end}] does not "
                f"match segment span [{self.t_start}, {self.t_end}]."
            )

    def __len__(self) -> int:
        return len(self.gaussians)


@dataclass(frozen=True, slots=True, eq=False)
class Scene4D:
    segments: tuple[SceneSegment, ...]
    rig: CameraRig
    pose_times: tuple[float, ...]
    poses: tuple[SE3, ...]

    def __post_init__(self) -> None:
        segments = tuple(self.segments)
        if not segments:
            raise GaussianError("A scene needs at least one segment.")
        for previous, current in zip(segments, segments[1:]):
            if previous.t_end != current.t_start:
                raise GaussianError(
                    f"Segments are not contiguous: {previous.t_end} != {current.t_start}."
                )
        times = tuple(float(t) for t in self.pose_times)
        poses = tuple(self.poses)
        if len(times) != len(poses) or not times:
            raise GaussianError("Ego poses and their timestamps must match and be non-empty.")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise GaussianError("Ego pose timestamps must be strictly increasing.")
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "pose_times", times)
        object.__setattr__(self, "poses", poses)

    @property
    def timeline(self) -> tuple[float, float]:
        return self.segments[0].t_start, self.segments[-1].t_end

    def segment_index(self, t: float) -> int:
        start, end = self.timeline
        if t < start or t > end:
            raise SegmentTimeError(f"Time {t} is outside the scene timeline [{start}, {end}].")
        for index, segment in enumerate(self.segments):
            if segment.t_start <= t < segment.t_end:
                return index
        return len(self.segments) - 1

    def segment_at(self, t: float) -> SceneSegment:
        return self.segments[self.segment_index(t)]

    def pose_at(self, t: float) -> SE3:
        return interpolate_pose(t, self.pose_times, self.poses)

    def kernel_count(self) -> int:
        return sum(len(segment) for segment in self.segments)
