"""Tile-parallel CPU splatting of time-conditioned Gaussian scenes."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import logging
import math
from typing import Sequence

import numpy as np

from .exceptions import RenderError
from .gauss import GaussianSet, Scene4D, sh_to_rgb
from .geom import SE3, CameraEntry, offset_pose, quaternion_multiply, quaternion_to_matrix

logger = logging.getLogger(__name__)

TILE_SIZE = 16
NEAR_PLANE = 0.01
COVARIANCE_DILATION = 0.3
ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
KERNEL_CHUNK = 256
LATERAL_OFFSETS = (0.0, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0)


@dataclass(frozen=True, slots=True)
class RenderRequest:
    time: float
    camera: CameraEntry
    ego_pose: SE3
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    dynamic_only: bool = False
    tile_size: int = TILE_SIZE

    def __post_init__(self) -> None:
        if len(self.background) != 3 or not all(0.0 <= c <= 1.0 for c in self.background):
            raise RenderError(f"Background must be three values in [0, 1], got {self.background}.")
        if self.tile_size < 1:
            raise RenderError(f"Tile size must be positive, got {self.tile_size}.")

    @property
    def size(self) -> tuple[int, int]:
        """(height, width) of the output raster."""
        return self.camera.intrinsics.height, self.camera.intrinsics.width


@dataclass(slots=True)
class RasterDiagnostics:
    kernels_in: int = 0
    culled_behind: int = 0
    skipped_singular: int = 0
    tile_pairs: int = 0


@dataclass(frozen=True, slots=True, eq=False)
class RenderOutput:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    diagnostics: RasterDiagnostics = field(default_factory=RasterDiagnostics)


@dataclass(frozen=True, slots=True, eq=False)
class KernelsAtTime:
    """Kernels advanced to one time and expressed in the world frame.

    sh coefficients stay in the anchor ego frame; sh_frame rotates anchor
    directions into world directions.
    """

    centers: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_frame: np.ndarray
    dynamic: np.ndarray

    def __len__(self) -> int:
        return int(self.opacities.shape[0])


def lateral_offsets() -> tuple[float, ...]:
    """Lateral ego displacements (meters) of the novel-view sweep."""
    return LATERAL_OFFSETS


def kernels_from_set(gaussians: GaussianSet, anchor: SE3, t: float) -> KernelsAtTime:
    local_centers = gaussians.centers_at(t)
    return KernelsAtTime(
        centers=anchor.apply(local_centers),
        rotations=quaternion_multiply(anchor.quaternion(), gaussians.rotations),
        scales=gaussians.scales,
        opacities=gaussians.opacities,
        sh=gaussians.sh,
        sh_frame=anchor.rotation,
        dynamic=gaussians.dynamic,
    )


def select_and_advance(scene: Scene4D, t: float) -> KernelsAtTime:
    segment = scene.segment_at(t)
    return kernels_from_set(segment.gaussians, segment.anchor_pose, t)


@dataclass(frozen=True, slots=True, eq=False)
class _Splats:
    """Screen-space kernels in front-to-back order."""

    means: np.ndarray
    conics: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    depths: np.ndarray
    tile_kernels: np.ndarray
    tile_ranges: np.ndarray


def _project_kernels(
    kernels: KernelsAtTime,
    request: RenderRequest,
    diagnostics: RasterDiagnostics,
) -> _Splats:
    K = request.camera.intrinsics
    camera_to_world = request.ego_pose @ request.camera.extrinsic
    world_to_camera = camera_to_world.inverse()
    view = world_to_camera.rotation

    points = world_to_camera.apply(kernels.centers)
    z = points[:, 2]
    in_front = z > NEAR_PLANE
    diagnostics.culled_behind = int((~in_front).sum())

    keep = np.nonzero(in_front)[0]
    p = points[keep]
    x, y, z = p[:, 0], p[:, 1], p[:, 2]

    R = quaternion_to_matrix(kernels.rotations[keep])
    scaled = R * (kernels.scales[keep] ** 2)[:, None, :]
    cov3d = scaled @ np.swapaxes(R, 1, 2)

    J = np.zeros((keep.size, 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / (z * z)
    M = J @ view
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    a = cov2d[:, 0, 0] + COVARIANCE_DILATION
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + COVARIANCE_DILATION
    det = a * c - b * b

    regular = det > 0.0
    diagnostics.skipped_singular = int((~regular).sum())
    if diagnostics.skipped_singular:
        logger.warning(
            "Skipped %d kernels with a singular screen-space covariance.",
            diagnostics.skipped_singular,
        )
    keep, x, y, z = keep[regular], x[regular], y[regular], z[regular]
    a, b, c, det = a[regular], b[regular], c[regular], det[regular]

    conics = np.stack([c / det, -b / det, a / det], axis=-1)
    mid = 0.5 * (a + c)
    lambda_max = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radii = np.ceil(3.0 * np.sqrt(lambda_max))
    means = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=-1)

    camera_origin = camera_to_world.translation
    directions = kernels.centers[keep] - camera_origin
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    local_directions = directions @ kernels.sh_frame
    colors = sh_to_rgb(kernels.sh[keep], local_directions)

    order = np.lexsort((keep, z))
    means, conics, colors, radii, z = means[order], conics[order], colors[order], radii[order], z[order]
    opacities = kernels.opacities[keep][order]

    tile_kernels, tile_ranges = _assign_tiles(means, radii, K.width, K.height, request.tile_size)
    diagnostics.tile_pairs = int(tile_kernels.size)
    return _Splats(means, conics, colors, opacities, z, tile_kernels, tile_ranges)


def _assign_tiles(
    means: np.ndarray,
    radii: np.ndarray,
    width: int,
    height: int,
    tile_size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Duplicate each splat once per overlapped tile, grouped by tile.

    Returns the kernel index of every (tile, kernel) pair, sorted by tile
    with depth order kept inside a tile, and the [start, end) range of each
    tile in that array.
    """
    tiles_x = math.ceil(width / tile_size)
    tiles_y = math.ceil(height / tile_size)
    x_min = np.clip(np.floor((means[:, 0] - radii) / tile_size), 0, tiles_x).astype(np.int64)
    y_min = np.clip(np.floor((means[:, 1] - radii) / tile_size), 0, tiles_y).astype(np.int64)
    x_max = np.clip(np.floor((means[:, 0] + radii) / tile_size) + 1, 0, tiles_x).astype(np.int64)
    y_max = np.clip(np.floor((means[:, 1] + radii) / tile_size) + 1, 0, tiles_y).astype(np.int64)
    spans_x = np.maximum(x_max - x_min, 0)
    counts = spans_x * np.maximum(y_max - y_min, 0)

    total = int(counts.sum())
    kernel_of_pair = np.repeat(np.arange(means.shape[0]), counts)
    first_pair = np.repeat(np.cumsum(counts) - counts, counts)
    offset = np.arange(total) - first_pair
    span = spans_x[kernel_of_pair]
    tile_x = x_min[kernel_of_pair] + offset % np.maximum(span, 1)
    tile_y = y_min[kernel_of_pair] + offset // np.maximum(span, 1)
    tile_ids = tile_y * tiles_x + tile_x

    by_tile = np.argsort(tile_ids, kind="stable")
    sorted_tiles = tile_ids[by_tile]
    bounds = np.arange(tiles_x * tiles_y + 1)
    ranges = np.searchsorted(sorted_tiles, bounds, side="left")
    return kernel_of_pair[by_tile], ranges


def _render_tile(
    tile: int,
    splats: _Splats,
    width: int,
    height: int,
    tile_size: int,
    rgb: np.ndarray,
    transmittance: np.ndarray,
    depth: np.ndarray,
) -> None:
    tiles_x = math.ceil(width / tile_size)
    u0 = (tile % tiles_x) * tile_size
    v0 = (tile // tiles_x) * tile_size
    u1 = min(u0 + tile_size, width)
    v1 = min(v0 + tile_size, height)
    vv, uu = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1), indexing="ij")
    px = uu.reshape(-1).astype(np.float64)
    py = vv.reshape(-1).astype(np.float64)

    T = np.ones(px.size)
    done = np.zeros(px.size, dtype=bool)
    color_sum = np.zeros((px.size, 3))
    depth_sum = np.zeros(px.size)

    start, end = splats.tile_ranges[tile], splats.tile_ranges[tile + 1]
    members = splats.tile_kernels[start:end]
    for chunk_start in range(0, members.size, KERNEL_CHUNK):
        if done.all():
            break
        chunk = members[chunk_start : chunk_start + KERNEL_CHUNK]
        dx = splats.means[chunk, 0][:, None] - px[None, :]
        dy = splats.means[chunk, 1][:, None] - py[None, :]
        conic = splats.conics[chunk]
        power = (
            -0.5 * (conic[:, 0:1] * dx * dx + conic[:, 2:3] * dy * dy)
            - conic[:, 1:2] * dx * dy
        )
        A = np.minimum(ALPHA_MAX, splats.opacities[chunk][:, None] * np.exp(np.minimum(power, 0.0)))
        A[(power > 0.0) | (A < ALPHA_MIN)] = 0.0

        survive = np.cumprod(1.0 - A, axis=0)
        T_after = T[None, :] * survive
        T_before = np.vstack([T[None, :], T_after[:-1]])
        include = (T_after >= TRANSMITTANCE_MIN) & ~done[None, :]

        weights = A * T_before * include
        color_sum += (weights[:, :, None] * splats.colors[chunk][:, None, :]).sum(axis=0)
        depth_sum += (weights * splats.depths[chunk][:, None]).sum(axis=0)

        T = np.where(done, T, T * np.prod(np.where(include, 1.0 - A, 1.0), axis=0))
        done |= T_after[-1] < TRANSMITTANCE_MIN

    shape = (v1 - v0, u1 - u0)
    rgb[v0:v1, u0:u1] = color_sum.reshape(shape + (3,))
    transmittance[v0:v1, u0:u1] = T.reshape(shape)
    depth[v0:v1, u0:u1] = depth_sum.reshape(shape)


def rasterize(
    kernels: KernelsAtTime,
    request: RenderRequest,
    max_workers: int = 1,
) -> RenderOutput:
    """Front-to-back EWA splatting; identical output for any worker count."""
    if request.dynamic_only:
        kernels = _only_dynamic(kernels)
    height, width = request.size
    diagnostics = RasterDiagnostics(kernels_in=len(kernels))
    background = np.asarray(request.background, dtype=np.float64)

    rgb = np.zeros((height, width, 3))
    transmittance = np.ones((height, width))
    depth_sum = np.zeros((height, width))

    if len(kernels):
        splats = _project_kernels(kernels, request, diagnostics)
        tile_count = splats.tile_ranges.size - 1
        busy = [t for t in range(tile_count) if splats.tile_ranges[t + 1] > splats.tile_ranges[t]]

        def _work(tile: int) -> None:
            _render_tile(tile, splats, width, height, request.tile_size, rgb, transmittance, depth_sum)

        if max_workers > 1 and len(busy) > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(_work, busy))
        else:
            for tile in busy:
                _work(tile)

    alpha = 1.0 - transmittance
    depth = depth_sum / np.maximum(alpha, 1e-8)
    image = np.clip(rgb + transmittance[..., None] * background, 0.0, 1.0)
    logger.debug(
        "Rasterized %d kernels: %d behind camera, %d singular, %d tile pairs.",
        diagnostics.kernels_in,
        diagnostics.culled_behind,
        diagnostics.skipped_singular,
        diagnostics.tile_pairs,
    )
    return RenderOutput(rgb=image, alpha=alpha, depth=depth, diagnostics=diagnostics)


def _only_dynamic(kernels: KernelsAtTime) -> KernelsAtTime:
    keep = kernels.dynamic
    return KernelsAtTime(
        centers=kernels.centers[keep],
        rotations=kernels.rotations[keep],
        scales=kernels.scales[keep],
        opacities=kernels.opacities[keep],
        sh=kernels.sh[keep],
        sh_frame=kernels.sh_frame,
        dynamic=kernels.dynamic[keep],
    )


def render(scene: Scene4D, request: RenderRequest, max_workers: int = 1) -> RenderOutput:
    return rasterize(select_and_advance(scene, request.time), request, max_workers=max_workers)


def render_sweep(
    scene: Scene4D,
    request: RenderRequest,
    offsets: Sequence[float] = LATERAL_OFFSETS,
    max_workers: int = 1,
) -> list[tuple[float, RenderOutput]]:
    """Render the same time from laterally displaced ego poses (ego +y is left)."""
    results = []
    for dy in offsets:
        shifted = replace(request, ego_pose=offset_pose(request.ego_pose, dy=dy))
        results.append((dy, render(scene, shifted, max_workers=max_workers)))
    return results
