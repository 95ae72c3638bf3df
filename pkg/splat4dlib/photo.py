"""Projection warping, photometric losses and image metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
from numpy.typing import ArrayLike
from scipy.ndimage import binary_erosion, gaussian_filter

from .exceptions import GaussianError, ImageError, LossConfigError, ShapeError
from .gauss import GaussianSet
from .geom import SE3, Intrinsics, backproject, grid_to_pixel, normalize_to_grid
from .utils import load_json

LOSS_EPSILON = 1e-8
SNAP_TOLERANCE = 1e-6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0

PerceptualLoss = Callable[[np.ndarray, np.ndarray], float]


@dataclass(frozen=True, slots=True, eq=False)
class WarpResult:
    warped_image: np.ndarray
    mask: np.ndarray
    grid: np.ndarray


@dataclass(frozen=True, slots=True)
class LossWeights:
    l1: float = 0.85
    ssim: float = 0.15
    l2: float = 1.0
    percep: float = 0.05
    scale: float = 0.01
    opacity: float = 0.01

    def __post_init__(self) -> None:
        for item in fields(self):
            value = getattr(self, item.name)
            if not np.isfinite(value) or value < 0.0:
                raise LossConfigError(f"Loss weight '{item.name}' must be finite and >= 0, got {value}.")

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LossWeights:
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise LossConfigError(f"Unknown loss weights: {', '.join(unknown)}.")
        return cls(**{key: float(value) for key, value in data.items()})


def load_loss_weights(path: Path) -> LossWeights:
    if not path.exists():
        raise LossConfigError(f"Loss weights file not found: {path}")
    return LossWeights.from_dict(load_json(path))


@dataclass(frozen=True, slots=True)
class ProjectLossTerms:
    l1: float
    ssim: float
    combined: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass(frozen=True, slots=True)
class LossBreakdown:
    render: float
    project: float
    norm: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def _snap(coords: np.ndarray) -> np.ndarray:
    nearest = np.round(coords)
    return np.where(np.abs(coords - nearest) <= SNAP_TOLERANCE, nearest, coords)


def bilinear_sample(image: ArrayLike, pixels: ArrayLike) -> np.ndarray:
    """Sample image (H, W, C) at pixel coordinates (N, 2) with pixel centers at integers.

    Coordinates outside the image read the nearest edge pixel; callers mask them.
    """
    source = np.asarray(image, dtype=np.float64)
    height, width = source.shape[:2]
    coords = _snap(np.asarray(pixels, dtype=np.float64))
    coords = np.where(np.isfinite(coords), coords, 0.0)
    x, y = coords[:, 0], coords[:, 1]

    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = (x - x0)[:, None]
    wy = (y - y0)[:, None]
    xi0 = np.clip(x0, 0, width - 1).astype(np.int64)
    yi0 = np.clip(y0, 0, height - 1).astype(np.int64)
    xi1 = np.clip(x0 + 1, 0, width - 1).astype(np.int64)
    yi1 = np.clip(y0 + 1, 0, height - 1).astype(np.int64)

    top = source[yi0, xi0] * (1.0 - wx) + source[yi0, xi1] * wx
    bottom = source[yi1, xi0] * (1.0 - wx) + source[yi1, xi1] * wx
    return top * (1.0 - wy) + bottom * wy


def warp(
    source: ArrayLike,
    target_depth: ArrayLike,
    K: Intrinsics,
    T_t_to_s: SE3,
) -> WarpResult:
    """Resample the source view into the target view using target depth.

    Pixels whose reprojection is non-finite, behind the source camera or
    outside the source raster are masked out and set to zero.
    """
    image = np.asarray(source, dtype=np.float64)
    depth = np.asarray(target_depth, dtype=np.float64)
    height, width = K.height, K.width
    if depth.shape != (height, width) or image.shape[:2] != (height, width):
        raise ShapeError(
            f"Warp inputs {image.shape} and {depth.shape} do not match the {width}x{height} camera."
        )

    u, v = K.pixel_grid()
    points = T_t_to_s.apply(backproject(np.stack([u, v], axis=-1), depth.reshape(-1), K))
    z = points[:, 2]
    in_front = z > 0.0
    safe_z = np.where(in_front, z, 1.0)
    projected = np.stack(
        [K.fx * points[:, 0] / safe_z + K.cx, K.fy * points[:, 1] / safe_z + K.cy],
        axis=-1,
    )
    projected = np.where(in_front[:, None], _snap(projected), np.nan)

    grid = normalize_to_grid(projected, width, height)
    mask = np.all(np.isfinite(grid), axis=-1) & np.all(np.abs(grid) <= 1.0, axis=-1) & in_front

    channels = image.reshape(height, width, -1)
    sampled = bilinear_sample(channels, grid_to_pixel(grid, width, height))
    sampled = np.where(mask[:, None], sampled, 0.0)
    return WarpResult(
        warped_image=sampled.reshape(image.shape),
        mask=mask.reshape(height, width).astype(np.uint8),
        grid=grid.reshape(height, width, 2),
    )


def _as_channels(image: ArrayLike) -> np.ndarray:
    array = np.asarray(image, dtype=np.float64)
    return array[..., None] if array.ndim == 2 else array


def ssim_map(a: ArrayLike, b: ArrayLike) -> np.ndarray:
    """Per-pixel SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    x = _as_channels(a)
    y = _as_channels(b)
    if x.shape != y.shape:
        raise ShapeError(f"SSIM inputs differ in shape: {x.shape} vs {y.shape}.")
    height, width = x.shape[:2]
    if height < SSIM_WINDOW or width < SSIM_WINDOW:
        raise ImageError(
            f"Image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window."
        )
    radius = SSIM_WINDOW // 2
    truncate = (radius + 0.25) / SSIM_SIGMA

    def _blur(channel: np.ndarray) -> np.ndarray:
        return gaussian_filter(channel, sigma=SSIM_SIGMA, mode="reflect", truncate=truncate)

    maps = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mu_x, mu_y = _blur(xc), _blur(yc)
        sigma_x = _blur(xc * xc) - mu_x * mu_x
        sigma_y = _blur(yc * yc) - mu_y * mu_y
        sigma_xy = _blur(xc * yc) - mu_x * mu_y
        numerator = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
        denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
        maps.append(numerator / denominator)
    return np.mean(maps, axis=0)


def ssim(a: ArrayLike, b: ArrayLike) -> float:
    return float(ssim_map(a, b).mean())


def psnr(a: ArrayLike, b: ArrayLike) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"PSNR inputs differ in shape: {x.shape} vs {y.shape}.")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * float(np.log10(1.0 / mse)))


def project_loss_terms(
    warped: ArrayLike,
    target: ArrayLike,
    mask: ArrayLike,
    weights: LossWeights,
) -> ProjectLossTerms:
    x = _as_channels(warped)
    y = _as_channels(target)
    valid = np.asarray(mask).astype(bool)
    if x.shape != y.shape or valid.shape != x.shape[:2]:
        raise ShapeError(
            f"Loss inputs disagree: warped {x.shape}, target {y.shape}, mask {valid.shape}."
        )

    per_pixel = np.abs(x - y).mean(axis=-1)
    l1 = float(np.where(valid, per_pixel, 0.0).sum() / (valid.sum() + LOSS_EPSILON))

    ssim_term = 0.0
    if weights.ssim > 0.0:
        support = binary_erosion(
            valid,
            structure=np.ones((SSIM_WINDOW, SSIM_WINDOW), dtype=bool),
            border_value=1,
        )
        dissimilarity = np.where(support, 1.0 - ssim_map(x, y), 0.0)
        ssim_term = float(dissimilarity.sum() / (support.sum() + LOSS_EPSILON))

    combined = weights.l1 * l1 + weights.ssim * ssim_term
    return ProjectLossTerms(l1=l1, ssim=ssim_term, combined=combined)


def masked_photometric_loss(
    warped: ArrayLike,
    target: ArrayLike,
    mask: ArrayLike,
    weights: LossWeights,
) -> float:
    return project_loss_terms(warped, target, mask, weights).combined


def norm_loss(gaussians: GaussianSet, weights: LossWeights) -> float:
    if len(gaussians) == 0:
        raise GaussianError("Norm loss needs at least one kernel.")
    scale_term = float(np.linalg.norm(gaussians.scales, axis=1).mean())
    opacity_term = float(np.abs(gaussians.opacities).mean())
    return weights.scale * scale_term + weights.opacity * opacity_term


def l2_render_loss(rendered: ArrayLike, target: ArrayLike) -> float:
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"Render loss inputs differ in shape: {x.shape} vs {y.shape}.")
    return float(np.mean((x - y) ** 2))


def total_loss(
    rendered: ArrayLike,
    target: ArrayLike,
    warp_result: WarpResult,
    warp_target: ArrayLike,
    gaussians: GaussianSet,
    weights: LossWeights,
    perceptual: PerceptualLoss | None = None,
) -> LossBreakdown:
    """Render + project + norm losses; a perceptual callable is needed when its weight is set."""
    if weights.percep > 0.0 and perceptual is None:
        raise LossConfigError(
            "Perceptual weight is non-zero but no perceptual loss was supplied; "
            "pass one or set 'percep' to 0."
        )
    render_term = weights.l2 * l2_render_loss(rendered, target)
    if perceptual is not None and weights.percep > 0.0:
        render_term += weights.percep * float(
            perceptual(np.asarray(rendered, dtype=np.float64), np.asarray(target, dtype=np.float64))
        )
    project_term = masked_photometric_loss(
        warp_result.warped_image, warp_target, warp_result.mask, weights
    )
    norm_term = norm_loss(gaussians, weights)
    return LossBreakdown(
        render=render_term,
        project=project_term,
        norm=norm_term,
        total=render_term + project_term + norm_term,
    )
