"""Temporal alignment, fusion and multi-segment aggregation."""

from __future__ import annotations

from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
import logging
import threading
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike

from .build import ContextFrame, build_context_frame
from .dynamics import (
    InstanceVelocity,
    apply_flow,
    estimate_instance_velocities,
    flatten_masks,
    frame_flow,
)
from .exceptions import FusionError
from .gauss import GaussianSet, Scene4D, SceneSegment, rotate_sh
from .geom import SE3, CameraRig, interpolate_pose, quaternion_multiply

logger = logging.getLogger(__name__)

FrameBuilder = Callable[[int], GaussianSet]


def spatial_align(gaussians: GaussianSet, T: SE3) -> GaussianSet:
    """Move kernels into another ego frame; scale and opacity are frame-free."""
    return gaussians.replace(
        centers=T.apply(gaussians.centers),
        rotations=quaternion_multiply(T.quaternion(), gaussians.rotations),
        sh=rotate_sh(gaussians.sh, T.rotation),
        velocities=T.rotate(gaussians.velocities),
    )


def rewind_dynamic(
    gaussians: GaussianSet,
    dt: float,
    velocities: ArrayLike | None = None,
) -> GaussianSet:
    """Move dynamic centers back by velocity * dt; static kernels are untouched.

    velocities overrides the stored per-kernel velocities for the
    displacement only; the stored velocities are kept.
    """
    v = gaussians.velocities if velocities is None else np.asarray(velocities, dtype=np.float64)
    rewound = gaussians.centers - v * dt
    centers = np.where(gaussians.dynamic[:, None], rewound, gaussians.centers)
    return gaussians.replace(centers=centers)


def align_and_fuse(
    g_Ts: GaussianSet,
    g_Ts1: GaussianSet,
    ego_Ts: SE3,
    ego_Ts1: SE3,
    t_s: float,
    t_s1: float,
    velocity_sources: Mapping[int, str] | None = None,
) -> SceneSegment:
    if not t_s < t_s1:
        raise FusionError(f"Segment start {t_s} must precede its end {t_s1}.")
    if g_Ts.t_start != t_s:
        raise FusionError(f"First frame is anchored at {g_Ts.t_start}, expected {t_s}.")
    if g_Ts1.t_start != t_s1:
        raise FusionError(f"Second frame is anchored at {g_Ts1.t_start}, expected {t_s1}.")
    if g_Ts.sh_degree != g_Ts1.sh_degree:
        raise FusionError(
            f"Frames carry different SH degrees ({g_Ts.sh_degree} and {g_Ts1.sh_degree})."
        )

    T = ego_Ts.inverse() @ ego_Ts1
    aligned = spatial_align(g_Ts1, T)
    rewound = rewind_dynamic(aligned, t_s1 - t_s)

    fused = GaussianSet.concatenate(
        [
            g_Ts.replace(t_start=t_s, t_end=t_s1),
            rewound.replace(t_start=t_s, t_end=t_s1),
        ]
    )
    return SceneSegment(
        t_start=t_s,
        t_end=t_s1,
        anchor_pose=ego_Ts,
        gaussians=fused,
        velocity_sources=dict(velocity_sources or {}),
    )


class FrameCache:
    """Builds each context frame at most once and hands out the shared result.

    The lock only guards the table of futures; building runs outside it, so
    different frames build concurrently while callers of the same frame wait
    on its future.
    """

    def __init__(self, builder: FrameBuilder) -> None:
        self._builder = builder
        self._frames: dict[int, Future[GaussianSet]] = {}
        self._lock = threading.Lock()
        self._build_count = 0
        self._hits = 0

    def get(self, index: int) -> GaussianSet:
        with self._lock:
            pending = self._frames.get(index)
            if pending is None:
                pending = self._frames[index] = Future()
                self._build_count += 1
                owner = True
            else:
                self._hits += 1
                owner = False
        if not owner:
            return pending.result()
        try:
            built = self._builder(index)
        except BaseException as exc:
            pending.set_exception(exc)
            raise
        pending.set_result(built)
        logger.debug("Built context frame %d (%d kernels).", index, len(built))
        return built

    @property
    def build_count(self) -> int:
        return self._build_count

    @property
    def hits(self) -> int:
        return self._hits


@dataclass(frozen=True, slots=True, eq=False)
class AggregationResult:
    scene: Scene4D
    build_count: int
    cache_hits: int
    velocities: tuple[dict[int, InstanceVelocity], ...]


def frame_spans(timestamps: Sequence[float]) -> list[tuple[float, float]]:
    """Build span of each context frame; the last one reuses the previous gap."""
    stamps = [float(t) for t in timestamps]
    if len(stamps) < 2:
        raise FusionError(f"At least two context frames are required, got {len(stamps)}.")
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise FusionError(f"Context timestamps must be strictly increasing, got {stamps}.")
    spans = list(zip(stamps, stamps[1:]))
    spans.append((stamps[-1], stamps[-1] + (stamps[-1] - stamps[-2])))
    return spans


def flow_segment(
    frame_s: ContextFrame,
    frame_s1: ContextFrame,
    built_s: GaussianSet,
    built_s1: GaussianSet,
    ego_Ts: SE3,
    ego_Ts1: SE3,
    rig: CameraRig,
) -> tuple[GaussianSet, GaussianSet, dict[int, InstanceVelocity]]:
    """Assign segment velocities to both frames.

    Velocities are estimated in the T_s ego frame. The second frame's kernels
    live in the T_{s+1} ego frame, so they receive the velocities rotated
    into that frame and alignment rotates them back.
    """
    estimates = estimate_instance_velocities(
        frame_s, frame_s1, built_s, built_s1, ego_Ts, ego_Ts1, rig
    )
    in_s = {instance: estimate.velocity for instance, estimate in estimates.items()}
    T = ego_Ts.inverse() @ ego_Ts1
    in_s1 = {instance: T.rotation.T @ velocity for instance, velocity in in_s.items()}
    g_Ts = apply_flow(built_s, frame_flow(in_s, frame_s, rig), flatten_masks(frame_s, rig))
    g_Ts1 = apply_flow(built_s1, frame_flow(in_s1, frame_s1, rig), flatten_masks(frame_s1, rig))
    return g_Ts, g_Ts1, estimates


def aggregate_scene(
    frames: Sequence[ContextFrame],
    rig: CameraRig,
    pose_times: Sequence[float],
    poses: Sequence[SE3],
    builder: FrameBuilder | None = None,
    max_workers: int = 1,
) -> AggregationResult:
    """Fuse N context frames into N-1 contiguous segments.

    builder(k) returns the built, flow-free set of frame k spanning
    frame_spans(...)[k]; it defaults to build_context_frame.
    """
    spans = frame_spans([frame.timestamp for frame in frames])

    def _build_frame(index: int) -> GaussianSet:
        return build_context_frame(frames[index], rig, *spans[index])

    cache = FrameCache(builder or _build_frame)
    egos = [interpolate_pose(frame.timestamp, pose_times, poses) for frame in frames]

    def _segment(index: int) -> tuple[SceneSegment, dict[int, InstanceVelocity]]:
        frame_s, frame_s1 = frames[index], frames[index + 1]
        g_Ts, g_Ts1, estimates = flow_segment(
            frame_s,
            frame_s1,
            cache.get(index),
            cache.get(index + 1),
            egos[index],
            egos[index + 1],
            rig,
        )
        segment = align_and_fuse(
            g_Ts,
            g_Ts1,
            egos[index],
            egos[index + 1],
            frame_s.timestamp,
            frame_s1.timestamp,
            velocity_sources={k: v.source for k, v in estimates.items()},
        )
        logger.info(
            "Segment [%s, %s]: %d kernels, %d dynamic.",
            segment.t_start,
            segment.t_end,
            len(segment),
            int(segment.gaussians.dynamic.sum()),
        )
        return segment, estimates

    indices = range(len(frames) - 1)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(_segment, indices))
    else:
        results = [_segment(index) for index in indices]

    scene = Scene4D(
        segments=tuple(segment for segment, _ in results),
        rig=rig,
        pose_times=tuple(pose_times),
        poses=tuple(poses),
    )
    return AggregationResult(
        scene=scene,
        build_count=cache.build_count,
        cache_hits=cache.hits,
        velocities=tuple(estimates for _, estimates in results),
    )
