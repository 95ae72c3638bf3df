from .exceptions import Splat4dError
from .fuse import aggregate_scene, align_and_fuse
from .gauss import Gaussian4D, GaussianSet, Scene4D, SceneSegment
from .geom import SE3, CameraEntry, CameraRig, Intrinsics
from .pipeline import ScenePipeline
from .render import RenderOutput, RenderRequest, render

__all__ = [
    "CameraEntry",
    "CameraRig",
    "Gaussian4D",
    "GaussianSet",
    "Intrinsics",
    "RenderOutput",
    "RenderRequest",
    "SE3",
    "Scene4D",
    "SceneSegment",
    "ScenePipeline",
    "Splat4dError",
    "aggregate_scene",
    "align_and_fuse",
    "render",
]
