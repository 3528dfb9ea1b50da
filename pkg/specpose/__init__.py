"""
specpose - 6D pose tooling for specular, symmetric objects

Provides a Fibonacci-sphere pose codebook, sharp-edge rendering, point-matching
losses with analytic gradients, a classical pose refiner, and ADD / ADD-S
evaluation with the ablation drivers built on them.
"""

from .codebook import (
    RoughPose,
    SymmetrySpec,
    ViewpointCodebook,
    build_codebook,
    canonicalize,
    depth_from_bbox,
    symmetric_geodesic,
)
from .errors import (
    CodebookError,
    DatasetError,
    GeometryError,
    RefineError,
    RenderError,
    SpecPoseError,
    ValidationError,
)
from .geometry import (
    CameraIntrinsics,
    Mesh,
    PointSet,
    Pose,
    compose,
    invert,
    project,
    sample_surface_points,
    transform_points,
)
from .harness import (
    DatasetEntry,
    EvalConfig,
    EvalReport,
    MeshRegistry,
    ablate_losses,
    evaluate,
    load_dataset,
)
from .losses import (
    LossValue,
    PoseGradient,
    add_metric,
    adds_metric,
    grad_l_3dpm,
    grad_l_cpm,
    l_3dpm,
    l_cpm,
    success,
)
from .refine import (
    NoiseConfig,
    RefineOptions,
    RefineResult,
    coarse_match,
    iterative_refine,
    perturb_pose,
    refine_pose,
)
from .render import (
    RefinerInput,
    RenderBuffers,
    SharpEdgeSet,
    assemble_refiner_input,
    crop_and_resize,
    extract_sharp_edges,
    rasterize,
    render_edges,
)

__version__ = "1.0.0"
__all__ = [
    "CameraIntrinsics",
    "CodebookError",
    "DatasetEntry",
    "DatasetError",
    "EvalConfig",
    "EvalReport",
    "GeometryError",
    "LossValue",
    "Mesh",
    "MeshRegistry",
    "NoiseConfig",
    "PointSet",
    "Pose",
    "PoseGradient",
    "RefineError",
    "RefineOptions",
    "RefineResult",
    "RefinerInput",
    "RenderBuffers",
    "RenderError",
    "RoughPose",
    "SharpEdgeSet",
    "SpecPoseError",
    "SymmetrySpec",
    "ValidationError",
    "ViewpointCodebook",
    "ablate_losses",
    "add_metric",
    "adds_metric",
    "assemble_refiner_input",
    "build_codebook",
    "canonicalize",
    "coarse_match",
    "compose",
    "crop_and_resize",
    "depth_from_bbox",
    "evaluate",
    "extract_sharp_edges",
    "grad_l_3dpm",
    "grad_l_cpm",
    "invert",
    "iterative_refine",
    "l_3dpm",
    "l_cpm",
    "load_dataset",
    "perturb_pose",
    "project",
    "rasterize",
    "refine_pose",
    "render_edges",
    "sample_surface_points",
    "success",
    "symmetric_geodesic",
    "transform_points",
]
