"""Pose refinement, coarse template matching and the initial-pose noise model.

Refinement is first-order descent in the left-perturbation tangent chart
with an Armijo backtracking line search. The rotation block of the step is
preconditioned by ``1 / s**2`` where ``s`` is the RMS radius of the model
points, which puts rotation and translation steps on the same metric scale.
"""

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .codebook import RoughPose, ViewpointCodebook
from .errors import RefineError, ValidationError
from .geometry import (
    CameraIntrinsics,
    Mesh,
    PointSet,
    Pose,
    as_points,
    exp_rotation,
    retract,
    sample_surface_points,
)
from .losses import ANCHORS, LOSS_KINDS, PointMatchingObjective, rms_radius
from .render import (
    REFINER_SIZE,
    BBox,
    RenderBuffers,
    RefinerInput,
    SharpEdgeSet,
    assemble_refiner_input,
    crop_and_resize,
    extract_sharp_edges,
    mask_bbox,
    rasterize,
    render_view,
)
from .utils import FileUtils

logger = logging.getLogger(__name__)

TraceEntry = Tuple[int, int, float]


@dataclass(frozen=True)
class RefineOptions:
    """Optimizer settings.

    ``outer_iterations`` only affects :func:`iterative_refine`; a single
    :func:`refine_pose` call is one outer iteration.
    """

    loss_kind: str = "l_cpm"
    max_inner_steps: int = 100
    step_init: float = 1.0
    armijo_c: float = 1e-4
    tol_grad: float = 1e-9
    outer_iterations: int = 4
    step_growth: float = 2.0
    max_backtracks: int = 50
    anchor: str = "gt"
    n_points: int = 500
    observation_noise: float = 0.0
    seed: int = 0
    precondition: bool = True
    edge_width: int = 1

    def __post_init__(self) -> None:
        if self.loss_kind not in LOSS_KINDS:
            raise ValidationError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.anchor not in ANCHORS:
            raise ValidationError(f"anchor must be one of {ANCHORS}, got {self.anchor!r}")
        if self.max_inner_steps <= 0:
            raise ValidationError("max_inner_steps must be positive")
        if not 0 < self.armijo_c < 1:
            raise ValidationError("armijo_c must lie in (0, 1)")
        if not self.tol_grad > 0:
            raise ValidationError("tol_grad must be positive")
        if not self.step_init > 0:
            raise ValidationError("step_init must be positive")
        if self.outer_iterations < 1:
            raise ValidationError("outer_iterations must be at least 1")
        if self.step_growth < 1:
            raise ValidationError("step_growth must be at least 1")
        if self.n_points <= 0:
            raise ValidationError("n_points must be positive")
        if self.observation_noise < 0:
            raise ValidationError("observation_noise must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RefineResult:
    final_pose: Pose
    loss_trace: List[TraceEntry] = field(default_factory=list)
    add_trace: List[float] = field(default_factory=list)
    converged: bool = False
    options: Optional[RefineOptions] = None
    inputs: List[RefinerInput] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "final_pose": self.final_pose.to_dict(),
            "converged": self.converged,
            "loss_trace": [
                {"outer": o, "inner": i, "loss": loss} for o, i, loss in self.loss_trace
            ],
            "add_trace": list(self.add_trace),
            "options": self.options.to_dict() if self.options else None,
        }

    def save_json(self, path: Union[str, Path]) -> Path:
        return FileUtils.write_json(self.to_dict(), path)

    def save_trace_csv(self, path: Union[str, Path]) -> Path:
        """One row per loss-trace entry; ``add`` is filled on the last row of
        each outer iteration (and on the initial row)."""
        path = Path(path)
        FileUtils.ensure_directory(path.parent)
        last_of_outer: Dict[int, int] = {}
        for row, (outer, _, _) in enumerate(self.loss_trace):
            last_of_outer[outer] = row
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["outer", "inner", "loss", "add"])
            for row, (outer, inner, loss) in enumerate(self.loss_trace):
                add: Any = ""
                if row == 0 and self.add_trace:
                    add = self.add_trace[0]
                elif last_of_outer.get(outer) == row and outer + 1 < len(self.add_trace):
                    add = self.add_trace[outer + 1]
                writer.writerow([outer, inner, f"{loss:.12g}", add])
        return path


def _correspondence_add(pose: Pose, model: np.ndarray, observed: np.ndarray) -> float:
    return float(np.linalg.norm(pose.apply(model) - observed, axis=1).mean())


def refine_pose(
    initial: Pose,
    gt_points: Union[PointSet, np.ndarray],
    model_points: Union[PointSet, np.ndarray],
    opts: Optional[RefineOptions] = None,
    outer_iter: int = 0,
) -> RefineResult:
    """Minimize the chosen loss of ``model_points`` against ``gt_points``.

    Args:
        initial: Starting pose.
        gt_points: Observed camera-frame points, index-aligned with the model.
        model_points: Object-frame samples.
        opts: Optimizer settings.
        outer_iter: Label written into the loss trace.

    Returns:
        RefineResult whose ``add_trace`` holds the correspondence ADD before
        and after the run.
    """
    opts = opts or RefineOptions()
    model = as_points(model_points)
    observed = as_points(gt_points)
    if len(model) == 0 or len(observed) == 0:
        raise RefineError("point sets must be non-empty")
    if model.shape != observed.shape:
        raise RefineError(f"point counts differ: {len(model)} model vs {len(observed)} observed")
    try:
        objective = PointMatchingObjective(
            opts.loss_kind, model, observed, center=model.mean(axis=0), anchor=opts.anchor
        )
    except ValidationError as e:
        raise RefineError(str(e)) from e
    s2 = rms_radius(model) ** 2 if opts.precondition else 1.0

    pose = initial
    loss, grad = objective.value_and_gradient(pose)
    if not np.isfinite(loss):
        raise RefineError("invalid initial pose")
    trace: List[TraceEntry] = [(outer_iter, 0, loss)]
    converged = False
    t = opts.step_init
    for step in range(1, opts.max_inner_steps + 1):
        g_rot, g_trans = grad.d_rot, grad.d_trans
        sq = float(np.dot(g_rot, g_rot) / s2 + np.dot(g_trans, g_trans))
        if np.sqrt(sq) < opts.tol_grad:
            converged = True
            break
        direction = -np.concatenate([g_rot / s2, g_trans])
        accepted = False
        for _ in range(opts.max_backtracks):
            candidate = retract(pose, t * direction)
            new_loss = objective.value(candidate)
            if np.isfinite(new_loss) and new_loss <= loss - opts.armijo_c * t * sq:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            logger.debug(f"Line search exhausted at inner step {step} (loss {loss:.6g})")
            break
        pose = candidate
        loss, grad = objective.value_and_gradient(pose)
        trace.append((outer_iter, step, loss))
        t *= opts.step_growth
    else:
        logger.debug(f"Step budget of {opts.max_inner_steps} reached")

    add_trace = [_correspondence_add(initial, model, observed), _correspondence_add(pose, model, observed)]
    logger.debug(
        f"refine_pose[{opts.loss_kind}] outer {outer_iter}: {len(trace) - 1} steps, "
        f"loss {trace[0][2]:.6g} -> {loss:.6g}, converged={converged}"
    )
    return RefineResult(pose, trace, add_trace, converged, opts)


def observe_points(
    mesh: Mesh, gt: Pose, opts: RefineOptions
) -> Tuple[PointSet, PointSet]:
    """Model samples and their gt-transformed observations (optionally noisy)."""
    model = sample_surface_points(mesh, opts.n_points, opts.seed)
    observed = gt.apply(model.points)
    if opts.observation_noise > 0:
        rng = np.random.default_rng([opts.seed, 1])
        observed = observed + rng.normal(0.0, opts.observation_noise, observed.shape)
    return model, PointSet(observed)


def _synthetic_image(mask: np.ndarray) -> np.ndarray:
    """Flat gray rendering of a mask used when no camera image is supplied."""
    return np.repeat((mask.astype(np.uint8) * 128)[..., None], 3, axis=2)


def iterative_refine(
    initial: Pose,
    mesh: Mesh,
    gt: Pose,
    intr: CameraIntrinsics,
    opts: Optional[RefineOptions] = None,
    image: Optional[np.ndarray] = None,
    edges: Optional[SharpEdgeSet] = None,
    keep_inputs: bool = False,
) -> RefineResult:
    """Render at the current estimate, crop, refine, and repeat.

    Every outer iteration renders mask and sharp edges at the current pose,
    crops them with the camera image around the rendered mask, assembles the
    five-channel refiner input and then runs :func:`refine_pose` from the
    current pose.

    The point-matching refiner works on 3D correspondences and does not read
    the assembled tensor, so the pose sequence is the same whether or not the
    inputs are kept; ``keep_inputs`` returns them for a learned refiner or for
    inspection.
    """
    opts = opts or RefineOptions()
    model, observed = observe_points(mesh, gt, opts)
    edges = edges if edges is not None else extract_sharp_edges(mesh)
    if image is None:
        image = _synthetic_image(rasterize(mesh, gt, intr).mask)

    pose = initial
    add_trace = [_correspondence_add(initial, model.points, observed.points)]
    loss_trace: List[TraceEntry] = []
    inputs: List[RefinerInput] = []
    converged = False
    for outer in range(opts.outer_iterations):
        buffers = render_view(mesh, edges, pose, intr, width=opts.edge_width)
        bbox = mask_bbox(buffers.mask)
        if bbox is None:
            logger.warning(f"Outer iteration {outer}: object not visible, cropping full frame")
            bbox = (0, 0, intr.width, intr.height)
        tensor = _refiner_input(image, buffers, bbox)
        logger.debug(
            f"Outer iteration {outer}: refiner input {tensor.size}, "
            f"{int(tensor.channels[3].sum())} edge and {int(tensor.channels[4].sum())} mask pixels"
        )
        if keep_inputs:
            inputs.append(tensor)
        result = refine_pose(pose, observed, model, opts, outer_iter=outer)
        loss_trace.extend(result.loss_trace)
        pose = result.final_pose
        converged = result.converged
        add_trace.append(result.add_trace[-1])
    logger.info(
        f"{mesh.name}: {opts.outer_iterations} outer iterations, "
        f"ADD {add_trace[0]:.5f} -> {add_trace[-1]:.5f} m"
    )
    return RefineResult(pose, loss_trace, add_trace, converged, opts, inputs)


def _refiner_input(image: np.ndarray, buffers: RenderBuffers, bbox: BBox) -> RefinerInput:
    crop = crop_and_resize(image, bbox, REFINER_SIZE)
    if image.dtype == np.uint8:
        crop = np.clip(np.rint(crop), 0, 255).astype(np.uint8)
    else:
        crop = np.clip(crop, 0.0, 1.0)
    if crop.ndim == 2:
        crop = np.repeat(crop[..., None], 3, axis=2)
    return assemble_refiner_input(
        crop,
        crop_and_resize(buffers.edge_image, bbox, REFINER_SIZE) > 0.5,
        crop_and_resize(buffers.mask, bbox, REFINER_SIZE) > 0.5,
    )


@dataclass(frozen=True)
class NoiseConfig:
    """Gaussian perturbation of a ground-truth pose.

    Sigmas are standard deviations in radians (rotation angle) and meters
    (image-plane offset per axis, depth).
    """

    rot_sigma: float = 0.3
    offset_sigma: float = 0.01
    depth_sigma: float = 0.08
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("rot_sigma", "offset_sigma", "depth_sigma"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be non-negative")

    @classmethod
    def reference(
        cls, interpretation: str = "std", angle_units: str = "rad", seed: int = 0
    ) -> "NoiseConfig":
        """Read the constants 0.3 / 0.01 / 0.08 as std or variance, and the
        rotation constant as radians or degrees."""
        if interpretation not in ("std", "variance"):
            raise ValidationError(f"unknown interpretation {interpretation!r}")
        if angle_units not in ("rad", "deg"):
            raise ValidationError(f"unknown angle units {angle_units!r}")
        values = np.array([0.3, 0.01, 0.08])
        if interpretation == "variance":
            values = np.sqrt(values)
        rot = float(np.radians(values[0])) if angle_units == "deg" else float(values[0])
        return cls(rot, float(values[1]), float(values[2]), seed)

    def for_trial(self, index: int) -> "NoiseConfig":
        """Independent, reproducible seed for trial ``index``."""
        state = np.random.SeedSequence([self.seed, index]).generate_state(1)[0]
        return replace(self, seed=int(state))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def sample_perturbation(cfg: NoiseConfig) -> Tuple[np.ndarray, float, np.ndarray]:
    """Draw ``(axis, angle, offset)`` from the seeded generator."""
    rng = np.random.default_rng(cfg.seed)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) == 0:
        axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    angle = float(rng.normal(0.0, cfg.rot_sigma)) if cfg.rot_sigma > 0 else 0.0
    offset = np.array(
        [
            rng.normal(0.0, cfg.offset_sigma) if cfg.offset_sigma > 0 else 0.0,
            rng.normal(0.0, cfg.offset_sigma) if cfg.offset_sigma > 0 else 0.0,
            rng.normal(0.0, cfg.depth_sigma) if cfg.depth_sigma > 0 else 0.0,
        ]
    )
    return axis, angle, offset


def perturb_pose(gt: Pose, cfg: NoiseConfig) -> Pose:
    axis, angle, offset = sample_perturbation(cfg)
    if angle == 0 and not np.any(offset):
        return gt
    return Pose(exp_rotation(axis * angle) @ gt.rotation, gt.translation + offset)


@dataclass(frozen=True)
class TemplateConfig:
    coarse_radius: int = 24
    coarse_stride: int = 4
    fine_radius: int = 4
    fine_stride: int = 1
    n_candidates: int = 48
    edge_width: int = 1
    sharp_threshold: float = np.pi / 4

    def __post_init__(self) -> None:
        if min(self.coarse_stride, self.fine_stride, self.n_candidates, self.edge_width) < 1:
            raise ValidationError("strides, candidate count and edge width must be positive")
        if self.coarse_radius < 0 or self.fine_radius < 0:
            raise ValidationError("search radii must be non-negative")

    @property
    def search_limit(self) -> int:
        return self.coarse_radius + self.fine_radius

    @property
    def padding(self) -> int:
        # centroid shift plus the grid around it
        return 2 * self.search_limit + 2

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class TemplateLibrary:
    """Edge templates for every codebook bin, rendered once.

    Templates are rendered with zero offset at ``depth``; matching shifts
    them in the image plane instead of re-rendering.
    """

    def __init__(
        self,
        mesh: Mesh,
        edges: SharpEdgeSet,
        codebook: ViewpointCodebook,
        depth: float,
        intr: CameraIntrinsics,
        config: Optional[TemplateConfig] = None,
    ):
        if not depth > 0:
            raise RefineError("depth_guess must be positive")
        self.mesh = mesh
        self.edges = edges
        self.codebook = codebook
        self.depth = float(depth)
        self.intr = intr
        self.config = config or TemplateConfig()
        self.coords: List[np.ndarray] = []
        centroids = np.full((codebook.n_bins, 2), np.nan)
        for index in range(codebook.n_bins):
            image = self.render(index)
            pix = np.argwhere(image)
            self.coords.append(pix)
            if len(pix):
                centroids[index] = pix.mean(axis=0)
        self.centroids = centroids
        empty = int(np.isnan(centroids[:, 0]).sum())
        logger.info(
            f"Rendered {codebook.n_bins} edge templates for {mesh.name} at depth {self.depth:.3f} m"
            + (f" ({empty} empty)" if empty else "")
        )

    def pose_of(self, index: int) -> Pose:
        vp, ipr = self.codebook.bin_of(index)
        return self.codebook.decode_pose(RoughPose(vp, ipr, (0.0, 0.0), self.depth), self.intr)

    def render(self, index: int) -> np.ndarray:
        return render_view(
            self.mesh, self.edges, self.pose_of(index), self.intr, width=self.config.edge_width
        ).edge_image

    def image(self, index: int) -> np.ndarray:
        img = np.zeros(self.intr.size, dtype=bool)
        pix = self.coords[index]
        img[pix[:, 0], pix[:, 1]] = True
        return img

    def mismatch(
        self,
        mesh: Mesh,
        edges: SharpEdgeSet,
        codebook: ViewpointCodebook,
        depth: float,
        intr: CameraIntrinsics,
        config: Optional[TemplateConfig] = None,
    ) -> Optional[str]:
        """Name the first setting this library was not rendered with, or None."""
        if mesh is not self.mesh:
            return f"mesh {mesh.name!r} (library holds {self.mesh.name!r})"
        if edges is not self.edges and not np.array_equal(edges.edges, self.edges.edges):
            return "sharp edge set"
        if (codebook.n_viewpoints, codebook.n_inplane) != (
            self.codebook.n_viewpoints,
            self.codebook.n_inplane,
        ) or not (
            np.array_equal(codebook.viewpoints, self.codebook.viewpoints)
            and np.array_equal(codebook.in_plane_bins, self.codebook.in_plane_bins)
            and np.array_equal(codebook.up_convention, self.codebook.up_convention)
        ):
            return (
                f"codebook {codebook.n_viewpoints}x{codebook.n_inplane} "
                f"(library holds {self.codebook.n_viewpoints}x{self.codebook.n_inplane})"
            )
        if abs(depth - self.depth) >= 1e-12:
            return f"depth {depth:g} m (library holds {self.depth:g} m)"
        if intr != self.intr:
            return "camera intrinsics"
        if config is not None and config != self.config:
            return "template config"
        return None

    def matches(
        self,
        mesh: Mesh,
        edges: SharpEdgeSet,
        codebook: ViewpointCodebook,
        depth: float,
        intr: CameraIntrinsics,
        config: Optional[TemplateConfig] = None,
    ) -> bool:
        return self.mismatch(mesh, edges, codebook, depth, intr, config) is None


def _pad(image: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(image, pad, mode="constant", constant_values=False)


def _mean_lookup(dt: np.ndarray, pix: np.ndarray, shift: Tuple[int, int], pad: int) -> float:
    rows = pix[:, 0] + shift[1] + pad
    cols = pix[:, 1] + shift[0] + pad
    return float(dt[rows, cols].mean())


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean chamfer distance between two binary edge images."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if not a.any() or not b.any():
        return float("inf")
    dt_a = ndimage.distance_transform_edt(~a)
    dt_b = ndimage.distance_transform_edt(~b)
    return 0.5 * (float(dt_b[a].mean()) + float(dt_a[b].mean()))


def coarse_match(
    observed_edge_image: np.ndarray,
    mesh: Mesh,
    edges: SharpEdgeSet,
    cb: ViewpointCodebook,
    depth_guess: float,
    intr: CameraIntrinsics,
    library: Optional[TemplateLibrary] = None,
    config: Optional[TemplateConfig] = None,
) -> RoughPose:
    """Best-aligned codebook template for an observed edge image.

    Every template is first scored by the one-sided chamfer distance after
    aligning edge centroids; the best ``n_candidates`` are then searched over
    a coarse and a fine pixel grid with the symmetric chamfer distance.
    Ties go to the lowest bin index.
    """
    if not depth_guess > 0:
        raise RefineError("depth_guess must be positive")
    observed = np.asarray(observed_edge_image) != 0
    if observed.shape != intr.size:
        raise RefineError(f"edge image is {observed.shape}, expected {intr.size}")
    if not observed.any():
        raise RefineError("no edges observed")
    if library is None:
        library = TemplateLibrary(mesh, edges, cb, depth_guess, intr, config)
    else:
        reason = library.mismatch(mesh, edges, cb, depth_guess, intr, config)
        if reason is not None:
            raise RefineError(f"template library was rendered for a different {reason}")
    cfg = library.config
    pad = cfg.padding
    limit = cfg.search_limit
    dt_obs = ndimage.distance_transform_edt(~_pad(observed, pad))
    obs_pix = np.argwhere(observed)
    obs_centroid = obs_pix.mean(axis=0)

    stage1 = np.full(cb.n_bins, np.inf)
    shifts = np.zeros((cb.n_bins, 2), dtype=np.int64)
    for index, pix in enumerate(library.coords):
        if len(pix) == 0:
            continue
        d_row, d_col = np.clip(np.rint(obs_centroid - library.centroids[index]), -limit, limit)
        shifts[index] = (int(d_col), int(d_row))
        stage1[index] = _mean_lookup(dt_obs, pix, (int(d_col), int(d_row)), pad)
    candidates = np.sort(np.argsort(stage1, kind="stable")[: cfg.n_candidates])
    candidates = [int(c) for c in candidates if np.isfinite(stage1[c])]

    best: Tuple[float, int, Tuple[int, int]] = (np.inf, -1, (0, 0))
    for index in candidates:
        pix = library.coords[index]
        dt_tpl = ndimage.distance_transform_edt(~_pad(library.image(index), pad))
        su, sv = (int(s) for s in shifts[index])

        def score(shift: Tuple[int, int]) -> float:
            forward = _mean_lookup(dt_obs, pix, shift, pad)
            backward = _mean_lookup(dt_tpl, obs_pix, (-shift[0], -shift[1]), pad)
            return 0.5 * (forward + backward)

        coarse = [
            (su + du, sv + dv)
            for dv in range(-cfg.coarse_radius, cfg.coarse_radius + 1, cfg.coarse_stride)
            for du in range(-cfg.coarse_radius, cfg.coarse_radius + 1, cfg.coarse_stride)
        ]
        scores = [score(s) for s in coarse]
        cu, cv = coarse[int(np.argmin(scores))]
        fine = [
            (cu + du, cv + dv)
            for dv in range(-cfg.fine_radius, cfg.fine_radius + 1, cfg.fine_stride)
            for du in range(-cfg.fine_radius, cfg.fine_radius + 1, cfg.fine_stride)
        ]
        fine_scores = [score(s) for s in fine]
        k = int(np.argmin(fine_scores))
        if fine_scores[k] < best[0]:
            best = (fine_scores[k], index, fine[k])
    if best[1] < 0:
        raise RefineError("no template produced edges")
    vp, ipr = cb.bin_of(best[1])
    du, dv = best[2]
    logger.debug(f"coarse_match: bin ({vp}, {ipr}) offset ({du}, {dv}) chamfer {best[0]:.4f}")
    return RoughPose(vp, ipr, (float(du), float(dv)), float(depth_guess))
