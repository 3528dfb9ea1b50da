"""Datasets, batch evaluation and the loss ablation drivers."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .codebook import SymmetrySpec, ViewpointCodebook, build_codebook, symmetric_geodesic
from .errors import DatasetError, GeometryError, ValidationError
from .geometry import (
    CameraIntrinsics,
    Mesh,
    PointSet,
    Pose,
    orthonormality_residual,
    random_rotation,
    retract,
    sample_surface_points,
)
from .losses import (
    ADD_FRACTION,
    ADDS_FRACTION,
    PointMatchingObjective,
    add_metric,
    adds_metric,
    success,
)
from .meshes import BUNDLED, bundled_mesh, bundled_symmetry
from .refine import (
    NoiseConfig,
    RefineOptions,
    iterative_refine,
    perturb_pose,
    refine_pose,
)
from .utils import FileUtils, ImageIO, MeshIO, PathLike

logger = logging.getLogger(__name__)

LOSS_ARMS = ("l_3dpm", "l_cpm")
GRADIENT_FLOOR = 1e-3
T = TypeVar("T")


class MeshRegistry:
    """Resolves mesh ids: bundled names first, then OBJ paths relative to
    ``base_dir``. Loaded meshes are cached."""

    def __init__(self, base_dir: Optional[PathLike] = None, extra: Optional[Dict[str, Mesh]] = None):
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self._cache: Dict[str, Mesh] = dict(extra or {})

    def resolve(self, mesh_id: str) -> Mesh:
        if mesh_id in self._cache:
            return self._cache[mesh_id]
        if mesh_id in BUNDLED:
            mesh = bundled_mesh(mesh_id)
        else:
            path = Path(mesh_id)
            if not path.is_absolute():
                path = self.base_dir / path
            if not path.is_file():
                raise GeometryError(f"unknown mesh_id {mesh_id!r}")
            mesh = MeshIO.load_obj(path)
        self._cache[mesh_id] = mesh
        return mesh

    def symmetry(self, mesh_id: str) -> SymmetrySpec:
        return bundled_symmetry(mesh_id) if mesh_id in BUNDLED else SymmetrySpec.none()


@dataclass(frozen=True)
class DatasetEntry:
    mesh_id: str
    gt_pose: Pose
    image_path: Optional[str] = None
    bbox: Optional[Tuple[int, int, int, int]] = None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"mesh_id": self.mesh_id}
        data.update(self.gt_pose.to_dict())
        if self.image_path is not None:
            data["image_path"] = self.image_path
        if self.bbox is not None:
            data["bbox"] = list(self.bbox)
        return data


def _parse_entry(index: int, raw: Any, registry: MeshRegistry) -> DatasetEntry:
    if not isinstance(raw, dict):
        raise DatasetError("entry must be a JSON object", index)
    mesh_id = raw.get("mesh_id")
    if not isinstance(mesh_id, str):
        raise DatasetError("mesh_id must be a string", index)
    try:
        registry.resolve(mesh_id)
    except GeometryError as e:
        raise DatasetError(str(e), index) from e
    try:
        rotation = np.asarray(raw["rotation"], dtype=float)
        translation = np.asarray(raw["translation"], dtype=float)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"malformed pose: {e}", index) from e
    if rotation.size != 9 or translation.size != 3:
        raise DatasetError("pose needs 9 rotation and 3 translation values", index)
    residual = orthonormality_residual(rotation)
    if residual > 1e-6:
        raise DatasetError(f"rotation is not orthonormal (residual {residual:.3e})", index)
    try:
        pose = Pose(rotation.reshape(3, 3), translation)
    except GeometryError as e:
        raise DatasetError(str(e), index) from e

    image_path = raw.get("image_path")
    bbox = raw.get("bbox")
    if bbox is not None:
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, int) for v in bbox)):
            raise DatasetError("bbox must be four integers", index)
        bbox = tuple(bbox)
        if image_path is not None:
            path = Path(image_path)
            if not path.is_absolute():
                path = registry.base_dir / path
            if not path.is_file():
                raise DatasetError(f"image not found: {image_path}", index)
            width, height = ImageIO.image_size(path)
            x0, y0, x1, y1 = bbox
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise DatasetError(f"bbox {list(bbox)} outside the {width}x{height} image", index)
    return DatasetEntry(mesh_id, pose, image_path, bbox)


def load_dataset(manifest_path: PathLike, registry: Optional[MeshRegistry] = None) -> List[DatasetEntry]:
    """Read and validate a manifest (a JSON array of entries).

    OBJ mesh ids and image paths are relative to the manifest's directory.
    """
    path = Path(manifest_path)
    registry = registry or MeshRegistry(path.parent)
    try:
        raw = FileUtils.read_json(path)
    except ValidationError as e:
        raise DatasetError(str(e)) from e
    if not isinstance(raw, list):
        raise DatasetError("manifest must be a JSON array")
    entries = [_parse_entry(i, item, registry) for i, item in enumerate(raw)]
    logger.info(f"Loaded {len(entries)} entries from {path}")
    return entries


def save_dataset(entries: Sequence[DatasetEntry], path: PathLike) -> Path:
    return FileUtils.write_json([e.to_dict() for e in entries], path)


def load_predictions(path: PathLike) -> List[Pose]:
    raw = FileUtils.read_json(path)
    if not isinstance(raw, list):
        raise DatasetError("predictions must be a JSON array of poses")
    poses = []
    for i, item in enumerate(raw):
        try:
            poses.append(Pose.from_dict(item))
        except (GeometryError, AttributeError, TypeError) as e:
            raise DatasetError(str(e), i) from e
    return poses


def save_predictions(poses: Sequence[Pose], path: PathLike) -> Path:
    return FileUtils.write_json([p.to_dict() for p in poses], path)


def make_synthetic_dataset(
    object_names: Sequence[str],
    n_per_object: int,
    seed: int = 0,
    intr: Optional[CameraIntrinsics] = None,
    depth_range: Tuple[float, float] = (0.4, 0.7),
) -> List[DatasetEntry]:
    """Random ground-truth poses in front of the camera, centers in the
    middle half of the image."""
    intr = intr or CameraIntrinsics.default()
    entries = []
    for j, name in enumerate(object_names):
        for i in range(n_per_object):
            rng = np.random.default_rng([seed, j, i])
            R = random_rotation(rng)
            z = rng.uniform(*depth_range)
            u = rng.uniform(0.25, 0.75) * intr.width
            v = rng.uniform(0.25, 0.75) * intr.height
            t = z * np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
            entries.append(DatasetEntry(name, Pose(R, t)))
    return entries


@dataclass(frozen=True)
class EvalConfig:
    n_points: int = 1000
    seed: int = 0
    add_fraction: float = ADD_FRACTION
    adds_fraction: float = ADDS_FRACTION
    workers: int = 1

    def __post_init__(self) -> None:
        if self.n_points <= 0:
            raise ValidationError("n_points must be positive")
        if not (self.add_fraction > 0 and self.adds_fraction > 0):
            raise ValidationError("success fractions must be positive")
        if self.workers < 1:
            raise ValidationError("workers must be at least 1")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _map(fn: Callable[[int], T], n: int, workers: int) -> List[T]:
    """Apply ``fn`` to ``range(n)``; results stay in index order."""
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def _rate(flags: Sequence[bool]) -> float:
    return round(100.0 * sum(flags) / len(flags), 1)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """Aligned plain-text table; floats get one decimal."""

    def cell(v: Any) -> str:
        return f"{v:.1f}" if isinstance(v, float) else str(v)

    body = [[cell(v) for v in row] for row in rows]
    widths = [max([len(h)] + [len(r[k]) for r in body]) for k, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths))) for r in body]
    return "\n".join(lines)


@dataclass
class EvalRow:
    object_name: str
    n_samples: int
    add_rate: float
    adds_rate: float
    rot_err_deg: float


@dataclass
class EvalReport:
    rows: List[EvalRow]
    thresholds: Tuple[float, float]
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": [asdict(r) for r in self.rows],
            "thresholds": {"add_fraction": self.thresholds[0], "adds_fraction": self.thresholds[1]},
            "config": self.config,
        }

    def format_table(self) -> str:
        return format_table(
            ["object", "n", "ADD %", "ADD-S %", "rot err (deg)"],
            [[r.object_name, r.n_samples, r.add_rate, r.adds_rate, r.rot_err_deg] for r in self.rows],
        )


class _ModelPoints:
    """Per-mesh surface samples shared by every entry of that mesh."""

    def __init__(self, registry: MeshRegistry, n_points: int, seed: int):
        self.registry = registry
        self.n_points = n_points
        self.seed = seed
        self._cache: Dict[str, PointSet] = {}

    def prefetch(self, mesh_ids: Sequence[str]) -> None:
        for mesh_id in mesh_ids:
            self.get(mesh_id)

    def get(self, mesh_id: str) -> PointSet:
        if mesh_id not in self._cache:
            mesh = self.registry.resolve(mesh_id)
            self._cache[mesh_id] = sample_surface_points(mesh, self.n_points, self.seed)
        return self._cache[mesh_id]


def _group(entries: Sequence[DatasetEntry]) -> Dict[str, List[int]]:
    groups: Dict[str, List[int]] = {}
    for i, e in enumerate(entries):
        groups.setdefault(e.mesh_id, []).append(i)
    return dict(sorted(groups.items()))


def evaluate(
    dataset: Sequence[DatasetEntry],
    predictions: Sequence[Pose],
    sym_specs: Optional[Dict[str, SymmetrySpec]] = None,
    registry: Optional[MeshRegistry] = None,
    config: Optional[EvalConfig] = None,
) -> EvalReport:
    """Per-object ADD and ADD-S success rates.

    Args:
        dataset: Ground-truth entries.
        predictions: One pose per entry, in the same order.
        sym_specs: Symmetry per mesh id for the rotation-error column;
            bundled meshes default to their known symmetry.
        registry: Mesh resolver.
        config: Sampling and threshold settings.

    Returns:
        EvalReport with one row per mesh id, sorted by name.
    """
    if len(dataset) != len(predictions):
        raise DatasetError(
            f"count mismatch: {len(dataset)} entries vs {len(predictions)} predictions"
        )
    config = config or EvalConfig()
    registry = registry or MeshRegistry()
    sym_specs = sym_specs or {}
    samples = _ModelPoints(registry, config.n_points, config.seed)
    samples.prefetch([e.mesh_id for e in dataset])

    def score(i: int) -> Tuple[bool, bool, float]:
        entry, pred = dataset[i], predictions[i]
        mesh = registry.resolve(entry.mesh_id)
        pts = samples.get(entry.mesh_id)
        add = add_metric(entry.gt_pose, pred, pts)
        adds = adds_metric(entry.gt_pose, pred, pts)
        sym = sym_specs.get(entry.mesh_id) or registry.symmetry(entry.mesh_id)
        rot = symmetric_geodesic(sym, pred.rotation, entry.gt_pose.rotation)
        logger.debug(f"entry {i} ({entry.mesh_id}): ADD {add:.5f} ADD-S {adds:.5f}")
        return (
            success(add, mesh.diameter, config.add_fraction),
            success(adds, mesh.diameter, config.adds_fraction),
            rot,
        )

    results = _map(score, len(dataset), config.workers)
    rows = []
    for name, idx in _group(dataset).items():
        rows.append(
            EvalRow(
                object_name=name,
                n_samples=len(idx),
                add_rate=_rate([results[i][0] for i in idx]),
                adds_rate=_rate([results[i][1] for i in idx]),
                rot_err_deg=float(np.degrees(np.mean([results[i][2] for i in idx]))),
            )
        )
    logger.info(f"Evaluated {len(dataset)} predictions over {len(rows)} objects")
    return EvalReport(rows, (config.add_fraction, config.adds_fraction), config.to_dict())


@dataclass
class AblationTrial:
    entry_index: int
    seed: int
    initial_pose: Pose
    final_poses: Dict[str, Pose]
    add: Dict[str, float]
    rot_err: Dict[str, float]


@dataclass
class AblationRow:
    object_name: str
    n_trials: int
    add_rate_l1: float
    add_rate_cosine: float
    rot_err_l1_deg: float
    rot_err_cosine_deg: float
    rot_err_diff_deg: float
    rot_err_diff_ci: Tuple[float, float]


@dataclass
class AblationReport:
    rows: List[AblationRow]
    trials: List[AblationTrial] = field(default_factory=list)
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"rows": [asdict(r) for r in self.rows], "config": self.config}

    def format_table(self) -> str:
        return format_table(
            ["object", "n", "ADD % (L1)", "ADD % (cosine)", "rot (L1)", "rot (cosine)", "diff 95% CI"],
            [
                [
                    r.object_name,
                    r.n_trials,
                    r.add_rate_l1,
                    r.add_rate_cosine,
                    r.rot_err_l1_deg,
                    r.rot_err_cosine_deg,
                    f"{r.rot_err_diff_deg:+.2f} [{r.rot_err_diff_ci[0]:+.2f}, {r.rot_err_diff_ci[1]:+.2f}]",
                ]
                for r in self.rows
            ],
        )


def paired_difference_ci(a: Sequence[float], b: Sequence[float]) -> Tuple[float, Tuple[float, float]]:
    """Mean of ``b - a`` with a normal-approximation 95% interval."""
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    mean = float(d.mean())
    half = 1.96 * float(d.std(ddof=1)) / np.sqrt(len(d)) if len(d) > 1 else 0.0
    return mean, (mean - half, mean + half)


def _observations(
    samples: _ModelPoints, entry: DatasetEntry, opts: RefineOptions, trial_seed: int
) -> Tuple[PointSet, np.ndarray]:
    model = samples.get(entry.mesh_id)
    observed = entry.gt_pose.apply(model.points)
    if opts.observation_noise > 0:
        rng = np.random.default_rng([trial_seed, 1])
        observed = observed + rng.normal(0.0, opts.observation_noise, observed.shape)
    return model, observed


def ablate_losses(
    dataset: Sequence[DatasetEntry],
    registry: Optional[MeshRegistry] = None,
    noise: Optional[NoiseConfig] = None,
    opts: Optional[RefineOptions] = None,
    config: Optional[EvalConfig] = None,
) -> AblationReport:
    """Refine the same perturbed poses once with each loss and compare.

    Both arms of a trial start from the identical initial pose and see the
    identical observations.
    """
    registry = registry or MeshRegistry()
    noise = noise or NoiseConfig()
    opts = opts or RefineOptions()
    config = config or EvalConfig()
    samples = _ModelPoints(registry, opts.n_points, opts.seed)
    samples.prefetch([e.mesh_id for e in dataset])

    def trial(i: int) -> AblationTrial:
        entry = dataset[i]
        cfg = noise.for_trial(i)
        initial = perturb_pose(entry.gt_pose, cfg)
        model, observed = _observations(samples, entry, opts, cfg.seed)
        sym = registry.symmetry(entry.mesh_id)
        finals, adds, rots = {}, {}, {}
        for arm in LOSS_ARMS:
            result = refine_pose(initial, observed, model, replace(opts, loss_kind=arm))
            finals[arm] = result.final_pose
            adds[arm] = add_metric(entry.gt_pose, result.final_pose, model)
            rots[arm] = symmetric_geodesic(sym, result.final_pose.rotation, entry.gt_pose.rotation)
        return AblationTrial(i, cfg.seed, initial, finals, adds, rots)

    trials = _map(trial, len(dataset), config.workers)
    rows = []
    for name, idx in _group(dataset).items():
        diameter = registry.resolve(name).diameter
        rot = {arm: [np.degrees(trials[i].rot_err[arm]) for i in idx] for arm in LOSS_ARMS}
        diff, ci = paired_difference_ci(rot["l_3dpm"], rot["l_cpm"])
        rows.append(
            AblationRow(
                object_name=name,
                n_trials=len(idx),
                add_rate_l1=_rate([success(trials[i].add["l_3dpm"], diameter, config.add_fraction) for i in idx]),
                add_rate_cosine=_rate([success(trials[i].add["l_cpm"], diameter, config.add_fraction) for i in idx]),
                rot_err_l1_deg=float(np.mean(rot["l_3dpm"])),
                rot_err_cosine_deg=float(np.mean(rot["l_cpm"])),
                rot_err_diff_deg=diff,
                rot_err_diff_ci=ci,
            )
        )
    logger.info(f"Ablation finished: {len(dataset)} paired trials over {len(rows)} objects")
    echo = {"noise": noise.to_dict(), "refine": opts.to_dict(), "eval": config.to_dict()}
    return AblationReport(rows, trials, echo)


@dataclass
class CurveRow:
    object_name: str
    n_trials: int
    add_rates: List[float]


@dataclass
class CurveReport:
    rows: List[CurveRow]
    monotone_fraction: float
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": [asdict(r) for r in self.rows],
            "monotone_fraction": self.monotone_fraction,
            "config": self.config,
        }

    def format_table(self) -> str:
        n = max((len(r.add_rates) for r in self.rows), default=0)
        return format_table(
            ["object", "n"] + [f"iter {k}" for k in range(n)],
            [[r.object_name, r.n_trials] + list(r.add_rates) for r in self.rows],
        )


def refinement_curve(
    dataset: Sequence[DatasetEntry],
    registry: Optional[MeshRegistry] = None,
    noise: Optional[NoiseConfig] = None,
    opts: Optional[RefineOptions] = None,
    intr: Optional[CameraIntrinsics] = None,
    config: Optional[EvalConfig] = None,
) -> CurveReport:
    """ADD success rate after every outer iteration of iterative refinement.

    Column 0 is the perturbed initial pose.
    """
    registry = registry or MeshRegistry()
    noise = noise or NoiseConfig()
    opts = opts or RefineOptions()
    intr = intr or CameraIntrinsics.default()
    config = config or EvalConfig()
    for entry in dataset:
        registry.resolve(entry.mesh_id)

    def trial(i: int) -> List[float]:
        entry = dataset[i]
        mesh = registry.resolve(entry.mesh_id)
        initial = perturb_pose(entry.gt_pose, noise.for_trial(i))
        return iterative_refine(initial, mesh, entry.gt_pose, intr, opts).add_trace

    traces = _map(trial, len(dataset), config.workers)
    monotone = [all(b <= a + 1e-12 for a, b in zip(t[:-1], t[1:])) for t in traces]
    rows = []
    for name, idx in _group(dataset).items():
        diameter = registry.resolve(name).diameter
        rates = [
            _rate([success(traces[i][k], diameter, config.add_fraction) for i in idx])
            for k in range(opts.outer_iterations + 1)
        ]
        rows.append(CurveRow(name, len(idx), rates))
    fraction = float(np.mean(monotone)) if monotone else 1.0
    echo = {"noise": noise.to_dict(), "refine": opts.to_dict(), "eval": config.to_dict()}
    return CurveReport(rows, fraction, echo)


@dataclass
class SampleCountRow:
    object_name: str
    n_points: int
    add_rate_l1: float
    add_rate_cosine: float


@dataclass
class SampleCountReport:
    rows: List[SampleCountRow]
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {"rows": [asdict(r) for r in self.rows], "config": self.config}

    def format_table(self) -> str:
        return format_table(
            ["object", "points", "ADD % (L1)", "ADD % (cosine)"],
            [[r.object_name, r.n_points, r.add_rate_l1, r.add_rate_cosine] for r in self.rows],
        )


def ablate_sample_counts(
    dataset: Sequence[DatasetEntry],
    registry: Optional[MeshRegistry] = None,
    noise: Optional[NoiseConfig] = None,
    opts: Optional[RefineOptions] = None,
    counts: Sequence[int] = (20, 100, 500),
    config: Optional[EvalConfig] = None,
) -> SampleCountReport:
    """Loss ablation repeated for several model-point counts."""
    opts = opts or RefineOptions()
    rows = []
    for n in counts:
        report = ablate_losses(dataset, registry, noise, replace(opts, n_points=int(n)), config)
        for r in report.rows:
            rows.append(SampleCountRow(r.object_name, int(n), r.add_rate_l1, r.add_rate_cosine))
    return SampleCountReport(rows, {"counts": [int(n) for n in counts], "refine": opts.to_dict()})


def codebook_round_trips(cb: Optional[ViewpointCodebook] = None) -> Tuple[int, int]:
    """Count bins that encode back to themselves after decoding."""
    cb = cb or build_codebook()
    ok = 0
    for vp in range(cb.n_viewpoints):
        for ipr in range(cb.n_inplane):
            ok += cb.encode_rotation(cb.decode_rotation(vp, ipr)) == (vp, ipr)
    return ok, cb.n_bins


def finite_difference_gradient(
    objective: PointMatchingObjective, pose: Pose, step: float = 1e-6
) -> np.ndarray:
    """Central differences of the objective in the six tangent coordinates."""
    grad = np.zeros(6)
    for k in range(6):
        xi = np.zeros(6)
        xi[k] = step
        grad[k] = (objective.value(retract(pose, xi)) - objective.value(retract(pose, -xi))) / (2 * step)
    return grad


def gradient_check(
    kind: str, n_configs: int = 100, seed: int = 0, mesh_name: str = "pulley_with_screw"
) -> float:
    """Largest per-coordinate relative error between the analytic and the
    numeric gradient over random configurations.

    Each of the six coordinates is compared against its own numeric value;
    coordinates smaller than ``GRADIENT_FLOOR`` times the largest one are
    compared against that floor instead.

    L1 configurations with a residual component near the smoothing kink are
    redrawn.
    """
    mesh = bundled_mesh(mesh_name)
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_configs:
        pts = sample_surface_points(mesh, 50, int(rng.integers(2**31)))
        gt = Pose(random_rotation(rng), [0.0, 0.0, 0.5] + rng.normal(0, 0.02, 3))
        pred = retract(gt, np.concatenate([rng.normal(0, 0.05, 3), rng.normal(0, 0.01, 3)]))
        if kind == "l_3dpm" and np.abs(gt.apply(pts.points) - pred.apply(pts.points)).min() < 1e-4:
            continue
        objective = PointMatchingObjective(
            kind, pts, gt.apply(pts.points), mesh.centroid, gt.apply(mesh.centroid)[0]
        )
        analytic = objective.value_and_gradient(pred)[1].as_vector()
        numeric = finite_difference_gradient(objective, pred)
        scale = np.maximum(np.abs(numeric), max(GRADIENT_FLOOR * float(np.abs(numeric).max()), 1e-12))
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
        done += 1
    return worst


def selftest(seed: int = 0, tol: float = 1e-4) -> Dict[str, Any]:
    ok, total = codebook_round_trips()
    errors = {kind: gradient_check(kind, seed=seed) for kind in LOSS_ARMS}
    gradients_ok = all(err < tol for err in errors.values())
    return {
        "round_trips": ok,
        "bins": total,
        "gradient_errors": errors,
        "gradients_ok": gradients_ok,
        "passed": ok == total and gradients_ok,
    }
