"""Point-matching losses, their pose gradients, and ADD / ADD-S metrics.

Gradients are taken in the left-perturbation chart of
:func:`specpose.geometry.retract`: for ``xi = (omega, tau)`` the perturbed
points are ``Exp(omega) R x + T + tau``. With ``g_i = dL/dq_i`` and lever arms
``y_i = R x_i`` the pose gradient is ``d_rot = sum y_i x g_i`` and
``d_trans = sum g_i``.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import ValidationError
from .geometry import (
    PointSet,
    Pose,
    as_points,
    exp_rotation,
    geodesic_angle,
)

logger = logging.getLogger(__name__)

SMOOTH_L1_EPS = 1e-6
CENTER_EXCLUSION = 1e-6
NORM_FLOOR = 1e-15

ADD_FRACTION = 0.10
ADDS_FRACTION = 0.01

LOSS_KINDS = ("l_3dpm", "l_cpm")
ANCHORS = ("gt", "pred")

Points = Union[PointSet, np.ndarray]


@dataclass(frozen=True, eq=False)
class LossValue:
    value: float
    per_point: Optional[np.ndarray] = None

    def __float__(self) -> float:
        return float(self.value)


@dataclass(frozen=True, eq=False)
class PoseGradient:
    """Gradient with respect to the rotation tangent and the translation."""

    d_rot: np.ndarray
    d_trans: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_rot, self.d_trans])

    def norm(self, rot_scale: float = 1.0) -> float:
        """Norm with the rotation block divided by ``rot_scale``."""
        return float(
            np.sqrt(np.dot(self.d_rot, self.d_rot) / rot_scale**2 + np.dot(self.d_trans, self.d_trans))
        )


def rms_radius(points: np.ndarray) -> float:
    """Root-mean-square distance of the points from their centroid."""
    s = float(np.sqrt(np.mean(np.sum((points - points.mean(axis=0)) ** 2, axis=1))))
    return s if s > 0 else 1.0


def _nonempty(pts: Points) -> np.ndarray:
    arr = as_points(pts)
    if len(arr) == 0:
        raise ValidationError("empty point set")
    return arr


def smooth_abs(r: np.ndarray, eps: float = SMOOTH_L1_EPS) -> np.ndarray:
    return np.sqrt(r * r + eps * eps) - eps


def point_l1(observed: np.ndarray, predicted: np.ndarray, smooth: bool = False) -> np.ndarray:
    """Per-point L1 norm of ``observed - predicted``."""
    r = observed - predicted
    return (smooth_abs(r) if smooth else np.abs(r)).sum(axis=1)


def point_cosine(V: np.ndarray, Vp: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point negative cosine and its gradient with respect to ``Vp``."""
    nV = np.maximum(np.linalg.norm(V, axis=1), NORM_FLOOR)
    nVp = np.maximum(np.linalg.norm(Vp, axis=1), NORM_FLOOR)
    u = V / nV[:, None]
    w = Vp / nVp[:, None]
    cos = np.clip(np.sum(u * w, axis=1), -1.0, 1.0)
    grad = -(u - cos[:, None] * w) / nVp[:, None]
    return -cos, grad


class PointMatchingObjective:
    """Loss of a predicted pose against fixed, corresponded observations.

    Args:
        kind: ``"l_3dpm"`` (smoothed L1 of point differences) or ``"l_cpm"``
            (negative cosine of center-to-point vectors).
        model_points: Object-frame samples ``x_i``.
        observed_points: Camera-frame observations ``p_i`` of the same samples.
        center: Object center in the object frame (``l_cpm`` only).
        observed_center: Camera-frame anchor for the ``"gt"`` anchor; defaults
            to the mean of the observed points.
        anchor: ``"gt"`` measures the predicted vectors from the observed
            center; ``"pred"`` measures them from the predicted center.
        diameter: Scale for the near-center exclusion; defaults to twice the
            largest sample distance from the center.
    """

    def __init__(
        self,
        kind: str,
        model_points: Points,
        observed_points: Points,
        center: Optional[np.ndarray] = None,
        observed_center: Optional[np.ndarray] = None,
        anchor: str = "gt",
        diameter: Optional[float] = None,
    ):
        if kind not in LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {kind!r}")
        if anchor not in ANCHORS:
            raise ValidationError(f"unknown anchor {anchor!r}")
        x = _nonempty(model_points)
        p = _nonempty(observed_points)
        if x.shape != p.shape:
            raise ValidationError(
                f"model and observed point counts differ: {len(x)} vs {len(p)}"
            )
        self.kind = kind
        self.anchor = anchor
        self.x = x
        self.p = p
        if kind == "l_cpm":
            c = x.mean(axis=0) if center is None else np.asarray(center, dtype=float)
            radii = np.linalg.norm(x - c, axis=1)
            scale = 2.0 * radii.max() if diameter is None else float(diameter)
            keep = (radii >= CENTER_EXCLUSION * scale) & (radii > 0)
            if not keep.any():
                raise ValidationError("degenerate point set at center")
            if not keep.all():
                logger.debug(f"Excluded {int((~keep).sum())} points at the object center")
            self.x = x[keep]
            self.p = p[keep]
            self.center = c
            anchor_point = (
                self.p.mean(axis=0) if observed_center is None else np.asarray(observed_center, dtype=float)
            )
            self.observed_center = anchor_point
            self.V = self.p - anchor_point

    @property
    def n(self) -> int:
        return int(len(self.x))

    def per_point(self, pose: Pose, smooth: bool = True) -> np.ndarray:
        if self.kind == "l_3dpm":
            return point_l1(self.p, pose.apply(self.x), smooth=smooth)
        return point_cosine(self.V, self._predicted_vectors(pose))[0]

    def value(self, pose: Pose, smooth: bool = True) -> float:
        return float(np.mean(self.per_point(pose, smooth=smooth)))

    def _predicted_vectors(self, pose: Pose) -> np.ndarray:
        if self.anchor == "pred":
            return (self.x - self.center) @ pose.rotation.T
        return pose.apply(self.x) - self.observed_center

    def value_and_gradient(self, pose: Pose) -> Tuple[float, PoseGradient]:
        levers = self.x @ pose.rotation.T
        if self.kind == "l_3dpm":
            r = pose.apply(self.x) - self.p
            per = smooth_abs(r).sum(axis=1)
            g = r / np.sqrt(r * r + SMOOTH_L1_EPS**2) / self.n
            return float(per.mean()), PoseGradient(np.cross(levers, g).sum(axis=0), g.sum(axis=0))
        Vp = self._predicted_vectors(pose)
        per, g = point_cosine(self.V, Vp)
        g = g / self.n
        if self.anchor == "pred":
            return float(per.mean()), PoseGradient(np.cross(Vp, g).sum(axis=0), np.zeros(3))
        return float(per.mean()), PoseGradient(np.cross(levers, g).sum(axis=0), g.sum(axis=0))


def _objective(
    kind: str,
    gt: Pose,
    pts: Points,
    center: Optional[np.ndarray] = None,
    anchor: str = "gt",
    diameter: Optional[float] = None,
) -> PointMatchingObjective:
    x = _nonempty(pts)
    observed_center = None
    if kind == "l_cpm":
        if center is None:
            raise ValidationError("l_cpm needs an object center")
        observed_center = gt.apply(center)[0]
    return PointMatchingObjective(
        kind, x, gt.apply(x), center, observed_center, anchor, diameter
    )


def l_3dpm(gt: Pose, pred: Pose, pts: Points, smooth: bool = False) -> LossValue:
    """Mean L1 distance between gt-transformed and pred-transformed points."""
    x = _nonempty(pts)
    per = point_l1(gt.apply(x), pred.apply(x), smooth=smooth)
    return LossValue(float(per.mean()), per)


def l_cpm(
    gt: Pose,
    pred: Pose,
    pts: Points,
    center: np.ndarray,
    anchor: str = "gt",
    diameter: Optional[float] = None,
) -> LossValue:
    """Mean negative cosine between center-to-point vectors, in [-1, 1]."""
    obj = _objective("l_cpm", gt, pts, center, anchor, diameter)
    per = obj.per_point(pred)
    return LossValue(float(per.mean()), per)


def grad_l_3dpm(gt: Pose, pred: Pose, pts: Points) -> PoseGradient:
    """Gradient of the smoothed L1 point-matching loss."""
    return _objective("l_3dpm", gt, pts).value_and_gradient(pred)[1]


def grad_l_cpm(
    gt: Pose,
    pred: Pose,
    pts: Points,
    center: np.ndarray,
    anchor: str = "gt",
    diameter: Optional[float] = None,
) -> PoseGradient:
    return _objective("l_cpm", gt, pts, center, anchor, diameter).value_and_gradient(pred)[1]


def add_metric(gt: Pose, pred: Pose, pts: Points) -> float:
    """Mean distance between corresponding transformed points."""
    x = _nonempty(pts)
    return float(np.linalg.norm(gt.apply(x) - pred.apply(x), axis=1).mean())


def adds_metric(gt: Pose, pred: Pose, pts: Points, method: str = "kdtree") -> float:
    """Mean closest-point distance from gt-transformed to pred-transformed points."""
    x = _nonempty(pts)
    a = gt.apply(x)
    b = pred.apply(x)
    if method == "kdtree":
        dist, _ = cKDTree(b).query(a, k=1)
        return float(np.mean(dist))
    if method == "brute":
        chunk = max(1, 4_000_000 // len(b))
        nearest = np.concatenate(
            [cdist(a[i : i + chunk], b).min(axis=1) for i in range(0, len(a), chunk)]
        )
        return float(nearest.mean())
    raise ValidationError(f"unknown ADD-S method {method!r}")


def success(distance: float, diameter: float, fraction: float = ADD_FRACTION) -> bool:
    """True when ``distance < fraction * diameter`` (strict)."""
    if not diameter > 0:
        raise ValidationError(f"diameter must be positive, got {diameter}")
    if not fraction > 0:
        raise ValidationError(f"fraction must be positive, got {fraction}")
    return bool(distance < fraction * diameter)


def rotation_error(gt: Pose, pred: Pose) -> float:
    return geodesic_angle(gt.rotation, pred.rotation)


def translation_error(gt: Pose, pred: Pose) -> float:
    return float(np.linalg.norm(gt.translation - pred.translation))


def sensitivity_ratio(
    kind: str,
    pts: Points,
    center: Optional[np.ndarray] = None,
    delta: float = 1e-3,
    translation_axis: Sequence[float] = (1.0, 0.0, 0.0),
    rotation_axis: Sequence[float] = (0.0, 1.0, 0.0),
    anchor: str = "gt",
    depth: float = 0.5,
) -> float:
    """Gradient norm after a translation of ``delta`` over that after a rotation
    with the same mean point displacement.

    Norms divide the rotation block by the RMS radius of ``pts`` so both
    blocks are per meter of point motion, as in the refiner's step. A larger
    value means the loss pushes harder on translation errors than on rotation
    errors of equal size.
    """
    x = _nonempty(pts)
    gt = Pose(np.eye(3), [0.0, 0.0, depth])
    t_hat = np.asarray(translation_axis, dtype=float)
    t_hat = t_hat / np.linalg.norm(t_hat)
    a_hat = np.asarray(rotation_axis, dtype=float)
    a_hat = a_hat / np.linalg.norm(a_hat)
    lever = float(np.linalg.norm(np.cross(a_hat, x @ gt.rotation.T), axis=1).mean())
    if lever <= 0:
        raise ValidationError("points lie on the rotation axis")
    alpha = 2.0 * np.arcsin(min(1.0, delta / (2.0 * lever)))
    translated = Pose(gt.rotation, gt.translation + delta * t_hat)
    rotated = Pose(exp_rotation(alpha * a_hat) @ gt.rotation, gt.translation)
    c = x.mean(axis=0) if center is None else center
    obj = _objective(kind, gt, x, c if kind == "l_cpm" else None, anchor)
    scale = rms_radius(x)
    g_t = obj.value_and_gradient(translated)[1].norm(rot_scale=scale)
    g_r = obj.value_and_gradient(rotated)[1].norm(rot_scale=scale)
    return g_t / g_r
