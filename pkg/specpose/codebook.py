"""Rough-pose representation: Fibonacci viewpoints times in-plane roll bins.

A rotation ``R`` is described by its viewing direction ``d = R^T e_z`` (the
camera's optical axis expressed in the object frame) and the roll of the
camera's up axis ``R^T e_y`` about that direction. Viewing directions are
discretized to the nearest of 64 Fibonacci-sphere viewpoints, roll to the
nearest of 60 bins measured from the up reference of that viewpoint.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .errors import CodebookError
from .geometry import (
    CameraIntrinsics,
    Pose,
    geodesic_angle,
    orthonormality_residual,
    project,
    rotation_about_axis,
)

logger = logging.getLogger(__name__)

N_VIEWPOINTS = 64
N_INPLANE = 60
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

WORLD_UP = np.array([0.0, 1.0, 0.0])
FALLBACK_UP = np.array([1.0, 0.0, 0.0])
UP_FALLBACK_TOL = 1e-6

# Candidates whose trace is within this of the best count as tied.
CANONICAL_TIE_TOL = 1e-12
GROUP_TOL = 1e-9


def fibonacci_sphere(n: int) -> np.ndarray:
    """Offset-lattice Fibonacci sphere; no point lands exactly on a pole."""
    if n <= 0:
        raise CodebookError("viewpoint count must be positive")
    i = np.arange(n, dtype=float)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def up_reference(view: np.ndarray, up: np.ndarray = WORLD_UP) -> np.ndarray:
    """Unit vector perpendicular to ``view`` that defines roll zero."""
    v = np.asarray(view, dtype=float)
    ref = up if np.linalg.norm(np.cross(v, up)) >= UP_FALLBACK_TOL else FALLBACK_UP
    u = ref - np.dot(ref, v) * v
    return u / np.linalg.norm(u)


def _roll_angle(R: np.ndarray, view: np.ndarray, up_ref: np.ndarray) -> float:
    """Signed roll in [0, 2pi) of the camera up axis about ``view``."""
    c = R[1, :]
    c = c - np.dot(c, view) * view
    theta = np.arctan2(np.dot(np.cross(up_ref, c), view), np.dot(up_ref, c))
    return float(np.mod(theta, 2.0 * np.pi))


@dataclass(frozen=True)
class RoughPose:
    """Viewpoint bin, roll bin, 2D offset (pixels) and depth (meters)."""

    vp_idx: int
    ipr_idx: int
    offset2d: Tuple[float, float] = (0.0, 0.0)
    depth: float = 1.0

    def __post_init__(self) -> None:
        if int(self.vp_idx) < 0 or int(self.ipr_idx) < 0:
            raise CodebookError("bin indices must be non-negative")
        if not (self.depth > 0 and np.isfinite(self.depth)):
            raise CodebookError("depth must be positive")
        offset = tuple(float(x) for x in self.offset2d)
        if len(offset) != 2:
            raise CodebookError("offset2d must have two components")
        object.__setattr__(self, "vp_idx", int(self.vp_idx))
        object.__setattr__(self, "ipr_idx", int(self.ipr_idx))
        object.__setattr__(self, "offset2d", offset)
        object.__setattr__(self, "depth", float(self.depth))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "vp": self.vp_idx,
            "ipr": self.ipr_idx,
            "offset": list(self.offset2d),
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RoughPose":
        try:
            return cls(
                int(data["vp"]),
                int(data["ipr"]),
                tuple(data["offset"]),  # type: ignore[arg-type]
                float(data["depth"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CodebookError(f"malformed rough pose: {e}") from e


@dataclass(frozen=True, eq=False)
class ViewpointCodebook:
    """Immutable set of viewpoints and roll bins.

    Args:
        viewpoints: (n, 3) unit vectors in the object frame.
        in_plane_bins: Evenly spaced roll angles starting at 0.
        up_convention: World vector whose projection defines roll zero.
    """

    viewpoints: np.ndarray
    in_plane_bins: np.ndarray
    up_convention: np.ndarray = WORLD_UP

    def __post_init__(self) -> None:
        vps = np.array(self.viewpoints, dtype=float)
        bins = np.array(self.in_plane_bins, dtype=float).reshape(-1)
        if vps.ndim != 2 or vps.shape[1] != 3 or len(vps) == 0:
            raise CodebookError(f"viewpoints must have shape (n, 3), got {vps.shape}")
        if np.max(np.abs(np.linalg.norm(vps, axis=1) - 1.0)) > 1e-12:
            raise CodebookError("viewpoints must be unit vectors")
        if len(bins) == 0:
            raise CodebookError("at least one in-plane bin is required")
        gram = np.clip(vps @ vps.T, -1.0, 1.0)
        np.fill_diagonal(gram, -1.0)
        if np.any(gram >= 1.0 - 1e-15):
            raise CodebookError("duplicate viewpoints")
        for name, arr in (("viewpoints", vps), ("in_plane_bins", bins)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        up = np.array(self.up_convention, dtype=float).reshape(3)
        up.setflags(write=False)
        object.__setattr__(self, "up_convention", up)

    @property
    def n_viewpoints(self) -> int:
        return int(len(self.viewpoints))

    @property
    def n_inplane(self) -> int:
        return int(len(self.in_plane_bins))

    @property
    def n_bins(self) -> int:
        return self.n_viewpoints * self.n_inplane

    @property
    def bin_spacing(self) -> float:
        return 2.0 * np.pi / self.n_inplane

    @cached_property
    def up_references(self) -> np.ndarray:
        return np.stack([up_reference(v, self.up_convention) for v in self.viewpoints])

    @cached_property
    def nearest_neighbor_angles(self) -> np.ndarray:
        """Angle from every viewpoint to its closest other viewpoint."""
        gram = np.clip(self.viewpoints @ self.viewpoints.T, -1.0, 1.0)
        np.fill_diagonal(gram, -1.0)
        return np.arccos(gram.max(axis=1))

    def bin_index(self, vp_idx: int, ipr_idx: int) -> int:
        return vp_idx * self.n_inplane + ipr_idx

    def bin_of(self, index: int) -> Tuple[int, int]:
        return divmod(int(index), self.n_inplane)

    def _check_indices(self, vp_idx: int, ipr_idx: int) -> None:
        if not 0 <= vp_idx < self.n_viewpoints:
            raise CodebookError(f"viewpoint index out of range: {vp_idx}")
        if not 0 <= ipr_idx < self.n_inplane:
            raise CodebookError(f"in-plane index out of range: {ipr_idx}")

    def _roll_index(self, R: np.ndarray, vp_idx: int) -> int:
        theta = _roll_angle(R, self.viewpoints[vp_idx], self.up_references[vp_idx])
        return int(np.ceil(theta / self.bin_spacing - 0.5)) % self.n_inplane

    def encode_rotation(self, rotation: Union[np.ndarray, Pose]) -> Tuple[int, int]:
        """Return ``(vp_idx, ipr_idx)``; ties go to the lower index."""
        R = rotation.rotation if isinstance(rotation, Pose) else np.asarray(rotation)
        R = np.asarray(R, dtype=float).reshape(3, 3)
        vp = int(np.argmax(self.viewpoints @ R[2, :]))
        return vp, self._roll_index(R, vp)

    def decode_rotation(self, vp_idx: int, ipr_idx: int) -> np.ndarray:
        self._check_indices(vp_idx, ipr_idx)
        v = self.viewpoints[vp_idx]
        u0 = self.up_references[vp_idx]
        theta = self.in_plane_bins[ipr_idx]
        c_y = np.cos(theta) * u0 + np.sin(theta) * np.cross(v, u0)
        c_x = np.cross(c_y, v)
        return np.stack([c_x, c_y, v])

    def decode_pose(self, rough: RoughPose, intr: CameraIntrinsics) -> Pose:
        """Place the decoded rotation so its center projects to center + offset."""
        R = self.decode_rotation(rough.vp_idx, rough.ipr_idx)
        du, dv = rough.offset2d
        z = rough.depth
        T = np.array([z * du / intr.fx, z * dv / intr.fy, z])
        return Pose(R, T)

    def encode_pose(self, pose: Pose, intr: CameraIntrinsics) -> RoughPose:
        vp, ipr = self.encode_rotation(pose.rotation)
        u, v = project(intr, pose.translation)
        return RoughPose(vp, ipr, (u - intr.cx, v - intr.cy), float(pose.translation[2]))

    def neighborhood(self, vp_idx: int, ipr_idx: int) -> Set[Tuple[int, int]]:
        """Bins adjacent to ``(vp_idx, ipr_idx)``, the bin itself included.

        Adjacent viewpoints lie within 1.5 times the nearest-neighbor angle.
        Roll is re-measured in each neighbor's frame and widened by one bin.
        """
        R = self.decode_rotation(vp_idx, ipr_idx)
        v = self.viewpoints[vp_idx]
        radius = 1.5 * self.nearest_neighbor_angles[vp_idx]
        angles = np.arccos(np.clip(self.viewpoints @ v, -1.0, 1.0))
        ring: Set[Tuple[int, int]] = set()
        for j in np.flatnonzero(angles <= radius + 1e-12):
            m = self._roll_index(R, int(j))
            for dm in (-1, 0, 1):
                ring.add((int(j), (m + dm) % self.n_inplane))
        return ring

    def to_json(self) -> List[List[float]]:
        return [[float(x) for x in v] for v in self.viewpoints]

    @classmethod
    def from_json(
        cls, viewpoints: Sequence[Sequence[float]], n_inplane: int = N_INPLANE
    ) -> "ViewpointCodebook":
        return cls(np.asarray(viewpoints, dtype=float), _inplane_bins(n_inplane))


def _inplane_bins(n: int) -> np.ndarray:
    if n <= 0:
        raise CodebookError("in-plane bin count must be positive")
    return np.arange(n) * (2.0 * np.pi / n)


def build_codebook(
    n_viewpoints: int = N_VIEWPOINTS, n_inplane: int = N_INPLANE
) -> ViewpointCodebook:
    """Deterministic codebook of Fibonacci viewpoints and roll bins."""
    cb = ViewpointCodebook(fibonacci_sphere(n_viewpoints), _inplane_bins(n_inplane))
    logger.debug(f"Built codebook with {cb.n_viewpoints}x{cb.n_inplane} bins")
    return cb


def depth_from_bbox(
    bbox_diag: float, diameter: float, f: float, shape_factor: float = 1.0
) -> float:
    """Similar-triangles depth estimate ``f * diameter * shape_factor / bbox_diag``."""
    for name, value in (
        ("bbox_diag", bbox_diag),
        ("diameter", diameter),
        ("f", f),
        ("shape_factor", shape_factor),
    ):
        if not value > 0:
            raise CodebookError(f"{name} must be positive, got {value}")
    return float(f * diameter * shape_factor / bbox_diag)


def offset_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error between 2D offset regressions."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.shape != t.shape or p.shape[-1:] != (2,):
        raise CodebookError(f"offset shapes differ or are not 2D: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


SYMMETRY_KINDS = ("none", "cylindrical", "discrete", "spherical")


@dataclass(frozen=True, eq=False)
class SymmetrySpec:
    """Object symmetry expressed in the object frame.

    Discrete groups are stored with the identity first.
    """

    kind: str = "none"
    axis: Optional[np.ndarray] = None
    rotations: Tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in SYMMETRY_KINDS:
            raise CodebookError(f"invalid symmetry: unknown kind {self.kind!r}")
        if self.kind == "cylindrical":
            if self.axis is None:
                raise CodebookError("invalid symmetry: cylindrical needs an axis")
            a = np.array(self.axis, dtype=float).reshape(3)
            if abs(np.linalg.norm(a) - 1.0) > 1e-9:
                raise CodebookError("invalid symmetry: axis must be unit-norm")
            a.setflags(write=False)
            object.__setattr__(self, "axis", a)
        if self.kind == "discrete":
            object.__setattr__(self, "rotations", _validate_group(self.rotations))

    @classmethod
    def none(cls) -> "SymmetrySpec":
        return cls("none")

    @classmethod
    def spherical(cls) -> "SymmetrySpec":
        return cls("spherical")

    @classmethod
    def cylindrical(cls, axis: Sequence[float] = (0.0, 0.0, 1.0)) -> "SymmetrySpec":
        a = np.asarray(axis, dtype=float)
        return cls("cylindrical", axis=a / np.linalg.norm(a))

    @classmethod
    def discrete(cls, rotations: Sequence[np.ndarray]) -> "SymmetrySpec":
        return cls("discrete", rotations=tuple(np.asarray(r, dtype=float) for r in rotations))

    @classmethod
    def cyclic(cls, axis: Sequence[float], n: int) -> "SymmetrySpec":
        if n < 1:
            raise CodebookError("invalid symmetry: order must be positive")
        return cls.discrete(
            [np.eye(3)] + [rotation_about_axis(axis, 2 * np.pi * k / n) for k in range(1, n)]
        )

    @classmethod
    def dihedral(
        cls, axis: Sequence[float], flip_axis: Sequence[float], n: int
    ) -> "SymmetrySpec":
        a = np.asarray(axis, dtype=float)
        b = np.asarray(flip_axis, dtype=float)
        if abs(np.dot(a, b)) > 1e-9 * np.linalg.norm(a) * np.linalg.norm(b):
            raise CodebookError("invalid symmetry: flip axis must be perpendicular")
        turns = cls.cyclic(a, n).rotations
        flip = rotation_about_axis(b, np.pi)
        return cls.discrete(list(turns) + [flip @ g for g in turns])

    @property
    def order(self) -> Optional[int]:
        """Group size, or None for continuous symmetries."""
        if self.kind == "none":
            return 1
        if self.kind == "discrete":
            return len(self.rotations)
        return None

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"kind": self.kind}
        if self.kind == "cylindrical":
            data["axis"] = [float(x) for x in self.axis]  # type: ignore[union-attr]
        if self.kind == "discrete":
            data["rotations"] = [[float(x) for x in g.ravel()] for g in self.rotations]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SymmetrySpec":
        kind = data.get("kind", "none")
        if kind == "cylindrical":
            return cls.cylindrical(data["axis"])
        if kind == "discrete":
            return cls.discrete([np.reshape(g, (3, 3)) for g in data["rotations"]])
        return cls(kind)


def _validate_group(rotations: Sequence[np.ndarray]) -> Tuple[np.ndarray, ...]:
    mats = [np.array(g, dtype=float).reshape(3, 3) for g in rotations]
    if not mats:
        raise CodebookError("invalid symmetry: empty rotation group")
    for g in mats:
        if orthonormality_residual(g) > GROUP_TOL or np.linalg.det(g) < 0:
            raise CodebookError("invalid symmetry: group element is not a rotation")

    def find(m: np.ndarray) -> Optional[int]:
        for i, g in enumerate(mats):
            if np.max(np.abs(g - m)) <= GROUP_TOL:
                return i
        return None

    ident = find(np.eye(3))
    if ident is None:
        raise CodebookError("invalid symmetry: group does not contain the identity")
    for a in mats:
        for b in mats:
            if find(a @ b) is None:
                raise CodebookError("invalid symmetry: rotations are not closed under composition")
    ordered = [mats[ident]] + [g for i, g in enumerate(mats) if i != ident]
    ordered[0] = np.eye(3)
    for g in ordered:
        g.setflags(write=False)
    return tuple(ordered)


def _perpendicular(a: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    b = ref - np.dot(ref, a) * a
    return b / np.linalg.norm(b)


def canonicalize(sym: SymmetrySpec, pose: Pose) -> Pose:
    """Representative of the pose's symmetry class. Translation is untouched.

    Idempotent bit-for-bit: a pose that is already canonical is returned as is.
    """
    if not isinstance(sym, SymmetrySpec):
        raise CodebookError("invalid symmetry: expected a SymmetrySpec")
    R = pose.rotation
    if sym.kind == "none":
        return pose
    if sym.kind == "spherical":
        if np.array_equal(R, np.eye(3)):
            return pose
        return Pose(np.eye(3), pose.translation)
    if sym.kind == "discrete":
        traces = np.array([np.trace(R @ g) for g in sym.rotations])
        best = int(np.flatnonzero(traces >= traces.max() - CANONICAL_TIE_TOL)[0])
        if best == 0:
            return pose
        return Pose(R @ sym.rotations[best], pose.translation)
    # cylindrical: rotate about the axis until the reference perpendicular
    # points along the camera up direction projected off the axis.
    a = sym.axis
    w = R @ a
    u = up_reference(w)
    c = R @ _perpendicular(a)
    phi = float(np.arctan2(np.dot(np.cross(c, u), w), np.dot(c, u)))
    if abs(phi) < CANONICAL_TIE_TOL:
        return pose
    return Pose(R @ rotation_about_axis(a, phi), pose.translation)


def symmetric_geodesic(sym: SymmetrySpec, Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Smallest rotation angle between ``Ra`` and any symmetric copy of ``Rb``."""
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    if sym.kind == "spherical":
        return 0.0
    if sym.kind == "discrete":
        return min(geodesic_angle(Ra, Rb @ g) for g in sym.rotations)
    if sym.kind == "cylindrical":
        # Only the axis direction is observable; its displacement is the error.
        da = Ra @ sym.axis
        db = Rb @ sym.axis
        return float(np.arctan2(np.linalg.norm(np.cross(da, db)), np.dot(da, db)))
    return geodesic_angle(Ra, Rb)
