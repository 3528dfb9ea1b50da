"""Rigid poses, triangle meshes, pinhole cameras and surface sampling.

Conventions used throughout the package:

- Lengths are meters. A pose maps object coordinates into the camera frame,
  ``p_cam = R @ p_obj + T``.
- The camera frame is x right, y down, z forward. Image coordinates have
  their origin at the top-left; pixel ``(row, col)`` is centered on
  ``(u=col, v=row)``.
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import trimesh
from scipy.spatial import ConvexHull
from scipy.spatial.distance import cdist, pdist
from scipy.spatial.transform import Rotation
from trimesh.sample import sample_surface

from .errors import GeometryError

logger = logging.getLogger(__name__)

# Rotations further than this from orthonormal are rejected on construction.
ROTATION_TOL = 1e-6
# Accepted rotations with a residual above this are projected back onto SO(3).
ORTHONORMAL_EPS = 1e-9

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]


def orthonormality_residual(rotation: ArrayLike) -> float:
    """Return ``max(|R^T R - I|)`` for a 3x3 matrix."""
    R = np.asarray(rotation, dtype=float).reshape(3, 3)
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def nearest_rotation(matrix: ArrayLike) -> np.ndarray:
    """Closest rotation in the Frobenius norm, via SVD."""
    U, _, Vt = np.linalg.svd(np.asarray(matrix, dtype=float).reshape(3, 3))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return R


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``P = [R|T]`` from object frame to camera frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        try:
            R = np.array(self.rotation, dtype=float).reshape(3, 3)
            T = np.array(self.translation, dtype=float).reshape(3)
        except (TypeError, ValueError) as e:
            raise GeometryError(f"malformed pose: {e}") from e
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(T))):
            raise GeometryError("pose contains non-finite values")
        residual = orthonormality_residual(R)
        if residual > ROTATION_TOL:
            raise GeometryError(
                f"rotation is not orthonormal (residual {residual:.3e})"
            )
        if np.linalg.det(R) < 0:
            raise GeometryError("rotation has determinant -1 (reflection)")
        if residual > ORTHONORMAL_EPS:
            R = nearest_rotation(R)
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(T))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> "Pose":
        """Build a pose from a 4x4 homogeneous (or 3x4) matrix."""
        M = np.asarray(matrix, dtype=float)
        if M.shape not in ((4, 4), (3, 4)):
            raise GeometryError(f"expected a 4x4 or 3x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Pose":
        """Parse ``{"rotation": 9 row-major numbers, "translation": 3 numbers}``."""
        try:
            rotation = [float(x) for x in data["rotation"]]
            translation = [float(x) for x in data["translation"]]
        except (KeyError, TypeError, ValueError) as e:
            raise GeometryError(f"malformed pose object: {e}") from e
        if len(rotation) != 9 or len(translation) != 3:
            raise GeometryError(
                "pose needs 9 rotation and 3 translation values, got "
                f"{len(rotation)} and {len(translation)}"
            )
        return cls(np.reshape(rotation, (3, 3)), translation)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )

    def is_valid(self, tol: float = 1e-9) -> bool:
        """Strict orthonormality and determinant check."""
        return (
            orthonormality_residual(self.rotation) < tol
            and abs(np.linalg.det(self.rotation) - 1.0) < tol
        )

    def apply(self, points: ArrayLike) -> np.ndarray:
        """Transform an (n, 3) array of object points into the camera frame."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def __repr__(self) -> str:
        angle = np.degrees(np.linalg.norm(log_rotation(self.rotation)))
        t = ", ".join(f"{x:.4f}" for x in self.translation)
        return f"Pose(angle={angle:.2f}deg, translation=({t}))"


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first, then ``a``."""
    return Pose(
        a.rotation @ b.rotation, a.rotation @ b.translation + a.translation
    )


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def exp_rotation(rotvec: ArrayLike) -> np.ndarray:
    """Axis-angle vector to rotation matrix."""
    w = np.asarray(rotvec, dtype=float).reshape(3)
    if not np.any(w):
        return np.eye(3)
    return Rotation.from_rotvec(w).as_matrix()


def log_rotation(rotation: ArrayLike) -> np.ndarray:
    """Rotation matrix to axis-angle vector (angle in [0, pi])."""
    return Rotation.from_matrix(np.asarray(rotation, dtype=float)).as_rotvec()


def rotation_about_axis(axis: ArrayLike, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float).reshape(3)
    norm = np.linalg.norm(a)
    if norm == 0:
        raise GeometryError("rotation axis must be non-zero")
    return exp_rotation(a / norm * angle)


def geodesic_angle(Ra: ArrayLike, Rb: ArrayLike) -> float:
    """Angle of the relative rotation ``Ra^T Rb`` in radians.

    Computed from the chordal distance, which keeps full precision for small
    angles where the trace formula loses it.
    """
    diff = np.linalg.norm(np.asarray(Ra, dtype=float) - np.asarray(Rb, dtype=float))
    return float(2.0 * np.arcsin(min(1.0, diff / (2.0 * np.sqrt(2.0)))))


def retract(pose: Pose, xi: ArrayLike) -> Pose:
    """Apply a tangent step ``xi = (omega, tau)`` with left perturbation.

    ``R <- Exp(omega) @ R`` and ``T <- T + tau``. All pose gradients in this
    package are taken in this chart.
    """
    step = np.asarray(xi, dtype=float).reshape(6)
    return Pose(exp_rotation(step[:3]) @ pose.rotation, pose.translation + step[3:])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix."""
    return Rotation.random(random_state=rng).as_matrix()


@dataclass(frozen=True, eq=False)
class PointSet:
    """An (n, 3) set of points, optionally tagged with the face each came from."""

    points: np.ndarray
    face_index: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (n, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("points contain non-finite values")
        object.__setattr__(self, "points", _frozen(pts))
        if self.face_index is not None:
            faces = np.array(self.face_index, dtype=np.int64).reshape(-1)
            if len(faces) != len(pts):
                raise GeometryError("face_index length must match point count")
            object.__setattr__(self, "face_index", _frozen(faces))

    @property
    def n(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.n

    def centroid(self) -> np.ndarray:
        if self.n == 0:
            raise GeometryError("empty point set")
        return self.points.mean(axis=0)


def as_points(pts: Union[PointSet, ArrayLike]) -> np.ndarray:
    """Return the (n, 3) array behind a PointSet or array-like."""
    if isinstance(pts, PointSet):
        return pts.points
    arr = np.asarray(pts, dtype=float)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"points must have shape (n, 3), got {arr.shape}")
    return arr


def transform_points(pose: Pose, pts: Union[PointSet, ArrayLike]) -> PointSet:
    """Return ``R x + T`` for every point."""
    face_index = pts.face_index if isinstance(pts, PointSet) else None
    return PointSet(pose.apply(as_points(pts)), face_index=face_index)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera without distortion."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (int(self.width) > 0 and int(self.height) > 0):
            raise GeometryError("image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def default(cls) -> "CameraIntrinsics":
        return cls(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)

    @classmethod
    def centered(cls, size: int, focal: float) -> "CameraIntrinsics":
        """Square image with the principal point on the middle pixel."""
        c = float(size // 2)
        return cls(fx=focal, fy=focal, cx=c, cy=c, width=size, height=size)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(data["fx"]),
                fy=float(data["fy"]),
                cx=float(data["cx"]),
                cy=float(data["cy"]),
                width=int(data["width"]),
                height=int(data["height"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise GeometryError(f"malformed intrinsics: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def size(self) -> Tuple[int, int]:
        """(height, width)"""
        return self.height, self.width

    def project_points(self, points: ArrayLike) -> np.ndarray:
        """Vectorized pinhole projection; every point must have z > 0."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if np.any(pts[:, 2] <= 0):
            raise GeometryError("behind camera")
        u = self.fx * pts[:, 0] / pts[:, 2] + self.cx
        v = self.fy * pts[:, 1] / pts[:, 2] + self.cy
        return np.stack([u, v], axis=1)


def project(intr: CameraIntrinsics, point: ArrayLike) -> np.ndarray:
    """Project one camera-frame point to pixel coordinates ``(u, v)``."""
    return intr.project_points(point)[0]


def _max_pairwise_distance(points: np.ndarray, chunk: int = 2048) -> float:
    if len(points) <= chunk:
        return float(pdist(points).max()) if len(points) > 1 else 0.0
    best = 0.0
    for start in range(0, len(points), chunk):
        block = cdist(points[start : start + chunk], points[start:])
        best = max(best, float(block.max()))
    return best


def mesh_diameter(mesh: "Mesh") -> float:
    """Largest distance between any two vertices.

    The farthest pair always lies on the convex hull, so the pairwise scan
    runs over hull vertices when a hull exists.
    """
    verts = mesh.vertices
    if len(verts) == 0:
        raise GeometryError("empty mesh")
    if len(verts) == 1:
        return 0.0
    candidates = verts
    if len(verts) > 64:
        try:
            candidates = verts[ConvexHull(verts).vertices]
        except Exception as e:  # flat or degenerate vertex sets
            logger.debug(f"convex hull failed ({e}); scanning all vertices")
    return _max_pairwise_distance(candidates)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangle mesh in the object frame.

    ``center`` overrides the object center ``P_center``; by default it is the
    arithmetic mean of the vertices.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    name: str = "mesh"
    center: Optional[np.ndarray] = field(default=None)

    def __post_init__(self) -> None:
        verts = np.array(self.vertices, dtype=float)
        if verts.size == 0:
            verts = verts.reshape(0, 3)
        tris = np.array(self.triangles, dtype=np.int64)
        if tris.size == 0:
            tris = tris.reshape(0, 3)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise GeometryError(f"vertices must have shape (n, 3), got {verts.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise GeometryError(f"triangles must have shape (m, 3), got {tris.shape}")
        if not np.all(np.isfinite(verts)):
            raise GeometryError("vertices contain non-finite values")
        if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
            raise GeometryError("triangle index out of range")
        object.__setattr__(self, "vertices", _frozen(verts))
        object.__setattr__(self, "triangles", _frozen(tris))
        if self.center is not None:
            c = np.array(self.center, dtype=float).reshape(3)
            object.__setattr__(self, "center", _frozen(c))

    @property
    def n_vertices(self) -> int:
        return int(len(self.vertices))

    @property
    def n_triangles(self) -> int:
        return int(len(self.triangles))

    @cached_property
    def centroid(self) -> np.ndarray:
        if self.center is not None:
            return self.center
        if self.n_vertices == 0:
            raise GeometryError("empty mesh")
        return _frozen(self.vertices.mean(axis=0))

    @cached_property
    def diameter(self) -> float:
        return mesh_diameter(self)

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit normals following the triangle winding; zero for degenerate faces."""
        tri = self.vertices[self.triangles]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(n, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        return _frozen(n / safe)

    @cached_property
    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.triangles]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return _frozen(0.5 * np.linalg.norm(n, axis=1))

    @cached_property
    def as_trimesh(self) -> trimesh.Trimesh:
        """The same vertices and triangles as an unprocessed ``trimesh.Trimesh``."""
        return trimesh.Trimesh(
            vertices=self.vertices.copy(), faces=self.triangles.copy(), process=False
        )

    @classmethod
    def from_trimesh(cls, tm: trimesh.Trimesh, name: str = "mesh") -> "Mesh":
        return cls(np.asarray(tm.vertices, dtype=float), np.asarray(tm.faces, dtype=np.int64), name)

    def transformed(self, pose: Pose) -> "Mesh":
        center = None if self.center is None else pose.apply(self.center)[0]
        return Mesh(pose.apply(self.vertices), self.triangles, self.name, center)

    def reindexed(self, permutation: Sequence[int]) -> "Mesh":
        """Same surface with vertex ``i`` moved to slot ``permutation[i]``."""
        perm = np.asarray(permutation, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.n_vertices)):
            raise GeometryError("permutation must reorder every vertex exactly once")
        verts = np.empty_like(self.vertices)
        verts[perm] = self.vertices
        return Mesh(verts, perm[self.triangles], self.name, self.center)

    def welded(self, decimals: int = 9) -> "Mesh":
        """Merge vertices that coincide after rounding to ``decimals`` places."""
        _, first, inverse = np.unique(
            np.round(self.vertices, decimals),
            axis=0,
            return_index=True,
            return_inverse=True,
        )
        inverse = np.asarray(inverse).reshape(-1)
        tris = inverse[self.triangles]
        keep = (
            (tris[:, 0] != tris[:, 1])
            & (tris[:, 1] != tris[:, 2])
            & (tris[:, 0] != tris[:, 2])
        )
        return Mesh(self.vertices[first], tris[keep], self.name, self.center)

    @staticmethod
    def concatenate(meshes: Iterable["Mesh"], name: str = "mesh") -> "Mesh":
        verts, tris, offset = [], [], 0
        for mesh in meshes:
            verts.append(mesh.vertices)
            tris.append(mesh.triangles + offset)
            offset += mesh.n_vertices
        if not verts:
            return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), name)
        return Mesh(np.concatenate(verts), np.concatenate(tris), name)


def sample_surface_points(mesh: Mesh, n: int, seed: int = 0) -> PointSet:
    """Area-weighted uniform samples on the mesh surface.

    Args:
        mesh: Source mesh; needs at least one triangle with positive area.
        n: Number of samples.
        seed: Seed for ``numpy.random.default_rng``; equal seeds give equal
            samples.

    Returns:
        PointSet whose ``face_index`` records the triangle of every sample.
    """
    if n <= 0:
        raise GeometryError("sample count must be positive")
    areas = mesh.face_areas if mesh.n_triangles else np.zeros(0)
    if float(areas.sum()) <= 0:
        raise GeometryError("degenerate surface")
    points, faces = sample_surface(mesh.as_trimesh, int(n), seed=seed)
    return PointSet(points, face_index=faces)
