"""Procedurally generated meshes.

The five bundled meshes cover the symmetry classes the harness evaluates:
cylindrical (pulley, shaft), discrete dihedral (housing, nut) and none
(pulley with screw). All meshes are closed, consistently wound with outward
normals, and centered on the origin.
"""

import logging
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from trimesh import creation

from .codebook import SymmetrySpec
from .errors import GeometryError
from .geometry import Mesh

logger = logging.getLogger(__name__)

Z_AXIS = (0.0, 0.0, 1.0)
X_AXIS = (1.0, 0.0, 0.0)


def _orient_outward(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Flip faces of a convex, origin-centered solid so normals point outward."""
    tri = vertices[triangles]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    center = vertices.mean(axis=0)
    inward = np.einsum("ij,ij->i", n, tri.mean(axis=1) - center) < 0
    fixed = triangles.copy()
    fixed[inward] = fixed[inward][:, [0, 2, 1]]
    return fixed


def box(sx: float = 1.0, sy: float = 1.0, sz: float = 1.0, name: str = "box") -> Mesh:
    """Axis-aligned box of the given side lengths, 12 triangles."""
    corners = np.array(
        [[x, y, z] for z in (-0.5, 0.5) for y in (-0.5, 0.5) for x in (-0.5, 0.5)]
    ) * np.array([sx, sy, sz])
    quads = [
        (0, 1, 3, 2),
        (4, 5, 7, 6),
        (0, 1, 5, 4),
        (2, 3, 7, 6),
        (0, 2, 6, 4),
        (1, 3, 7, 5),
    ]
    tris = np.array([t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))])
    return Mesh(corners, _orient_outward(corners, tris), name)


def unit_cube() -> Mesh:
    return box(1.0, 1.0, 1.0, name="cube")


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron projected onto a sphere, outward wound."""
    sphere = creation.icosphere(subdivisions=subdivisions, radius=radius)
    return Mesh.from_trimesh(sphere, name=f"icosphere{subdivisions}")


def lathe(profile: Sequence[Tuple[float, float]], segments: int = 32, name: str = "lathe") -> Mesh:
    """Surface of revolution about z.

    Args:
        profile: ``(radius, z)`` points running from the bottom of the axis
            around the outside to the top of the axis. Points with radius 0
            become single axis vertices.
        segments: Number of angular steps.
        name: Mesh name.
    """
    angles = 2.0 * np.pi * np.arange(segments) / segments
    verts: List[np.ndarray] = []
    rings: List[List[int]] = []
    for r, z in profile:
        if r == 0:
            verts.append(np.array([0.0, 0.0, z]))
            rings.append([len(verts) - 1] * segments)
        else:
            start = len(verts)
            verts.extend(np.stack([r * np.cos(angles), r * np.sin(angles), np.full(segments, z)], axis=1))
            rings.append(list(range(start, start + segments)))
    tris = []
    for lo, hi in zip(rings[:-1], rings[1:]):
        for s in range(segments):
            s1 = (s + 1) % segments
            a, b, c, d = lo[s], lo[s1], hi[s1], hi[s]
            for t in ((a, b, c), (a, c, d)):
                if len(set(t)) == 3:
                    tris.append(t)
    return Mesh(np.array(verts), np.array(tris), name)


def _square_outline(half: float, angles: np.ndarray) -> np.ndarray:
    t = half / np.maximum(np.abs(np.cos(angles)), np.abs(np.sin(angles)))
    return np.stack([t * np.cos(angles), t * np.sin(angles)], axis=1)


def _hexagon_outline(circumradius: float, angles: np.ndarray) -> np.ndarray:
    apothem = circumradius * np.cos(np.pi / 6)
    face = np.pi / 6 + np.pi / 3 * np.floor(angles / (np.pi / 3))
    t = apothem / np.cos(angles - face)
    return np.stack([t * np.cos(angles), t * np.sin(angles)], axis=1)


def ring_extrusion(
    outer: np.ndarray, inner_radius: float, z0: float, z1: float, name: str = "ring"
) -> Mesh:
    """Prism with a cylindrical bore along z.

    ``outer`` holds the outline at the same angles as the bore samples, so
    the count must be a multiple of the outline's corner count.
    """
    n = len(outer)
    angles = 2.0 * np.pi * np.arange(n) / n
    inner = inner_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if np.any(np.linalg.norm(outer, axis=1) <= inner_radius):
        raise GeometryError("bore must lie inside the outline")

    def layer(xy: np.ndarray, z: float) -> np.ndarray:
        return np.column_stack([xy, np.full(n, z)])

    verts = np.concatenate([layer(outer, z0), layer(outer, z1), layer(inner, z0), layer(inner, z1)])
    o0, o1, i0, i1 = (np.arange(n) + k * n for k in range(4))
    tris = []
    for s in range(n):
        s1 = (s + 1) % n
        tris += [(o0[s], o0[s1], o1[s1]), (o0[s], o1[s1], o1[s])]  # outer wall
        tris += [(i0[s], i1[s1], i0[s1]), (i0[s], i1[s], i1[s1])]  # bore
        tris += [(o1[s], o1[s1], i1[s1]), (o1[s], i1[s1], i1[s])]  # top
        tris += [(i0[s], i0[s1], o0[s1]), (i0[s], o0[s1], o0[s])]  # bottom
    return Mesh(verts, np.array(tris), name)


def pulley() -> Mesh:
    """Hub with a central flange, cylindrically symmetric about z."""
    profile = [
        (0.0, -0.02),
        (0.015, -0.02),
        (0.015, -0.005),
        (0.035, -0.005),
        (0.035, 0.005),
        (0.015, 0.005),
        (0.015, 0.02),
        (0.0, 0.02),
    ]
    return lathe(profile, segments=48, name="pulley")


def shaft() -> Mesh:
    """Elongated capped cylinder, 0.2 m long and 0.03 m across."""
    return lathe([(0.0, -0.1), (0.015, -0.1), (0.015, 0.1), (0.0, 0.1)], segments=32, name="shaft")


def housing() -> Mesh:
    n = 32
    angles = 2.0 * np.pi * np.arange(n) / n
    return ring_extrusion(_square_outline(0.03, angles), 0.015, -0.02, 0.02, name="housing")


def nut() -> Mesh:
    n = 36
    angles = 2.0 * np.pi * np.arange(n) / n
    return ring_extrusion(_hexagon_outline(0.012, angles), 0.006, -0.005, 0.005, name="nut")


def pulley_with_screw() -> Mesh:
    """Pulley with a set screw on the flange, which breaks every symmetry."""
    stud = box(0.006, 0.006, 0.008)
    stud_vertices = stud.vertices + np.array([0.027, 0.0, 0.009])
    combined = Mesh.concatenate([pulley(), Mesh(stud_vertices, stud.triangles)], name="pulley_with_screw")
    return combined


BUNDLED: Dict[str, Callable[[], Mesh]] = {
    "pulley": pulley,
    "housing": housing,
    "nut": nut,
    "shaft": shaft,
    "pulley_with_screw": pulley_with_screw,
}

BUNDLED_SYMMETRY: Dict[str, Callable[[], SymmetrySpec]] = {
    "pulley": lambda: SymmetrySpec.cylindrical(Z_AXIS),
    "housing": lambda: SymmetrySpec.dihedral(Z_AXIS, X_AXIS, 4),
    "nut": lambda: SymmetrySpec.dihedral(Z_AXIS, X_AXIS, 6),
    "shaft": lambda: SymmetrySpec.cylindrical(Z_AXIS),
    "pulley_with_screw": SymmetrySpec.none,
}


def bundled_names() -> List[str]:
    return list(BUNDLED)


def bundled_mesh(name: str) -> Mesh:
    try:
        return BUNDLED[name]()
    except KeyError:
        raise GeometryError(f"unknown bundled mesh {name!r}") from None


def bundled_symmetry(name: str) -> SymmetrySpec:
    try:
        return BUNDLED_SYMMETRY[name]()
    except KeyError:
        raise GeometryError(f"unknown bundled mesh {name!r}") from None
