"""Sharp-edge extraction and a software rasterizer for masks, depth and edges.

Coverage is hard (no antialiasing): a pixel belongs to a triangle when its
center does, with shared edges resolved by the top-left fill rule so every
pixel on a shared edge is owned by exactly one triangle.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import trimesh
from scipy import ndimage

from .errors import RenderError
from .geometry import CameraIntrinsics, Mesh, Pose

logger = logging.getLogger(__name__)

DEFAULT_SHARP_THRESHOLD = np.pi / 4
EDGE_DEPTH_BIAS = 1e-4
EDGE_SAMPLE_STEP = 0.5
NEAR_PLANE = 1e-6
REFINER_SIZE = 240

BBox = Tuple[int, int, int, int]


@dataclass(frozen=True, eq=False)
class SharpEdgeSet:
    """Vertex-index pairs of sharp edges.

    ``boundary`` marks edges used by a single face; those are sharp
    regardless of the threshold.
    """

    edges: np.ndarray
    dihedral_threshold: float
    boundary: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        if self.boundary is None:
            object.__setattr__(self, "boundary", np.zeros(len(edges), dtype=bool))

    def __len__(self) -> int:
        return int(len(self.edges))

    def segments(self, mesh: Mesh) -> np.ndarray:
        """(m, 2, 3) endpoint coordinates."""
        return mesh.vertices[self.edges]


def extract_sharp_edges(mesh: Mesh, threshold: float = DEFAULT_SHARP_THRESHOLD) -> SharpEdgeSet:
    """Edges whose adjacent face normals differ by at least ``threshold``.

    Normals follow triangle winding, so the mesh must be consistently wound.
    """
    if mesh.n_triangles == 0:
        return SharpEdgeSet(np.zeros((0, 2), dtype=np.int64), threshold)
    tm = mesh.as_trimesh
    unique, counts = np.unique(tm.edges_sorted, axis=0, return_counts=True)
    if np.any(counts > 2):
        bad = unique[np.argmax(counts > 2)]
        raise RenderError(f"non-manifold edge ({bad[0]}, {bad[1]})")
    single = np.asarray(
        trimesh.grouping.group_rows(tm.edges_sorted, require_count=1), dtype=np.int64
    ).reshape(-1)
    boundary = tm.edges_sorted[single]
    creases = np.sort(tm.face_adjacency_edges, axis=1)[tm.face_adjacency_angles >= threshold]
    edges = np.concatenate([creases, boundary])
    is_boundary = np.concatenate([np.zeros(len(creases), dtype=bool), np.ones(len(boundary), dtype=bool)])
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    logger.debug(
        f"{mesh.name}: {len(edges)} sharp edges of {len(unique)} "
        f"({len(boundary)} boundary)"
    )
    return SharpEdgeSet(edges[order], float(threshold), is_boundary[order])


@dataclass(frozen=True, eq=False)
class RenderBuffers:
    mask: np.ndarray
    depth: np.ndarray
    edge_image: np.ndarray

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.depth.shape)  # type: ignore[return-value]


def _resolve_size(intr: CameraIntrinsics, size: Optional[Tuple[int, int]]) -> Tuple[int, int]:
    if size is None:
        return intr.height, intr.width
    h, w = (int(s) for s in size)
    if h <= 0 or w <= 0:
        raise RenderError(f"image size must be positive, got {size}")
    return h, w


def _is_top_left(ex: float, ey: float) -> bool:
    return (ey == 0 and ex > 0) or ey < 0


def _fill_triangle(depth: np.ndarray, u: np.ndarray, v: np.ndarray, z: np.ndarray) -> None:
    h, w = depth.shape
    x0 = max(int(np.ceil(u.min())), 0)
    x1 = min(int(np.floor(u.max())), w - 1)
    y0 = max(int(np.ceil(v.min())), 0)
    y1 = min(int(np.floor(v.max())), h - 1)
    if x0 > x1 or y0 > y1:
        return
    area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
    if area == 0:
        return
    if area < 0:
        u, v, z = u[[0, 2, 1]], v[[0, 2, 1]], z[[0, 2, 1]]
        area = -area
    px, py = np.meshgrid(np.arange(x0, x1 + 1, dtype=float), np.arange(y0, y1 + 1, dtype=float))
    inside = np.ones(px.shape, dtype=bool)
    weights = []
    # Edge k is opposite vertex k.
    for a, b in ((1, 2), (2, 0), (0, 1)):
        ex, ey = u[b] - u[a], v[b] - v[a]
        e = ex * (py - v[a]) - ey * (px - u[a])
        inside &= (e > 0) | ((e == 0) & _is_top_left(ex, ey))
        weights.append(e / area)
    if not inside.any():
        return
    inv_z = weights[0] / z[0] + weights[1] / z[1] + weights[2] / z[2]
    pixel_depth = np.where(inside, 1.0 / np.where(inside, inv_z, 1.0), np.inf)
    view = depth[y0 : y1 + 1, x0 : x1 + 1]
    np.minimum(view, pixel_depth, out=view)


def _near_intersection(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Points where the segments ``a -> b`` cross ``z = NEAR_PLANE``."""
    t = (NEAR_PLANE - a[..., 2]) / (b[..., 2] - a[..., 2])
    p = a + t[..., None] * (b - a)
    p[..., 2] = NEAR_PLANE
    return p


def clip_triangle_near(tri: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-frame triangle against the near plane.

    Returns the part with ``z >= NEAR_PLANE`` as a (k, 3, 3) array of
    triangles, k in {0, 1, 2}.
    """
    poly = []
    for k in range(3):
        a, b = tri[k], tri[(k + 1) % 3]
        a_in, b_in = a[2] >= NEAR_PLANE, b[2] >= NEAR_PLANE
        if a_in:
            poly.append(a)
        if a_in != b_in:
            poly.append(_near_intersection(a, b))
    fan = [[poly[0], poly[i], poly[i + 1]] for i in range(1, len(poly) - 1)]
    return np.array(fan, dtype=float).reshape(-1, 3, 3)


def rasterize(
    mesh: Mesh, pose: Pose, intr: CameraIntrinsics, size: Optional[Tuple[int, int]] = None
) -> RenderBuffers:
    """Z-buffered mask and depth; both windings count as covered.

    Triangles crossing the near plane are clipped to the part in front of it.
    """
    h, w = _resolve_size(intr, size)
    depth = np.full((h, w), np.inf)
    if mesh.n_triangles:
        tri = pose.apply(mesh.vertices)[mesh.triangles]
        in_front = tri[:, :, 2] >= NEAR_PLANE
        crossing = in_front.any(axis=1) & ~in_front.all(axis=1)
        tri = np.concatenate([tri[in_front.all(axis=1)]] + [clip_triangle_near(t) for t in tri[crossing]])
        u = intr.fx * tri[:, :, 0] / tri[:, :, 2] + intr.cx
        v = intr.fy * tri[:, :, 1] / tri[:, :, 2] + intr.cy
        for f in range(len(tri)):
            _fill_triangle(depth, u[f], v[f], tri[f, :, 2])
    mask = np.isfinite(depth)
    if not mask.any():
        logger.debug(f"{mesh.name}: empty render")
    return RenderBuffers(mask, depth, np.zeros((h, w), dtype=bool))


def render_edges(
    edges: SharpEdgeSet,
    mesh: Mesh,
    pose: Pose,
    intr: CameraIntrinsics,
    depth: np.ndarray,
    width: int = 1,
    size: Optional[Tuple[int, int]] = None,
    step: float = EDGE_SAMPLE_STEP,
) -> np.ndarray:
    """Draw the visible part of every sharp edge.

    Each edge is sampled at most ``step`` pixels apart; a sample is drawn
    when its depth is within ``EDGE_DEPTH_BIAS`` of the depth buffer.
    """
    h, w = _resolve_size(intr, size)
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (h, w):
        raise RenderError(f"depth buffer is {depth.shape}, expected {(h, w)}")
    if width < 1:
        raise RenderError("line width must be at least 1")
    image = np.zeros((h, w), dtype=bool)
    if len(edges) == 0:
        return image
    cam = pose.apply(mesh.vertices)
    a = cam[edges.edges[:, 0]]
    b = cam[edges.edges[:, 1]]
    keep = np.maximum(a[:, 2], b[:, 2]) >= NEAR_PLANE
    a, b = a[keep], b[keep]
    if len(a) == 0:
        return image
    # Clip segments that cross the near plane.
    behind_a = a[:, 2] < NEAR_PLANE
    behind_b = b[:, 2] < NEAR_PLANE
    a[behind_a] = _near_intersection(a[behind_a], b[behind_a])
    b[behind_b] = _near_intersection(b[behind_b], a[behind_b])
    pa = intr.project_points(a)
    pb = intr.project_points(b)
    lengths = np.linalg.norm(pb - pa, axis=1)
    counts = np.minimum(np.ceil(lengths / step).astype(np.int64), 100_000) + 1
    seg = np.repeat(np.arange(len(a)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    frac = offsets / np.maximum(np.repeat(counts - 1, counts), 1)
    pts = a[seg] + frac[:, None] * (b[seg] - a[seg])
    uv = intr.project_points(pts)
    col = np.rint(uv[:, 0]).astype(np.int64)
    row = np.rint(uv[:, 1]).astype(np.int64)
    inb = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    col, row, z = col[inb], row[inb], pts[inb, 2]
    visible = z <= depth[row, col] + EDGE_DEPTH_BIAS
    image[row[visible], col[visible]] = True
    if width > 1:
        image = ndimage.binary_dilation(image, structure=np.ones((width, width), dtype=bool))
    return image


def render_view(
    mesh: Mesh,
    edges: SharpEdgeSet,
    pose: Pose,
    intr: CameraIntrinsics,
    size: Optional[Tuple[int, int]] = None,
    width: int = 1,
) -> RenderBuffers:
    """Mask, depth and visible sharp edges in one call."""
    buffers = rasterize(mesh, pose, intr, size)
    edge_image = render_edges(edges, mesh, pose, intr, buffers.depth, width=width, size=buffers.size)
    return RenderBuffers(buffers.mask, buffers.depth, edge_image)


def mask_bbox(mask: np.ndarray) -> Optional[BBox]:
    """Tight ``(x0, y0, x1, y1)`` box with exclusive upper corner, or None."""
    rows = np.flatnonzero(np.any(mask, axis=1))
    cols = np.flatnonzero(np.any(mask, axis=0))
    if len(rows) == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def crop_and_resize(image: np.ndarray, bbox: BBox, out_size: int = REFINER_SIZE) -> np.ndarray:
    """Square crop around ``bbox`` resampled bilinearly to ``out_size``.

    The square's side is the longer bbox side and it shares the bbox center.
    Pixels outside the frame read as zero.
    """
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise RenderError(f"expected an HxW or HxWxC image, got {img.shape}")
    h, w = img.shape[:2]
    x0, y0, x1, y1 = (int(c) for c in bbox)
    if x1 <= x0 or y1 <= y0:
        raise RenderError(f"empty bounding box {bbox}")
    if x1 <= 0 or y1 <= 0 or x0 >= w or y0 >= h:
        raise RenderError(f"bounding box {bbox} does not intersect the {w}x{h} image")
    side = max(x1 - x0, y1 - y0)
    left = (x0 + x1 - 1) / 2.0 - side / 2.0 + 0.5
    top = (y0 + y1 - 1) / 2.0 - side / 2.0 + 0.5
    scale = side / out_size
    centers = (np.arange(out_size) + 0.5) * scale - 0.5
    rows, cols = np.meshgrid(top + centers, left + centers, indexing="ij")
    coords = np.stack([rows, cols])
    work = img.astype(np.float64)
    if work.ndim == 2:
        out = ndimage.map_coordinates(work, coords, order=1, mode="grid-constant", cval=0.0)
    else:
        out = np.stack(
            [
                ndimage.map_coordinates(work[..., c], coords, order=1, mode="grid-constant", cval=0.0)
                for c in range(work.shape[2])
            ],
            axis=-1,
        )
    return out


@dataclass(frozen=True, eq=False)
class RefinerInput:
    """Five channels ``[R, G, B, edge, mask]`` with values in [0, 1]."""

    channels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.channels, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 5:
            raise RenderError(f"refiner input must have shape (5, H, W), got {arr.shape}")
        if np.any(arr < 0) or np.any(arr > 1):
            raise RenderError("refiner input values must lie in [0, 1]")
        for c in (3, 4):
            if not np.all((arr[c] == 0) | (arr[c] == 1)):
                raise RenderError(f"channel {c} must be binary")
        object.__setattr__(self, "channels", arr)

    @property
    def size(self) -> Tuple[int, int]:
        return int(self.channels.shape[1]), int(self.channels.shape[2])


def assemble_refiner_input(
    image: np.ndarray, edge: np.ndarray, mask: np.ndarray, size: int = REFINER_SIZE
) -> RefinerInput:
    """Stack an RGB crop with its edge image and mask.

    ``uint8`` images are scaled by 1/255; float images must already lie in
    [0, 1]. Edge and mask are binarized (non-zero means set).
    """
    img = np.asarray(image)
    if img.shape != (size, size, 3):
        raise RenderError(f"image crop must be {size}x{size}x3, got {img.shape}")
    edge = np.asarray(edge)
    mask = np.asarray(mask)
    for name, arr in (("edge", edge), ("mask", mask)):
        if arr.shape != (size, size):
            raise RenderError(f"{name} must be {size}x{size}, got {arr.shape}")
    if img.dtype == np.uint8:
        rgb = img.astype(np.float32) / 255.0
    else:
        rgb = img.astype(np.float32)
        if np.any(rgb < 0) or np.any(rgb > 1):
            raise RenderError("float image values must lie in [0, 1]")
    channels = np.empty((5, size, size), dtype=np.float32)
    channels[:3] = np.moveaxis(rgb, -1, 0)
    channels[3] = edge != 0
    channels[4] = mask != 0
    return RefinerInput(channels)


def disassemble_refiner_input(tensor: RefinerInput) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`assemble_refiner_input`: ``(rgb float32, edge, mask)``."""
    ch = tensor.channels
    return np.moveaxis(ch[:3], 0, -1).copy(), ch[3] != 0, ch[4] != 0
