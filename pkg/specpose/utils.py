"""File formats: OBJ meshes, JSON poses, PNG images and SPK5 refiner tensors."""

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Tuple, Union

import numpy as np
import trimesh
from PIL import Image
from trimesh.exchange.obj import export_obj

from .errors import GeometryError, RenderError, ValidationError
from .geometry import CameraIntrinsics, Mesh, Pose

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SPK5_MAGIC = b"SPK5"
SPK5_HEADER = struct.Struct("<4sHH")
SPK5_CHANNELS = 5
OBJ_DIGITS = 12


class FileUtils:
    """Utility functions for file operations."""

    @staticmethod
    def ensure_directory(path: Path) -> Path:
        """Ensure directory exists, create if it doesn't."""
        path.mkdir(parents=True, exist_ok=True)
        return path

    @staticmethod
    def read_json(path: PathLike) -> Any:
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
        except FileNotFoundError:
            raise ValidationError(f"file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ValidationError(f"malformed JSON in {path}: {e}") from e

    @staticmethod
    def write_json(data: Any, path: PathLike, indent: int = 2) -> Path:
        path = Path(path)
        FileUtils.ensure_directory(path.parent)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=indent)
            f.write("\n")
        logger.debug(f"Wrote {path}")
        return path


class MeshIO:
    """Wavefront OBJ reading and writing through trimesh (geometry only)."""

    @staticmethod
    def from_loaded(loaded: Any, name: str = "mesh", weld: bool = True) -> Mesh:
        """Wrap whatever trimesh loaded (mesh, scene or list) as one Mesh."""
        if isinstance(loaded, trimesh.Scene):
            loaded = list(loaded.geometry.values())
        if isinstance(loaded, (list, tuple)):
            parts = [g for g in loaded if isinstance(g, trimesh.Trimesh)]
            loaded = trimesh.util.concatenate(parts) if parts else None
        if not isinstance(loaded, trimesh.Trimesh) or len(loaded.faces) == 0:
            raise GeometryError(f"{name}: no triangles in OBJ data")
        mesh = Mesh.from_trimesh(loaded, name)
        if float(mesh.face_areas.sum()) <= 0:
            raise GeometryError(f"{name}: every triangle is degenerate")
        return mesh.welded() if weld else mesh

    @staticmethod
    def parse_obj(text: str, name: str = "mesh", weld: bool = True) -> Mesh:
        """Parse OBJ text; polygons are triangulated and all groups merged.

        ``weld`` merges duplicated positions so shared edges are detected as
        shared.
        """
        try:
            loaded = trimesh.load_mesh(io.StringIO(text), file_type="obj", process=False)
        except Exception as e:  # trimesh raises assorted types on malformed input
            raise GeometryError(f"{name}: unreadable OBJ data: {e}") from e
        return MeshIO.from_loaded(loaded, name, weld)

    @staticmethod
    def load_obj(path: PathLike, weld: bool = True) -> Mesh:
        path = Path(path)
        if not path.is_file():
            raise GeometryError(f"mesh file not found: {path}")
        mesh = MeshIO.parse_obj(path.read_text(encoding="utf-8"), name=path.stem, weld=weld)
        logger.debug(f"Loaded {path}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles")
        return mesh

    @staticmethod
    def save_obj(mesh: Mesh, path: PathLike) -> Path:
        path = Path(path)
        FileUtils.ensure_directory(path.parent)
        text = export_obj(
            mesh.as_trimesh,
            include_normals=False,
            include_color=False,
            include_texture=False,
            digits=OBJ_DIGITS,
        )
        path.write_text(text, encoding="utf-8")
        return path


class PoseIO:
    """JSON poses and intrinsics."""

    @staticmethod
    def load_pose(path: PathLike) -> Pose:
        return Pose.from_dict(FileUtils.read_json(path))

    @staticmethod
    def save_pose(pose: Pose, path: PathLike) -> Path:
        return FileUtils.write_json(pose.to_dict(), path)

    @staticmethod
    def load_intrinsics(path: PathLike) -> CameraIntrinsics:
        return CameraIntrinsics.from_dict(FileUtils.read_json(path))


class ImageIO:
    """8-bit PNG images (single channel or RGB)."""

    @staticmethod
    def load_png(path: PathLike) -> np.ndarray:
        path = Path(path)
        if not path.is_file():
            raise RenderError(f"image not found: {path}")
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if img.mode in ("RGBA", "P") else "L")
            return np.asarray(img, dtype=np.uint8).copy()

    @staticmethod
    def image_size(path: PathLike) -> Tuple[int, int]:
        """(width, height) without decoding pixels."""
        with Image.open(Path(path)) as img:
            return img.size

    @staticmethod
    def save_png(image: np.ndarray, path: PathLike) -> Path:
        """Save a bool, uint8 or [0, 1] float image."""
        arr = np.asarray(image)
        if arr.dtype == bool:
            arr = arr.astype(np.uint8) * 255
        elif arr.dtype != np.uint8:
            arr = np.round(np.clip(arr, 0.0, 1.0) * 255).astype(np.uint8)
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise RenderError(f"expected an HxW or HxWx3 image, got {arr.shape}")
        path = Path(path)
        FileUtils.ensure_directory(path.parent)
        Image.fromarray(arr).save(path, format="PNG")
        return path


class TensorIO:
    """SPK5 refiner-input files.

    Layout: 8-byte header (magic ``SPK5``, then H and W as little-endian
    uint16) followed by ``5*H*W`` little-endian float32 values in channel,
    row, column order.
    """

    @staticmethod
    def encode(channels: np.ndarray) -> bytes:
        arr = np.asarray(channels)
        if arr.ndim != 3 or arr.shape[0] != SPK5_CHANNELS:
            raise RenderError(f"expected shape (5, H, W), got {arr.shape}")
        _, h, w = arr.shape
        if h > 0xFFFF or w > 0xFFFF:
            raise RenderError("image too large for SPK5")
        return SPK5_HEADER.pack(SPK5_MAGIC, h, w) + arr.astype("<f4").tobytes(order="C")

    @staticmethod
    def decode(data: bytes) -> np.ndarray:
        if len(data) < SPK5_HEADER.size:
            raise RenderError("truncated SPK5 header")
        magic, h, w = SPK5_HEADER.unpack_from(data)
        if magic != SPK5_MAGIC:
            raise RenderError(f"bad SPK5 magic {magic!r}")
        expected = SPK5_HEADER.size + 4 * SPK5_CHANNELS * h * w
        if len(data) != expected:
            raise RenderError(f"SPK5 payload is {len(data)} bytes, expected {expected}")
        body = np.frombuffer(data, dtype="<f4", offset=SPK5_HEADER.size)
        return body.reshape(SPK5_CHANNELS, h, w).astype(np.float32)

    @staticmethod
    def save(channels: np.ndarray, path: PathLike) -> Path:
        path = Path(path)
        FileUtils.ensure_directory(path.parent)
        path.write_bytes(TensorIO.encode(channels))
        return path

    @staticmethod
    def load(path: PathLike) -> np.ndarray:
        return TensorIO.decode(Path(path).read_bytes())
