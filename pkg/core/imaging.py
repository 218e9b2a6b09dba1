"""
Pixel and patch geometry shared by every module.

Coordinates are (column u, row v) with the origin at the top-left pixel.
Patch indices are (row, col) and flatten row-major: k = row * grid_w + col.
"""

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from core.errors import DataError, GeometryError, ParameterError


PatchIndex = Tuple[int, int]


@dataclass(frozen=True)
class Image:
    """RGB observation with values in [0, 1], shape (channels, height, width)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise GeometryError(f"Expected (3, H, W) image data, got shape {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise GeometryError("Image values must lie within [0, 1]")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_uint8(cls, pixels: np.ndarray) -> 'Image':
        """Build from an (H, W, 3) uint8 array."""
        if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
            raise GeometryError(f"Expected (H, W, 3) uint8 pixels, got {pixels.dtype} {pixels.shape}")
        return cls(np.ascontiguousarray(pixels.transpose(2, 0, 1)).astype(np.float32) / np.float32(255.0))

    def to_uint8(self) -> np.ndarray:
        """Return (H, W, 3) uint8 pixels."""
        scaled = np.rint(self.data * 255.0).clip(0, 255).astype(np.uint8)
        return np.ascontiguousarray(scaled.transpose(1, 2, 0))


@dataclass(frozen=True)
class PatchGeometry:
    """Tiling of an image into square patches."""

    patch_size: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.patch_size < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise GeometryError(f"Invalid patch geometry: {self}")

    @property
    def K(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def height(self) -> int:
        return self.grid_h * self.patch_size

    @property
    def width(self) -> int:
        return self.grid_w * self.patch_size

    def flat_index(self, index: PatchIndex) -> int:
        return index[0] * self.grid_w + index[1]

    def patch_extent(self, index: PatchIndex) -> Tuple[int, int, int, int]:
        """Pixel extent (u0, v0, u1, v1), half-open, of a patch."""
        row, col = index
        ps = self.patch_size
        return col * ps, row * ps, (col + 1) * ps, (row + 1) * ps

    @classmethod
    def square(cls, image_size: int, patch_size: int) -> 'PatchGeometry':
        if patch_size < 1 or image_size % patch_size:
            raise GeometryError(f"Image size {image_size} is not a multiple of patch size {patch_size}")
        side = image_size // patch_size
        return cls(patch_size, side, side)


@dataclass(frozen=True)
class PixelPoint:
    """Real-valued pixel location; NaN coordinates mark the out-of-frame sentinel."""

    u: float
    v: float

    @property
    def is_sentinel(self) -> bool:
        return math.isnan(self.u) or math.isnan(self.v)

    def in_frame(self, width: int, height: int) -> bool:
        if self.is_sentinel:
            return False
        return 0.0 <= self.u < width and 0.0 <= self.v < height


OUT_OF_FRAME = PixelPoint(float('nan'), float('nan'))


def patchify(img: Image, patch_size: int) -> PatchGeometry:
    """Compute the patch grid of an image."""
    if patch_size < 1:
        raise GeometryError(f"patch_size must be >= 1, got {patch_size}")
    if img.height % patch_size or img.width % patch_size:
        raise GeometryError(
            f"Image {img.height}x{img.width} is not divisible by patch size {patch_size}"
        )
    return PatchGeometry(patch_size, img.height // patch_size, img.width // patch_size)


def pixel_to_patch(geom: PatchGeometry, p: PixelPoint) -> PatchIndex:
    """Map an in-frame pixel to the (row, col) of the patch containing it."""
    if not p.in_frame(geom.width, geom.height):
        raise GeometryError(f"Point ({p.u}, {p.v}) is outside the {geom.width}x{geom.height} frame")
    row = min(int(math.floor(p.v / geom.patch_size)), geom.grid_h - 1)
    col = min(int(math.floor(p.u / geom.patch_size)), geom.grid_w - 1)
    return row, col


def patch_window(geom: PatchGeometry, center: PatchIndex, grid: int) -> List[PatchIndex]:
    """
    G x G window of patch indices around a center, row-major.

    At the borders the window is shifted inward rather than truncated, so
    exactly grid**2 distinct indices come back for any in-bounds center.
    """
    if grid < 1 or grid % 2 == 0:
        raise ParameterError(f"Window size must be odd, got {grid}")
    if grid > min(geom.grid_h, geom.grid_w):
        raise ParameterError(f"Window size {grid} exceeds the {geom.grid_h}x{geom.grid_w} grid")
    row, col = center
    if not (0 <= row < geom.grid_h and 0 <= col < geom.grid_w):
        raise GeometryError(f"Patch {center} is outside the {geom.grid_h}x{geom.grid_w} grid")

    half = grid // 2
    top = min(max(row - half, 0), geom.grid_h - grid)
    left = min(max(col - half, 0), geom.grid_w - grid)
    return [(r, c) for r in range(top, top + grid) for c in range(left, left + grid)]


def window_flat_indices(geom: PatchGeometry, center: PatchIndex, grid: int) -> np.ndarray:
    return np.array([geom.flat_index(idx) for idx in patch_window(geom, center, grid)], dtype=np.int64)


# PNG I/O

def encode_png(img: Image) -> bytes:
    buffer = io.BytesIO()
    PILImage.fromarray(img.to_uint8()).save(buffer, format='PNG')
    return buffer.getvalue()


def decode_png(payload: bytes) -> Image:
    try:
        with PILImage.open(io.BytesIO(payload)) as pil:
            pixels = np.asarray(pil.convert('RGB'), dtype=np.uint8)
    except OSError as e:
        raise DataError(f"Invalid PNG payload: {e}") from e
    return Image.from_uint8(pixels)


def save_png(img: Union[Image, np.ndarray], path: Union[str, Path]) -> Path:
    """Write an Image or (H, W, 3) uint8 array as PNG."""
    path = Path(path)
    pixels = img.to_uint8() if isinstance(img, Image) else img
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        PILImage.fromarray(pixels).save(path, format='PNG')
    except OSError as e:
        raise DataError(f"Could not write PNG to {path}: {e}") from e
    return path


def load_png(path: Union[str, Path]) -> Image:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise DataError(f"Could not read PNG {path}: {e}") from e
    return decode_png(payload)
