"""
PNG overlays for segment, detect and tokenize.

Slots are tinted patch by patch on an RGBA layer and alpha-composited on the
frame; keypoints get a cross and, optionally, the outline of their agent
window.
"""

from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw

from core.imaging import Image, PatchGeometry, PixelPoint, patch_window, pixel_to_patch, save_png
from core.masks import MaskSet


SLOT_ALPHA = 110
KEYPOINT_COLOR = (255, 255, 0, 255)
WINDOW_COLOR = (0, 255, 255, 255)
MISS_COLOR = (255, 0, 0, 255)

# Fixed, well-separated slot tints; cycled when there are more slots.
SLOT_COLORS = (
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 190), (0, 128, 128),
    (170, 110, 40), (128, 0, 0), (170, 255, 195), (128, 128, 0), (0, 0, 128),
)


def _rgba(img: Union[Image, np.ndarray]) -> PILImage.Image:
    pixels = img.to_uint8() if isinstance(img, Image) else img
    return PILImage.fromarray(pixels).convert('RGBA')


def _box(geom: PatchGeometry, row: int, col: int):
    u0, v0, u1, v1 = geom.patch_extent((row, col))
    return [u0, v0, u1 - 1, v1 - 1]


def segment_overlay(img: Union[Image, np.ndarray], masks: MaskSet, geom: PatchGeometry) -> PILImage.Image:
    base = _rgba(img)
    layer = PILImage.new('RGBA', base.size, (0, 0, 0, 0))
    draw = ImageDraw.Draw(layer)
    grid = masks.as_grid(geom.grid_h, geom.grid_w)
    for row in range(geom.grid_h):
        for col in range(geom.grid_w):
            color = SLOT_COLORS[int(grid[row, col]) % len(SLOT_COLORS)]
            draw.rectangle(_box(geom, row, col), fill=color + (SLOT_ALPHA,))
    return PILImage.alpha_composite(base, layer)


def keypoint_overlay(img: Union[Image, np.ndarray, PILImage.Image], point: Optional[PixelPoint],
                     geom: PatchGeometry, grid: Optional[int] = None) -> PILImage.Image:
    """Cross at the keypoint plus its G x G window; a red frame when nothing was detected."""
    base = img.convert('RGBA') if isinstance(img, PILImage.Image) else _rgba(img)
    draw = ImageDraw.Draw(base)
    if point is None or point.is_sentinel:
        draw.rectangle([0, 0, base.size[0] - 1, base.size[1] - 1], outline=MISS_COLOR, width=2)
        return base
    if grid:
        for row, col in patch_window(geom, pixel_to_patch(geom, point), grid):
            draw.rectangle(_box(geom, row, col), outline=WINDOW_COLOR, width=1)
    r = max(2, geom.patch_size // 4)
    draw.line([point.u - r, point.v, point.u + r, point.v], fill=KEYPOINT_COLOR, width=2)
    draw.line([point.u, point.v - r, point.u, point.v + r], fill=KEYPOINT_COLOR, width=2)
    return base


def token_overlay(img: Union[Image, np.ndarray], masks: Optional[MaskSet], point: Optional[PixelPoint],
                  geom: PatchGeometry, grid: int) -> PILImage.Image:
    layered = segment_overlay(img, masks, geom) if masks is not None else _rgba(img)
    return keypoint_overlay(layered, point, geom, grid)


def save_overlay(overlay: PILImage.Image, path: Union[str, Path]) -> Path:
    return save_png(np.asarray(overlay.convert('RGB'), dtype=np.uint8), path)
