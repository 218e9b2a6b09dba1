"""
Flat-shaded orthographic top-down renderer.

Returns the image, the ground-truth patch partition (majority pixel owner
per patch) and the gripper keypoint (midpoint between the finger tips).
Owner labels: 0 = table, 1..n = objects in state order, n + 1 = gripper.
"""

from typing import Dict, List, Tuple

import numpy as np

from core.imaging import OUT_OF_FRAME, Image, PatchGeometry, PixelPoint
from core.masks import MaskSet, quantize_colors
from sim.scene import (
    BOWL_INNER, CONTAINERS, FOOTPRINT, GRIPPER_COLOR, PALETTE, TABLE_COLOR,
    SceneObject, SceneState,
)


DEFAULT_GEOMETRY = PatchGeometry(14, 8, 8)

# gripper glyph, table lengths at scale 1
FINGER_WIDTH = 0.016
FINGER_HALF_LENGTH = 0.03
BAR_HALF_WIDTH = 0.008
GAP_CLOSED = 0.012
GAP_RANGE = 0.03


def _pixel_grid(geom: PatchGeometry) -> Tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(geom.width) + 0.5) / geom.width
    ys = (np.arange(geom.height) + 0.5) / geom.height
    return np.meshgrid(xs, ys)


def _local(px: np.ndarray, py: np.ndarray, cx: float, cy: float, yaw: float) -> Tuple[np.ndarray, np.ndarray]:
    dx, dy = px - cx, py - cy
    c, s = np.cos(yaw), np.sin(yaw)
    return c * dx + s * dy, -s * dx + c * dy


def object_mask(obj: SceneObject, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    r = FOOTPRINT[obj.shape]
    if obj.shape == 'cube':
        lx, ly = _local(px, py, obj.x, obj.y, obj.yaw)
        return (np.abs(lx) <= r) & (np.abs(ly) <= r)
    if obj.shape == 'ball':
        return np.hypot(px - obj.x, py - obj.y) <= r
    if obj.shape == 'bowl':
        d = np.hypot(px - obj.x, py - obj.y)
        return (d <= r) & (d >= BOWL_INNER)
    # bag: square with clipped corners
    ax, ay = np.abs(px - obj.x), np.abs(py - obj.y)
    return (ax <= r) & (ay <= r) & (ax + ay <= 1.6 * r)


def gripper_mask(state: SceneState, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Point-symmetric two-finger glyph, scaled up with height."""
    g = state.gripper
    scale = 1.0 + g.z
    lx, ly = _local(px, py, g.x, g.y, g.yaw)
    half_gap = (GAP_CLOSED + GAP_RANGE * g.aperture) * scale
    outer = half_gap + FINGER_WIDTH * scale
    ax, ay = np.abs(lx), np.abs(ly)
    fingers = (ax >= half_gap) & (ax <= outer) & (ay <= FINGER_HALF_LENGTH * scale)
    bar = (ax <= outer) & (ay <= BAR_HALF_WIDTH * scale)
    return fingers | bar


def draw_order(state: SceneState) -> List[int]:
    """Containers first, then other resting objects, then the held object."""
    resting = [i for i, o in enumerate(state.objects) if not o.held]
    order = sorted(resting, key=lambda i: (state.objects[i].shape not in CONTAINERS, i))
    held = state.held_index
    return order + ([held] if held is not None else [])


def label_colors(state: SceneState) -> Dict[int, int]:
    """Quantized colour key per owner label."""
    keys = {0: int(quantize_colors(np.array(TABLE_COLOR)))}
    for i, obj in enumerate(state.objects):
        keys[i + 1] = int(quantize_colors(np.array(PALETTE[obj.color])))
    keys[len(state.objects) + 1] = int(quantize_colors(np.array(GRIPPER_COLOR)))
    return keys


def render_owner_map(state: SceneState, geom: PatchGeometry = DEFAULT_GEOMETRY,
                     draw_gripper: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """(H, W, 3) uint8 canvas and (H, W) owner labels."""
    px, py = _pixel_grid(geom)
    canvas = np.empty((geom.height, geom.width, 3), dtype=np.uint8)
    canvas[:] = TABLE_COLOR
    owner = np.zeros((geom.height, geom.width), dtype=np.int64)

    for i in draw_order(state):
        obj = state.objects[i]
        mask = object_mask(obj, px, py)
        canvas[mask] = PALETTE[obj.color]
        owner[mask] = i + 1
    if draw_gripper:
        mask = gripper_mask(state, px, py)
        canvas[mask] = GRIPPER_COLOR
        owner[mask] = len(state.objects) + 1
    return canvas, owner


def patch_majority(owner: np.ndarray, geom: PatchGeometry, n_labels: int) -> np.ndarray:
    """Majority owner per patch; ties go to the smallest label."""
    ps = geom.patch_size
    blocks = owner.reshape(geom.grid_h, ps, geom.grid_w, ps).transpose(0, 2, 1, 3).reshape(geom.K, ps * ps)
    counts = np.stack([(blocks == label).sum(axis=1) for label in range(n_labels)], axis=1)
    return counts.argmax(axis=1).astype(np.int64)


def render(state: SceneState, geom: PatchGeometry = DEFAULT_GEOMETRY,
           draw_gripper: bool = True) -> Tuple[Image, MaskSet, PixelPoint]:
    """Render a state. Without the gripper the keypoint is the out-of-frame sentinel."""
    canvas, owner = render_owner_map(state, geom, draw_gripper)
    n_labels = len(state.objects) + 2
    masks = MaskSet(patch_majority(owner, geom, n_labels), n_labels)
    if draw_gripper:
        keypoint = PixelPoint(state.gripper.x * geom.width, state.gripper.y * geom.height)
    else:
        keypoint = OUT_OF_FRAME
    return Image.from_uint8(canvas), masks, keypoint
