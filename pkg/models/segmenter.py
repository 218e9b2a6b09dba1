"""
Fixed-slot patch segmentation.

Two sources produce a raw partition of the patch grid, which normalize_slots
turns into exactly N slots:
    oracle        simulator ground-truth owners (perfect masks)
    unsupervised  dominant quantized colour per patch + 4-connected components
"""

import logging
import math
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from core.errors import GeometryError, ParameterError
from core.imaging import Image, PatchGeometry, patchify
from core.masks import N_COLOR_KEYS, MaskSet, quantize_colors
from sim.render import label_colors


logger = logging.getLogger(__name__)

DEFAULT_SLOTS = 7

# 8-neighbourhood, each unordered pair once
_NEIGHBOR_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _adjacency(grid: np.ndarray) -> Dict[int, set]:
    neighbors: Dict[int, set] = {int(label): set() for label in np.unique(grid)}
    h, w = grid.shape
    for dr, dc in _NEIGHBOR_OFFSETS:
        r0, r1 = 0, h - dr
        c0, c1 = max(0, -dc), w - max(0, dc)
        a = grid[r0:r1, c0:c1]
        b = grid[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        differ = a != b
        for x, y in zip(a[differ].tolist(), b[differ].tolist()):
            neighbors[x].add(y)
            neighbors[y].add(x)
    return neighbors


def normalize_slots(labels: np.ndarray, n_slots: int = DEFAULT_SLOTS,
                    grid_shape: Optional[Tuple[int, int]] = None,
                    color_keys: Optional[Dict[int, int]] = None) -> MaskSet:
    """
    Turn a raw partition with M parts into exactly n_slots slots.

    While M > n_slots the smallest part is merged into its largest
    8-adjacent neighbour with the same colour key; if it has none, it is
    merged into the next smallest part. Slots are ordered by descending
    patch count, ties by smallest member patch index; missing slots are empty.

    Args:
        labels: raw part id per patch, either a (grid_h, grid_w) array or flat
        grid_shape: needed for adjacency when labels are flat
        color_keys: raw part id -> quantized colour key
    """
    if n_slots < 1:
        raise ParameterError(f"n_slots must be >= 1, got {n_slots}")
    labels = np.asarray(labels, dtype=np.int64)
    flat = labels.ravel()
    if flat.size == 0:
        raise ParameterError("Cannot normalize an empty partition")
    shape = labels.shape if labels.ndim == 2 else grid_shape

    parts = {int(label): np.flatnonzero(flat == label) for label in np.unique(flat)}
    if shape is not None:
        neighbors = _adjacency(flat.reshape(shape))
    else:
        neighbors = {label: set() for label in parts}
    keys = dict(color_keys or {})

    def size_key(label):
        return (parts[label].size, int(parts[label][0]))

    while len(parts) > n_slots:
        ordered = sorted(parts, key=size_key)
        src = ordered[0]
        same_color = [n for n in neighbors[src] if src in keys and keys.get(n) == keys[src]]
        if same_color:
            dst = max(same_color, key=lambda n: (parts[n].size, -int(parts[n][0])))
        else:
            dst = ordered[1]
        parts[dst] = np.sort(np.concatenate([parts[dst], parts.pop(src)]))
        for n in neighbors.pop(src):
            neighbors[n].discard(src)
            if n != dst:
                neighbors[n].add(dst)
                neighbors[dst].add(n)
        neighbors[dst].discard(dst)

    assignment = np.empty(flat.size, dtype=np.int64)
    for slot, label in enumerate(sorted(parts, key=lambda l: (-parts[l].size, int(parts[l][0])))):
        assignment[parts[label]] = slot
    return MaskSet(assignment, n_slots)


def _square_shape(K: int) -> Tuple[int, int]:
    side = int(math.isqrt(K))
    if side * side != K:
        raise GeometryError(f"Cannot infer a square grid from K={K}; pass geom")
    return side, side


def normalize_ground_truth(masks: MaskSet, state, n_slots: int = DEFAULT_SLOTS,
                           geom: Optional[PatchGeometry] = None) -> MaskSet:
    """Simulator owner labels for a state, normalized to n_slots."""
    raw = masks.assignment
    shape = (geom.grid_h, geom.grid_w) if geom is not None else _square_shape(raw.size)
    return normalize_slots(raw.reshape(shape), n_slots, color_keys=label_colors(state))


def segment_oracle(step, n_slots: int = DEFAULT_SLOTS, geom: Optional[PatchGeometry] = None) -> MaskSet:
    """Ground-truth masks of an episode step (needs step.masks and step.state)."""
    return normalize_ground_truth(step.masks, step.state, n_slots, geom)


def dominant_color_grid(img: Image, patch_size: int) -> Tuple[PatchGeometry, np.ndarray]:
    """Most frequent quantized colour key per patch; ties go to the smallest key."""
    geom = patchify(img, patch_size)
    keys = quantize_colors(img.to_uint8())
    ps = patch_size
    blocks = keys.reshape(geom.grid_h, ps, geom.grid_w, ps).transpose(0, 2, 1, 3).reshape(geom.K, ps * ps)
    offsets = np.arange(geom.K)[:, None] * N_COLOR_KEYS
    counts = np.bincount((blocks + offsets).ravel(), minlength=geom.K * N_COLOR_KEYS)
    dominant = counts.reshape(geom.K, N_COLOR_KEYS).argmax(axis=1)
    return geom, dominant.reshape(geom.grid_h, geom.grid_w)


def segment_unsupervised(img: Image, n_slots: int = DEFAULT_SLOTS, patch_size: int = 14) -> MaskSet:
    """Colour quantization + 4-connected components on the patch grid."""
    geom, colors = dominant_color_grid(img, patch_size)
    raw = np.zeros(colors.shape, dtype=np.int64)
    color_keys: Dict[int, int] = {}
    next_label = 0
    for key in np.unique(colors):
        components, count = ndimage.label(colors == key)
        inside = components > 0
        raw[inside] = components[inside] - 1 + next_label
        for label in range(next_label, next_label + count):
            color_keys[label] = int(key)
        next_label += count
    logger.debug("Unsupervised segmentation: %d raw components for %d slots", next_label, n_slots)
    return normalize_slots(raw, n_slots, color_keys=color_keys)


def mask_agreement(pred: MaskSet, gt: MaskSet) -> float:
    """Fraction of patches covered by the best one-to-one slot matching."""
    if pred.K != gt.K:
        raise ParameterError(f"Mask sizes differ: {pred.K} vs {gt.K}")
    overlap = np.zeros((pred.n_slots, gt.n_slots), dtype=np.int64)
    np.add.at(overlap, (pred.assignment, gt.assignment), 1)
    rows, cols = linear_sum_assignment(overlap, maximize=True)
    return float(overlap[rows, cols].sum()) / pred.K
