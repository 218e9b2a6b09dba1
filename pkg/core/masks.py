"""
Patch-resolution mask partitions and the colour quantizer they are keyed by.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.errors import ParameterError


# 4 levels per channel; keys fit in [0, 64)
QUANT_STEP = 64
QUANT_LEVELS = 256 // QUANT_STEP
N_COLOR_KEYS = QUANT_LEVELS ** 3


def quantize_colors(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 RGB values (..., 3) to integer colour keys (...)."""
    q = (np.asarray(pixels, dtype=np.int64) // QUANT_STEP).clip(0, QUANT_LEVELS - 1)
    return q[..., 0] * QUANT_LEVELS * QUANT_LEVELS + q[..., 1] * QUANT_LEVELS + q[..., 2]


@dataclass(frozen=True)
class MaskSet:
    """
    Hard partition of the K patches into n_slots slots.

    assignment[k] is the slot owning patch k. Slots may be empty.
    """

    assignment: np.ndarray
    n_slots: int

    def __post_init__(self):
        a = self.assignment
        if a.ndim != 1:
            raise ParameterError(f"Mask assignment must be 1-D, got shape {a.shape}")
        if self.n_slots < 1:
            raise ParameterError(f"n_slots must be >= 1, got {self.n_slots}")
        if a.size and (a.min() < 0 or a.max() >= self.n_slots):
            raise ParameterError(f"Slot ids must lie in [0, {self.n_slots})")

    @property
    def K(self) -> int:
        return int(self.assignment.size)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_slots)

    @property
    def non_empty(self) -> int:
        return int((self.counts > 0).sum())

    def members(self, slot: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == slot)

    def as_grid(self, grid_h: int, grid_w: int) -> np.ndarray:
        return self.assignment.reshape(grid_h, grid_w)

    @classmethod
    def from_labels(cls, labels: np.ndarray, n_slots: Optional[int] = None) -> 'MaskSet':
        labels = np.asarray(labels, dtype=np.int64).ravel()
        return cls(labels, int(n_slots if n_slots is not None else labels.max() + 1))
