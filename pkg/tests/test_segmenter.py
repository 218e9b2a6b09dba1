"""
Slot normalization, unsupervised segmentation and mask agreement.
"""

import numpy as np
import pytest

from core.errors import ParameterError
from core.imaging import Image
from core.masks import MaskSet
from models.segmenter import (
    mask_agreement, normalize_ground_truth, normalize_slots, segment_oracle, segment_unsupervised,
)
from sim.render import DEFAULT_GEOMETRY, render
from sim.scene import sample_task


def test_single_part_fills_slot_zero():
    masks = normalize_slots(np.zeros((4, 4), dtype=np.int64), 7)
    assert masks.counts.tolist() == [16, 0, 0, 0, 0, 0, 0]


def test_nine_parts_merge_to_seven():
    labels = np.arange(9).reshape(3, 3)
    masks = normalize_slots(labels, 7)
    assert masks.n_slots == 7
    assert masks.non_empty == 7
    assert masks.counts.sum() == 9


def test_slots_ordered_by_size_then_first_patch():
    labels = np.array([[5, 5, 9], [5, 2, 9], [2, 2, 9]])
    masks = normalize_slots(labels, 4)
    assert masks.counts.tolist() == [3, 3, 3, 0]
    # three parts of size 3: first members are patches 0, 2 and 4
    assert masks.assignment[0] == 0
    assert masks.assignment[2] == 1
    assert masks.assignment[4] == 2


def test_smallest_part_merges_into_same_colour_neighbour():
    labels = np.array([
        [0, 0, 0, 1],
        [0, 0, 0, 1],
        [2, 2, 3, 1],
        [2, 2, 2, 1],
    ])
    keys = {0: 10, 1: 20, 2: 30, 3: 20}
    masks = normalize_slots(labels, 3, color_keys=keys)
    grid = masks.as_grid(4, 4)
    # part 3 (one patch) touches parts 0, 1 and 2; only part 1 shares its colour
    assert grid[2, 2] == grid[0, 3]


def test_zero_slots_rejected():
    with pytest.raises(ParameterError):
        normalize_slots(np.zeros((2, 2)), 0)


def test_solid_image_is_one_slot():
    img = Image(np.full((3, 56, 56), 0.5))
    masks = segment_unsupervised(img, 7, 14)
    assert masks.counts.tolist() == [16, 0, 0, 0, 0, 0, 0]


def test_two_squares_on_table():
    pixels = np.full((56, 56, 3), 150, dtype=np.uint8)
    pixels[0:14, 0:14] = (220, 40, 40)
    pixels[28:56, 28:56] = (40, 70, 220)
    masks = segment_unsupervised(Image.from_uint8(pixels), 7, 14)
    assert masks.non_empty == 3
    assert masks.counts[:3].tolist() == [11, 4, 1]
    grid = masks.as_grid(4, 4)
    assert grid[0, 0] == 2 and grid[3, 3] == 1 and grid[0, 3] == 0


def test_same_colour_disconnected_regions_stay_apart():
    pixels = np.full((56, 56, 3), 150, dtype=np.uint8)
    pixels[0:14, 0:14] = (220, 40, 40)
    pixels[42:56, 42:56] = (220, 40, 40)
    masks = segment_unsupervised(Image.from_uint8(pixels), 7, 14)
    assert masks.non_empty == 3


def test_agreement_is_permutation_invariant():
    gt = MaskSet(np.array([0, 0, 1, 1, 2, 2]), 3)
    permuted = MaskSet(np.array([2, 2, 0, 0, 1, 1]), 3)
    assert mask_agreement(permuted, gt) == 1.0
    half = MaskSet(np.array([0, 0, 0, 0, 0, 0]), 3)
    assert mask_agreement(half, gt) == pytest.approx(2 / 6)


def test_ground_truth_normalization_of_rendered_scene():
    state, _ = sample_task(0)
    _, raw, _ = render(state, DEFAULT_GEOMETRY)
    masks = normalize_ground_truth(raw, state, 7, DEFAULT_GEOMETRY)
    assert masks.n_slots == 7
    assert masks.counts.sum() == 64
    assert masks.counts[0] == masks.counts.max()


def test_oracle_from_episode_step(tiny_episodes):
    step = tiny_episodes[0].steps[0]
    masks = segment_oracle(step, 7, DEFAULT_GEOMETRY)
    assert masks.K == 64


def test_unsupervised_recovers_rendered_objects():
    scores = []
    for seed in range(100):
        state, _ = sample_task(seed)
        image, raw, _ = render(state, DEFAULT_GEOMETRY)
        gt = normalize_ground_truth(raw, state, 7, DEFAULT_GEOMETRY)
        scores.append(mask_agreement(segment_unsupervised(image, 7, 14), gt))
    assert np.mean(scores) >= 0.8
