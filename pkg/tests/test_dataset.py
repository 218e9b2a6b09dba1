"""
Demonstration dataset: manifest, determinism, replay and flattening.
"""

import json

import numpy as np
import pytest
import yaml

from core.errors import DataError
from sim.dataset import (
    MANIFEST_NAME, generate_dataset, load_dataset, read_manifest, record_episode, replay_check,
)
from sim.render import DEFAULT_GEOMETRY


def test_manifest_fields(tiny_dataset):
    manifest = read_manifest(tiny_dataset)
    assert manifest['episode_count'] == 3
    assert manifest['geometry'] == {'image_size': 112, 'patch_size': 14, 'grid_h': 8, 'grid_w': 8}
    assert len(manifest['episodes']) == 3
    assert manifest['step_count'] > 0


def test_episodes_carry_annotations(tiny_episodes):
    for episode in tiny_episodes:
        for step in episode.steps:
            assert step.image.height == 112
            assert step.masks.K == 64
            assert step.keypoint.in_frame(112, 112)
            assert not step.action.is_no_motion


def test_generation_is_byte_identical(tmp_path):
    a = generate_dataset(2, 3, tmp_path / 'a', DEFAULT_GEOMETRY, 100)
    b = generate_dataset(2, 3, tmp_path / 'b', DEFAULT_GEOMETRY, 100)
    for name in [MANIFEST_NAME] + read_manifest(a)['episodes']:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_replay_check_passes(tiny_dataset):
    assert replay_check(tiny_dataset) == []


def test_replay_check_reports_tampering(tiny_dataset, tmp_path):
    copy_dir = tmp_path / 'copy'
    copy_dir.mkdir()
    manifest = read_manifest(tiny_dataset)
    (copy_dir / MANIFEST_NAME).write_text((tiny_dataset / MANIFEST_NAME).read_text())
    for name in manifest['episodes']:
        (copy_dir / name).write_text((tiny_dataset / name).read_text())
    first = copy_dir / manifest['episodes'][0]
    record = json.loads(first.read_text())
    record['steps'][0]['state']['gripper']['x'] += 0.2
    first.write_text(json.dumps(record))
    assert any('episode 0 step 0' in line for line in replay_check(copy_dir))


def test_missing_manifest_is_data_error(tmp_path):
    with pytest.raises(DataError):
        read_manifest(tmp_path)


def test_unsupported_version_is_data_error(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text(yaml.safe_dump({'version': 99}))
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_zero_episodes_rejected(tmp_path):
    with pytest.raises(DataError):
        generate_dataset(0, 0, tmp_path / 'none')


def test_flatten_aligns_frames(tiny_episodes, tiny_table):
    total = sum(len(e.steps) for e in tiny_episodes)
    assert len(tiny_table) == total
    assert tiny_table.images.shape == (total, 112, 112, 3)
    assert tiny_table.actions.shape == (total, 7)
    assert np.all(np.diff(tiny_table.episode_index) >= 0)


@pytest.mark.parametrize('seed', [7, 14, 15, 25])
def test_recorded_episode_has_steps(seed):
    episode = record_episode(seed)
    assert len(episode.steps) >= 1
    assert episode.success
