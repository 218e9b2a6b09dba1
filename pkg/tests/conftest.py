"""
Shared fixtures: a tiny generated dataset and a small training config.
"""

import sys
from pathlib import Path

import pytest

# Tests import the flat packages (core, sim, models, ...) from the repo root.
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from core.config import TrainConfig  # noqa: E402
from sim.dataset import flatten_episodes, generate_dataset, load_dataset  # noqa: E402
from sim.render import DEFAULT_GEOMETRY  # noqa: E402


TINY_EPISODES = 3


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    """Three expert episodes at 112x112 / 14 px patches."""
    out = tmp_path_factory.mktemp('data') / 'tiny'
    return generate_dataset(TINY_EPISODES, 7, out, DEFAULT_GEOMETRY, 100)


@pytest.fixture(scope='session')
def tiny_episodes(tiny_dataset):
    return load_dataset(tiny_dataset)


@pytest.fixture(scope='session')
def tiny_table(tiny_episodes):
    return flatten_episodes(tiny_episodes)


@pytest.fixture
def tiny_config(tiny_dataset, tmp_path):
    """Small, fast model; every step logged."""
    return TrainConfig(
        dataset_path=str(tiny_dataset),
        episodes=TINY_EPISODES,
        image_size=112,
        patch_size=14,
        feature_dim=16,
        policy_layers=1,
        policy_width=32,
        policy_heads=2,
        action_bins=16,
        batch_size=8,
        learning_rate=1e-3,
        lr_schedule='constant',
        warmup_steps=0,
        steps=6,
        log_every=1,
        eval_every=3,
        eval_rollouts=0,
        output_dir=str(tmp_path / 'run'),
    ).validate()
