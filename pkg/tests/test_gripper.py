"""
Gripper keypoint detector: heuristic accuracy, metrics, training and persistence.
"""

import numpy as np
import pytest
import torch

from core.checkpoint import save_checkpoint
from core.errors import DataError, ParameterError
from core.imaging import PixelPoint
from models.gripper import (
    NO_DETECTION, DetectorParams, DetectorSamples, DetectorTrainConfig, GripperDetectorNet,
    KeypointPrediction, build_detector_samples, detect, detector_grad_check, detector_metrics,
    eval_detector, load_detector, save_detector, split_holdout, train_detector,
)
from sim.dataset import record_episode
from sim.render import DEFAULT_GEOMETRY, render
from sim.scene import sample_task


HEURISTIC = DetectorParams('heuristic')


@pytest.mark.parametrize('seed', range(8))
def test_heuristic_within_two_pixels(seed):
    state, _ = sample_task(seed)
    image, _, truth = render(state, DEFAULT_GEOMETRY)
    pred = detect(image, HEURISTIC)
    assert pred.detected
    assert np.hypot(pred.point.u - truth.u, pred.point.v - truth.v) <= 2.0


def test_heuristic_reports_nothing_without_gripper():
    state, _ = sample_task(0)
    image, _, _ = render(state, DEFAULT_GEOMETRY, draw_gripper=False)
    pred = detect(image, HEURISTIC)
    assert not pred.detected
    assert pred.point is None


def test_detector_params_validation():
    with pytest.raises(ParameterError):
        DetectorParams('heuristic', threshold=1.5)
    with pytest.raises(ParameterError):
        DetectorParams('learned')
    with pytest.raises(ParameterError):
        DetectorParams('sift')


def test_metrics_for_oracle_predictions():
    keypoints = np.array([[10.0, 10.0], [50.0, 20.0], [np.nan, np.nan]])
    samples = DetectorSamples(np.zeros((3, 56, 56, 3), dtype=np.uint8), keypoints, patch_size=14)
    preds = [KeypointPrediction(PixelPoint(10.0, 10.0), 1.0),
             KeypointPrediction(PixelPoint(50.0, 20.0), 1.0), NO_DETECTION]
    metrics = detector_metrics(preds, samples)
    assert metrics['median_px_error'] == 0.0
    assert metrics['hit_rate'] == 1.0
    assert metrics['miss_rate'] == 0.0
    assert metrics['false_positive_rate'] == 0.0


def test_metrics_count_misses_and_false_positives():
    keypoints = np.array([[10.0, 10.0], [50.0, 20.0], [np.nan, np.nan]])
    samples = DetectorSamples(np.zeros((3, 56, 56, 3), dtype=np.uint8), keypoints, patch_size=14)
    preds = [KeypointPrediction(PixelPoint(20.0, 10.0), 0.9), NO_DETECTION,
             KeypointPrediction(PixelPoint(1.0, 1.0), 0.7)]
    metrics = detector_metrics(preds, samples)
    assert metrics['median_px_error'] == pytest.approx(10.0)
    assert metrics['hit_rate'] == 0.0
    assert metrics['miss_rate'] == 0.5
    assert metrics['false_positive_rate'] == 1.0


def test_heuristic_on_dataset_samples(tiny_episodes):
    samples = build_detector_samples(tiny_episodes, negative_fraction=0.2, seed=0, limit=20)
    assert len(samples) == 24
    assert (~samples.present).sum() == 4
    metrics = eval_detector(HEURISTIC, samples)
    assert metrics['hit_rate'] >= 0.95
    assert metrics['false_positive_rate'] == 0.0


def test_build_samples_needs_frames():
    with pytest.raises(DataError):
        build_detector_samples([])


def test_split_holdout_is_disjoint_and_complete():
    train, hold = split_holdout(50, 0.2, seed=1)
    assert hold.size == 10
    assert np.intersect1d(train, hold).size == 0
    assert np.union1d(train, hold).tolist() == list(range(50))


def test_learned_detector_gradients():
    assert detector_grad_check(GripperDetectorNet(width=4, seed=0), n_coords=20) < 1e-4


def test_short_training_run_and_roundtrip(tiny_episodes, tmp_path):
    samples = build_detector_samples(tiny_episodes, negative_fraction=0.1, seed=0, limit=20)
    hp = DetectorTrainConfig(steps=5, batch_size=8, width=4, holdout_fraction=0.5, log_every=0)
    params, metrics = train_detector(samples, hp)
    assert params.mode == 'learned'
    assert len(metrics['losses']) == 5
    assert metrics['holdout_frames'] == 11

    path = save_detector(params, tmp_path / 'detector.oat')
    loaded = load_detector(path)
    assert loaded.threshold == params.threshold
    for a, b in zip(params.net.parameters(), loaded.net.parameters()):
        assert torch.equal(a, b)


def test_loading_a_policy_checkpoint_as_detector_fails(tmp_path):
    path = save_checkpoint(tmp_path / 'policy.oat', 'policy', {}, {})
    with pytest.raises(DataError):
        load_detector(path)


def expert_frames(n_frames, negative_fraction=0.0):
    episodes, total, seed = [], 0, 0
    while total < n_frames:
        episode = record_episode(seed)
        episodes.append(episode)
        total += len(episode.steps)
        seed += 1
    return build_detector_samples(episodes, negative_fraction, seed=0, limit=n_frames)


def test_single_frame_loss_decreases_monotonically(tiny_episodes):
    samples = build_detector_samples(tiny_episodes, negative_fraction=0.0, limit=1)
    hp = DetectorTrainConfig(steps=100, batch_size=1, learning_rate=1e-4, optimizer='sgd',
                             width=4, holdout_fraction=0.0, log_every=0)
    _, metrics = train_detector(samples, hp)
    losses = np.array(metrics['losses'])
    assert len(losses) == 100
    assert (np.diff(losses) <= 0).all()
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_heuristic_miss_rate_over_a_thousand_frames():
    samples = expert_frames(1000)
    metrics = eval_detector(HEURISTIC, samples)
    assert metrics['miss_rate'] < 0.01


@pytest.mark.slow
def test_learned_detector_hits_within_half_a_patch_on_holdout():
    samples = expert_frames(5000, negative_fraction=0.1)
    hp = DetectorTrainConfig(holdout_fraction=0.2, log_every=0)
    _, metrics = train_detector(samples, hp)
    assert metrics['holdout_frames'] >= 1000
    assert metrics['hit_rate'] >= 0.9
