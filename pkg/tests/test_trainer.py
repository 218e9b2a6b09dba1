"""
Trainer: batch order, schedule, determinism, resume and failure modes.
"""

import numpy as np
import pytest
import torch

from core.errors import DataError, NumericError
from core.pipeline import FrameAnnotator, OatModel
from exporters.metrics_exporter import read_csv
from training.evaluator import training_evaluator
from training.trainer import (
    CHECKPOINT_NAME, batch_indices, data_order_hash, learning_rate_at, prepare_training_set, train,
    train_accuracy,
)
from sim.dataset import flatten_episodes


def test_each_epoch_visits_every_frame_once():
    n, batch = 12, 4
    seen = np.concatenate([batch_indices(0, step, batch, n) for step in range(3)])
    assert sorted(seen.tolist()) == list(range(n))


def test_batches_span_epoch_boundaries():
    n = 10
    rows = np.concatenate([batch_indices(1, step, 4, n) for step in range(5)])
    assert sorted(rows[:10].tolist()) == list(range(n))
    assert sorted(rows[10:20].tolist()) == list(range(n))


def test_batch_order_depends_only_on_seed_and_step():
    assert np.array_equal(batch_indices(3, 7, 5, 40), batch_indices(3, 7, 5, 40))
    assert not np.array_equal(batch_indices(3, 7, 5, 40), batch_indices(4, 7, 5, 40))
    assert data_order_hash(0, 10, 4, 30) == data_order_hash(0, 10, 4, 30)


def test_empty_training_set_rejected():
    with pytest.raises(DataError):
        batch_indices(0, 0, 4, 0)


def test_learning_rate_schedule(tiny_config):
    cfg = tiny_config.replace(learning_rate=1.0, warmup_steps=4, steps=104, lr_schedule='cosine')
    assert learning_rate_at(0, cfg) == pytest.approx(0.25)
    assert learning_rate_at(3, cfg) == pytest.approx(1.0)
    assert learning_rate_at(4, cfg) == pytest.approx(1.0)
    assert learning_rate_at(104, cfg) == pytest.approx(0.1)
    constant = cfg.replace(lr_schedule='constant')
    assert learning_rate_at(90, constant) == 1.0


def test_short_run_writes_outputs(tiny_config, tiny_table):
    model, metrics = train(tiny_config, tiny_table)
    out = tiny_config.output_dir
    assert len(metrics.steps) == 6
    assert metrics.summary['examples_processed'] == 48
    assert metrics.summary['visual_tokens'] == 16
    assert len(read_csv(f'{out}/metrics.csv')) == 6
    assert len(read_csv(f'{out}/throughput.csv')) == 6
    loaded, header, _ = OatModel.load(f'{out}/{CHECKPOINT_NAME}')
    assert header['step'] == 6
    for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(a, b)


def test_same_seed_reproduces_metrics(tiny_config, tiny_table, tmp_path):
    _, first = train(tiny_config.replace(output_dir=str(tmp_path / 'a')), tiny_table)
    _, second = train(tiny_config.replace(output_dir=str(tmp_path / 'b')), tiny_table)
    assert first.steps == second.steps
    assert first.summary['data_order_hash'] == second.summary['data_order_hash']


def test_resume_is_bit_identical(tiny_config, tiny_table, tmp_path):
    straight_cfg = tiny_config.replace(output_dir=str(tmp_path / 'straight'))
    split_cfg = tiny_config.replace(output_dir=str(tmp_path / 'split'))
    straight, straight_metrics = train(straight_cfg, tiny_table)

    train(split_cfg, tiny_table, stop_at=3)
    resumed, resumed_metrics = train(split_cfg, tiny_table, resume=True)

    assert resumed_metrics.steps == straight_metrics.steps
    for a, b in zip(straight.state_dict().values(), resumed.state_dict().values()):
        assert torch.equal(a, b)


@pytest.mark.parametrize('mode', ['full-patch', 'single-token', 'object-only'])
def test_other_tokenizer_modes_train(tiny_config, tiny_table, mode):
    cfg = tiny_config.replace(tokenizer_mode=mode, steps=2)
    _, metrics = train(cfg, tiny_table, export=False)
    assert np.isfinite(metrics.steps[-1]['loss'])


def test_unsupervised_masks_train(tiny_config, tiny_table):
    cfg = tiny_config.replace(mask_source='unsupervised', pool='attention', steps=2)
    _, metrics = train(cfg, tiny_table, export=False)
    assert len(metrics.steps) == 2


def test_periodic_evaluation_is_recorded(tiny_config, tiny_table):
    cfg = tiny_config.replace(eval_rollouts=2, eval_every=3)
    evaluator = training_evaluator(2, cfg.eval_seed, max_steps=5)
    _, metrics = train(cfg, tiny_table, evaluator=evaluator)
    assert [row['step'] for row in metrics.evals] == [3, 6]
    assert 'final_success_rate' in metrics.summary


def test_non_finite_loss_is_numeric_error(tiny_config, tiny_table, monkeypatch):
    def broken(self, *batch):
        return torch.tensor(float('nan'), requires_grad=True), 0.0

    monkeypatch.setattr(OatModel, 'loss_and_accuracy', broken)
    with pytest.raises(NumericError, match='step 1'):
        train(tiny_config, tiny_table, export=False)


def test_missing_dataset_is_data_error(tiny_config, tmp_path):
    with pytest.raises(DataError):
        train(tiny_config.replace(dataset_path=str(tmp_path / 'nowhere')))


@pytest.mark.slow
def test_overfits_two_episodes(tiny_config, tiny_episodes):
    table = flatten_episodes(tiny_episodes[:2])
    cfg = tiny_config.replace(steps=500, log_every=50, policy_layers=2, policy_width=64)
    model, _ = train(cfg, table, export=False)
    data = prepare_training_set(table, model.binning, model.vocab, FrameAnnotator(cfg))
    assert train_accuracy(model, data) > 0.95
