"""
Behaviour-cloning trainer.

Batches are a pure function of (seed, step): epoch e uses the permutation
default_rng([seed, e]).permutation(n). With deterministic=True math runs on
one thread, so a run and its resumed continuation are bit-identical.
"""

import functools
import hashlib
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from core.config import TrainConfig, config_hash
from core.errors import DataError, NumericError
from core.pipeline import FrameAnnotator, OatModel, uint8_to_tensor
from exporters.metrics_exporter import export_metrics, load_metrics
from models.policy import ActionBinning, Vocabulary
from models.tokenizer import reduction_ratio
from sim.dataset import FrameTable, flatten_episodes, load_dataset
from training.metrics import RunMetrics


logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.oat'
MIN_LR_FRACTION = 0.1


@dataclass
class TrainingSet:
    """Per-frame model inputs, annotated once up front."""

    images: np.ndarray                  # (F, H, W, 3) uint8
    assignments: Optional[np.ndarray]   # (F, K) slot ids
    keypoints: Optional[np.ndarray]     # (F, 2), NaN rows = no detection
    lang_ids: np.ndarray                # (F, J)
    action_ids: np.ndarray              # (F, 7)

    def __len__(self) -> int:
        return int(self.action_ids.shape[0])

    def batch(self, index: np.ndarray):
        return (
            uint8_to_tensor(self.images[index]),
            torch.from_numpy(self.assignments[index]) if self.assignments is not None else None,
            self.keypoints[index] if self.keypoints is not None else None,
            torch.from_numpy(self.lang_ids[index]),
            torch.from_numpy(self.action_ids[index]),
        )


def prepare_training_set(table: FrameTable, binning: ActionBinning, vocab: Vocabulary,
                         annotator: FrameAnnotator) -> TrainingSet:
    assignments, keypoints = annotator.annotate(table.images, table.gt_masks, table.states, table.keypoints)
    lang = np.array([vocab.encode_instruction(text) for text in table.instructions], dtype=np.int64)
    return TrainingSet(table.images, assignments, keypoints, lang, binning.encode(table.actions))


@functools.lru_cache(maxsize=8)
def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Indices of batch `step`; consecutive batches walk through seeded epoch permutations."""
    if n < 1:
        raise DataError("Training set is empty")
    position = step * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    filled = 0
    while filled < batch_size:
        epoch, offset = divmod(position + filled, n)
        chunk = _epoch_order(seed, epoch, n)[offset:offset + batch_size - filled]
        out[filled:filled + chunk.size] = chunk
        filled += chunk.size
    return out


def data_order_hash(seed: int, steps: int, batch_size: int, n: int) -> str:
    digest = hashlib.sha256()
    for step in range(steps):
        digest.update(batch_indices(seed, step, batch_size, n).tobytes())
    return digest.hexdigest()


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup, then constant or cosine decay to MIN_LR_FRACTION of the peak."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == 'constant':
        return cfg.learning_rate
    span = max(1, cfg.steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    scale = MIN_LR_FRACTION + (1 - MIN_LR_FRACTION) * 0.5 * (1 + math.cos(math.pi * progress))
    return cfg.learning_rate * scale


def configure_determinism(cfg: TrainConfig) -> None:
    torch.manual_seed(cfg.seed)
    if cfg.deterministic:
        torch.set_num_threads(1)


def load_training_table(cfg: TrainConfig) -> FrameTable:
    path = Path(cfg.dataset_path)
    if not path.exists():
        raise DataError(f"Dataset not found at {path}; run gen-data first")
    return flatten_episodes(load_dataset(path, limit=cfg.episodes))


def train(cfg: TrainConfig, table: Optional[FrameTable] = None, resume: bool = False,
          evaluator: Optional[Callable[[OatModel, int], Dict]] = None,
          progress: Optional[Callable[[int], None]] = None,
          export: bool = True, stop_at: Optional[int] = None) -> Tuple[OatModel, RunMetrics]:
    """
    Train one policy.

    Args:
        table: pre-loaded frames; loaded from cfg.dataset_path when omitted
        resume: continue from output_dir/checkpoint.oat if it exists
        evaluator: called as evaluator(model, step) every eval_every steps
        export: write checkpoint, metrics CSVs and summary to output_dir
        stop_at: stop (and checkpoint) after this many steps, keeping the
            learning-rate schedule of the full run
    """
    cfg.validate()
    configure_determinism(cfg)
    out_dir = Path(cfg.output_dir)
    table = table if table is not None else load_training_table(cfg)

    metrics = RunMetrics()
    start_step = 0
    checkpoint_path = out_dir / CHECKPOINT_NAME
    optimizer_state = None
    if resume and checkpoint_path.exists():
        model, header, payload = OatModel.load(checkpoint_path)
        start_step = int(header['step'])
        optimizer_state = payload.get('optimizer')
        metrics = load_metrics(out_dir)
        metrics.truncate(start_step)
        logger.info("Resuming %s from step %d", out_dir, start_step)
    else:
        binning = ActionBinning(cfg.action_bins).fit(table.actions)
        model = OatModel(cfg, binning)

    annotator = FrameAnnotator(cfg)
    data = prepare_training_set(table, model.binning, model.vocab, annotator)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    logger.info("Training %s: %d frames, %d visual tokens (K=%d), %d steps",
                cfg.tokenizer_mode, len(data), model.n_visual_tokens, model.geom.K, cfg.steps)
    model.train()
    interval_start, interval_examples = time.perf_counter(), 0
    run_start = time.perf_counter()
    end_step = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    for step in range(start_step, end_step):
        lr = learning_rate_at(step, cfg)
        for group in optimizer.param_groups:
            group['lr'] = lr
        index = batch_indices(cfg.seed, step, cfg.batch_size, len(data))
        loss, accuracy = model.loss_and_accuracy(*data.batch(index))
        if not torch.isfinite(loss):
            raise NumericError(
                f"Non-finite loss {float(loss)} at step {step + 1} (lr={lr:.3g}, "
                f"mode={cfg.tokenizer_mode}, batch indices {index[:4].tolist()}...)"
            )
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(trainable, cfg.grad_clip)
        optimizer.step()
        interval_examples += len(index)

        done = step + 1
        if done % cfg.log_every == 0:
            now = time.perf_counter()
            metrics.record_step(done, float(loss), accuracy)
            metrics.record_throughput(done, interval_examples / max(now - interval_start, 1e-9),
                                      now - run_start)
            interval_start, interval_examples = now, 0
            logger.debug("step %d loss %.4f acc %.3f lr %.2e", done, float(loss), accuracy, lr)
        if evaluator is not None and cfg.eval_rollouts and done % cfg.eval_every == 0:
            model.eval()
            metrics.record_eval(done, evaluator(model, done))
            model.train()
        if progress:
            progress(1)
    model.eval()

    metrics.summary = {
        'config_hash': config_hash(cfg),
        'seed': cfg.seed,
        'data_seed': cfg.data_seed,
        'eval_seed': cfg.eval_seed,
        'tokenizer_mode': cfg.tokenizer_mode,
        'visual_tokens': model.n_visual_tokens,
        'reduction_ratio': reduction_ratio(model.tokenizer_config, model.geom),
        'frames': len(data),
        'steps': end_step,
        'batch_size': cfg.batch_size,
        'examples_processed': end_step * cfg.batch_size,
        'data_order_hash': data_order_hash(cfg.seed, end_step, cfg.batch_size, len(data)),
        'final_loss': metrics.steps[-1]['loss'] if metrics.steps else None,
        'final_accuracy': metrics.steps[-1]['accuracy'] if metrics.steps else None,
    }
    if metrics.evals:
        metrics.summary['final_success_rate'] = metrics.evals[-1]['success_rate']
    if export:
        model.save(checkpoint_path, step=end_step, optimizer=optimizer)
        export_metrics(metrics, out_dir, cfg)
    return model, metrics


def train_accuracy(model: OatModel, data: TrainingSet, indices: Optional[Sequence[int]] = None,
                   batch_size: int = 256) -> float:
    """Teacher-forced action-token accuracy over (a subset of) the training frames."""
    indices = np.arange(len(data)) if indices is None else np.asarray(indices)
    correct, total = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            _, acc = model.loss_and_accuracy(*data.batch(chunk))
            correct += acc * len(chunk)
            total += len(chunk)
    return correct / total if total else float('nan')
