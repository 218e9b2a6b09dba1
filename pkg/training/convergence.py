"""
Oat vs full-patch convergence comparison.

Both tokenizer modes are trained per seed on the same frames and step budget.
The comparison passes when oat reaches the accuracy threshold in at most
STEP_RATIO_LIMIT of the full-patch steps, or when it matches full-patch
closed-loop success within SUCCESS_MARGIN while running at least
SPEEDUP_FLOOR times the examples per second.
"""

import logging
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from core.config import TrainConfig
from core.pipeline import geometry, tokenizer_config
from exporters.metrics_exporter import write_csv
from models.policy import PolicyConfig
from sim.dataset import FrameTable
from training.bench import bench_throughput
from training.evaluator import evaluate
from training.metrics import ACCURACY_THRESHOLD, SMOOTHING_WINDOW, compare_convergence
from training.trainer import load_training_table, train


logger = logging.getLogger(__name__)

MODES = ('oat', 'full-patch')
DEFAULT_SEEDS = (0, 1, 2)
STEP_RATIO_LIMIT = 0.75
SUCCESS_MARGIN = 0.05
SPEEDUP_FLOOR = 1.5

TABLE_COLUMNS = ['seed', 'oat_steps', 'full_steps', 'step_ratio', 'oat_success', 'full_success']


def throughput_ratio(cfg: TrainConfig, repeats: int = 3) -> float:
    """Examples/sec of oat over full-patch for cfg's policy size."""
    policy_cfg = PolicyConfig(cfg.policy_layers, cfg.policy_width, cfg.policy_heads, cfg.action_bins,
                              cfg.feature_dim, cfg.max_language_tokens)
    configs = [tokenizer_config(cfg.replace(tokenizer_mode=mode)) for mode in MODES]
    oat, full = bench_throughput(configs, geometry(cfg), policy_cfg, cfg.batch_size, repeats, seed=cfg.seed)
    return oat.examples_per_sec / full.examples_per_sec


def _mean(values: Sequence[Optional[float]]) -> float:
    present = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(present)) if present else float('nan')


def summarize_comparison(rows: Sequence[Dict], speedup: float) -> Dict:
    """Verdict over per-seed rows; a seed where either run misses the threshold leaves the step ratio undefined."""
    ratios = [row['step_ratio'] for row in rows]
    step_ratio = _mean(ratios) if rows and all(r is not None for r in ratios) else float('nan')
    oat_success = _mean([row['oat_success'] for row in rows])
    full_success = _mean([row['full_success'] for row in rows])
    converges_faster = bool(step_ratio <= STEP_RATIO_LIMIT)
    matches_success = bool(abs(oat_success - full_success) <= SUCCESS_MARGIN)
    return {
        'mean_step_ratio': step_ratio,
        'oat_success': oat_success,
        'full_success': full_success,
        'speedup': speedup,
        'converges_faster': converges_faster,
        'matches_success': matches_success,
        'passed': converges_faster or (matches_success and speedup >= SPEEDUP_FLOOR),
    }


def run_convergence_comparison(base_cfg: TrainConfig, seeds: Sequence[int] = DEFAULT_SEEDS,
                               threshold: float = ACCURACY_THRESHOLD, window: int = SMOOTHING_WINDOW,
                               table: Optional[FrameTable] = None, bench_repeats: int = 3,
                               progress: Optional[Callable[[int], None]] = None) -> Dict:
    """
    Train oat and full-patch for every seed and compare them.

    Closed-loop success is measured only when base_cfg.eval_rollouts > 0.
    Returns the summary plus 'rows'; convergence.csv is written to
    base_cfg.output_dir.
    """
    base_cfg.validate()
    table = table if table is not None else load_training_table(base_cfg)
    out_dir = Path(base_cfg.output_dir)
    rows: List[Dict] = []
    for seed in seeds:
        runs, success = {}, {}
        for mode in MODES:
            cfg = base_cfg.replace(tokenizer_mode=mode, seed=seed,
                                   output_dir=str(out_dir / f'{mode}-seed{seed}')).validate()
            logger.info("Convergence run %s, seed %d", mode, seed)
            model, runs[mode] = train(cfg, table)
            success[mode] = None
            if cfg.eval_rollouts:
                report = evaluate(model, cfg.eval_rollouts, cfg.eval_seed, cfg.workers, cfg.max_episode_steps)
                success[mode] = report.success_rate
            if progress:
                progress(1)
        result = compare_convergence(runs['oat'], runs['full-patch'], threshold, window)
        rows.append({'seed': seed, 'oat_steps': result['oat_steps'], 'full_steps': result['full_steps'],
                     'step_ratio': result['step_ratio'], 'oat_success': success['oat'],
                     'full_success': success['full-patch']})

    speedup = throughput_ratio(base_cfg, bench_repeats)
    summary = summarize_comparison(rows, speedup)
    if not summary['passed']:
        logger.warning("Oat neither converges faster nor matches success at %.2fx throughput", speedup)
    write_csv(rows, TABLE_COLUMNS, out_dir / 'convergence.csv')
    summary.update({'threshold': threshold, 'rows': rows})
    return summary
