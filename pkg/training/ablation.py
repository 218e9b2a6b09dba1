"""
Tokenizer ablation suite.

Every variant is trained from the same frames with the same seed and step
budget, then evaluated on the same rollout seeds. Equal data order is
checked through the per-run data-order hash.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.config import TrainConfig
from core.errors import ParameterError
from exporters.metrics_exporter import write_csv
from sim.dataset import FrameTable
from sim.scene import RELATIONS
from training.evaluator import evaluate
from training.trainer import load_training_table, train


logger = logging.getLogger(__name__)

ORDERING = ('oat-average', 'oat-attention', 'object-only', 'single-token')
ORDERING_TOLERANCE = 0.03
TABLE_COLUMNS = ('variant', 'tokens') + RELATIONS + ('average', 'stderr')


@dataclass(frozen=True)
class Variant:
    name: str
    overrides: Tuple[Tuple[str, object], ...]

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return cfg.replace(**dict(self.overrides))


BASE_VARIANTS = (
    Variant('single-token', (('tokenizer_mode', 'single-token'),)),
    Variant('object-only', (('tokenizer_mode', 'object-only'), ('pool', 'average'))),
    Variant('oat-attention', (('tokenizer_mode', 'oat'), ('pool', 'attention'))),
    Variant('oat-average', (('tokenizer_mode', 'oat'), ('pool', 'average'))),
)
GRID_VARIANT = Variant('oat-G5', (('tokenizer_mode', 'oat'), ('pool', 'average'), ('agent_grid', 5)))
SLOTS_VARIANT = Variant('oat-N15', (('tokenizer_mode', 'oat'), ('pool', 'average'), ('object_slots', 15)))


def ablation_variants(include_grid: bool = False, include_slots: bool = False) -> List[Variant]:
    variants = list(BASE_VARIANTS)
    if include_grid:
        variants.append(GRID_VARIANT)
    if include_slots:
        variants.append(SLOTS_VARIANT)
    return variants


def table_row(name: str, tokens: int, report: Dict) -> Dict:
    row = {'variant': name, 'tokens': tokens, 'stderr': report['stderr']}
    rates = []
    for relation in RELATIONS:
        rate = report['per_relation'][relation]['success_rate']
        row[relation] = rate
        rates.append(rate)
    row['average'] = float(np.nanmean(rates)) if not np.all(np.isnan(rates)) else float('nan')
    return row


def check_ablation_ordering(rows: Sequence[Dict], tolerance: float = ORDERING_TOLERANCE) -> List[str]:
    """
    Compare average success along oat-average >= oat-attention >= object-only
    >= single-token. Returns one message per violated pair; each is logged
    at WARNING.
    """
    averages = {row['variant']: row['average'] for row in rows}
    deviations = []
    present = [name for name in ORDERING if name in averages]
    for better, worse in zip(present, present[1:]):
        gap = averages[worse] - averages[better]
        if gap > tolerance:
            message = (f"Ablation ordering violated: {better} ({averages[better]:.3f}) "
                       f"< {worse} ({averages[worse]:.3f}) by {gap:.3f}")
            logger.warning(message)
            deviations.append(message)
    return deviations


def run_ablation_suite(base_cfg: TrainConfig, include_grid: bool = False, include_slots: bool = False,
                       table: Optional[FrameTable] = None,
                       progress: Optional[Callable[[int], None]] = None) -> Dict:
    """
    Train and evaluate each variant at base_cfg's budget.

    Returns {'rows': [...], 'deviations': [...], 'data_order_hash': str};
    ablation.csv is written to base_cfg.output_dir.
    """
    base_cfg.validate()
    table = table if table is not None else load_training_table(base_cfg)
    out_dir = Path(base_cfg.output_dir)
    rows, hashes = [], {}
    for variant in ablation_variants(include_grid, include_slots):
        cfg = variant.apply(base_cfg).replace(output_dir=str(out_dir / variant.name)).validate()
        logger.info("Ablation variant %s", variant.name)
        model, metrics = train(cfg, table)
        hashes[variant.name] = metrics.summary['data_order_hash']
        report = evaluate(model, cfg.eval_rollouts, cfg.eval_seed, cfg.workers, cfg.max_episode_steps)
        rows.append(table_row(variant.name, model.n_visual_tokens, report.get_report()))
        if progress:
            progress(1)

    if len(set(hashes.values())) > 1:
        raise ParameterError(f"Ablation variants saw different data orders: {hashes}")
    write_csv(rows, TABLE_COLUMNS, out_dir / 'ablation.csv')
    return {
        'rows': rows,
        'deviations': check_ablation_ordering(rows),
        'data_order_hash': next(iter(hashes.values()), None),
    }
