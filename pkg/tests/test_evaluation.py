"""
Closed-loop evaluation, throughput bench and ablation bookkeeping.
"""

import logging
import math
from pathlib import Path

import pytest

from core.errors import ParameterError
from core.pipeline import OatModel
from models.policy import PolicyConfig
from models.tokenizer import TokenizerConfig
from sim.render import DEFAULT_GEOMETRY
from sim.scene import RELATIONS
from training.ablation import (
    BASE_VARIANTS, ORDERING, TABLE_COLUMNS, ablation_variants, check_ablation_ordering,
    run_ablation_suite, table_row,
)
from training.bench import (
    BenchRow, analytic_attention_ratio, attention_ops, bench_table, bench_throughput, is_monotone,
)
from training.convergence import (
    TABLE_COLUMNS as CONVERGENCE_COLUMNS, run_convergence_comparison, summarize_comparison,
)
from training.evaluator import EvalReport, RolloutResult, evaluate, expert_policy, random_policy
from training.trainer import CHECKPOINT_NAME, train


def test_expert_calibrates_high():
    report = evaluate(expert_policy, n_rollouts=100, seed=100000, workers=4)
    assert report.success_rate >= 0.98


def test_random_policy_stays_near_zero():
    report = evaluate(random_policy, n_rollouts=200, seed=100000, workers=4)
    assert report.success_rate <= 0.05
    assert all(r.steps >= 1 for r in report.results)


def test_identical_seeds_identical_results():
    a = evaluate(random_policy, n_rollouts=6, seed=500, max_steps=20)
    b = evaluate(random_policy, n_rollouts=6, seed=500, max_steps=20)
    assert a.results == b.results
    assert a.success_rate == b.success_rate


def test_worker_count_does_not_change_results():
    serial = evaluate(random_policy, n_rollouts=8, seed=42, max_steps=15)
    threaded = evaluate(random_policy, n_rollouts=8, seed=42, workers=4, max_steps=15)
    assert serial.results == threaded.results


def test_report_statistics():
    results = [RolloutResult(i, 10 + i, RELATIONS[i % 3], i < 3, 5) for i in range(4)]
    report = EvalReport(results).get_report()
    assert report['success_rate'] == 0.75
    assert report['stderr'] == pytest.approx(math.sqrt(0.75 * 0.25 / 4))
    assert report['per_relation']['in'] == {'rollouts': 2, 'success_rate': 0.5}
    assert report['per_seed'][13] is False


def test_checkpoint_path_is_accepted(tiny_config, tiny_table):
    train(tiny_config.replace(steps=2), tiny_table)
    path = f'{tiny_config.output_dir}/{CHECKPOINT_NAME}'
    report = evaluate(path, n_rollouts=2, max_steps=3)
    assert report.rollouts == 2
    assert all(r.steps <= 3 for r in report.results)


def test_model_instance_is_accepted(tiny_config, tiny_table):
    model, _ = train(tiny_config.replace(steps=1), tiny_table, export=False)
    assert isinstance(model, OatModel)
    assert evaluate(model, n_rollouts=1, max_steps=2).rollouts == 1


# (J, Ta, Tb) -> analytic attention-cost ratio
EXPECTED_RATIOS = {
    (12, 64, 16): 5.63,
    (20, 256, 16): 43.3,
    (12, 16, 16): 1.0,
}


@pytest.mark.parametrize('args', list(EXPECTED_RATIOS))
def test_analytic_attention_ratio(args):
    assert analytic_attention_ratio(*args) == pytest.approx(EXPECTED_RATIOS[args], abs=0.01)


def test_attention_ops_grow_quadratically():
    assert attention_ops(12, 16, 32, 2) == 2 * 2 * 35 ** 2 * 32


def test_bench_table_shape():
    small = PolicyConfig(layers=1, width=16, heads=2, n_bins=8, feature_dim=8)
    rows = bench_throughput([1, 7, 16], DEFAULT_GEOMETRY, small, batch_size=2, repeats=1, warmup=0)
    assert [r.tokens for r in rows] == [1, 7, 16]
    assert rows[-1].measured_ratio == 1.0
    assert rows[0].analytic_ratio == pytest.approx(analytic_attention_ratio(12, 16, 1))
    table = bench_table(rows)
    assert set(table[0]) >= {'label', 'tokens', 'examples_per_sec', 'analytic_ratio', 'measured_ratio'}


def test_bench_labels_tokenizer_configs():
    small = PolicyConfig(layers=1, width=16, heads=2, n_bins=8, feature_dim=8)
    configs = [TokenizerConfig('oat', 7, 3, dim=8), TokenizerConfig('full-patch', dim=8)]
    rows = bench_throughput(configs, DEFAULT_GEOMETRY, small, batch_size=2, repeats=1, warmup=0)
    assert [(r.label, r.tokens) for r in rows] == [('oat(N=7,G=3)', 16), ('full-patch', 64)]


def test_monotone_and_within_checks():
    rows = [BenchRow('a', 1, 10.0, 0.1, 0.01, 1), BenchRow('b', 7, 5.0, 0.2, 0.02, 2)]
    assert is_monotone(rows)
    assert not is_monotone(rows, key='examples_per_sec')
    row = BenchRow('c', 7, 5.0, 0.2, 0.02, 2, analytic_ratio=4.0, attention_ratio=3.0)
    assert row.within(2.0)
    assert not BenchRow('d', 7, 5.0, 0.2, 0.02, 2, analytic_ratio=4.0, attention_ratio=1.5).within(2.0)


@pytest.mark.slow
def test_attention_cost_law():
    rows = bench_throughput([1, 7, 16, 32, 64], DEFAULT_GEOMETRY, repeats=3)
    assert is_monotone(rows)
    assert all(r.within(2.0) for r in rows if r.tokens >= 16)


def test_variants():
    assert [v.name for v in BASE_VARIANTS] == ['single-token', 'object-only', 'oat-attention', 'oat-average']
    names = [v.name for v in ablation_variants(include_grid=True, include_slots=True)]
    assert names[-2:] == ['oat-G5', 'oat-N15']
    assert set(ORDERING) <= set(names)


def test_table_row_averages_relations():
    report = {
        'stderr': 0.1,
        'per_relation': {
            'in': {'success_rate': 1.0}, 'left-of': {'success_rate': 0.5},
            'front-of': {'success_rate': float('nan')},
        },
    }
    row = table_row('oat-average', 16, report)
    assert row['average'] == 0.75
    assert set(row) == set(TABLE_COLUMNS)


def test_ordering_check_within_tolerance():
    rows = [{'variant': name, 'average': avg}
            for name, avg in zip(ORDERING, [0.80, 0.82, 0.60, 0.40])]
    assert check_ablation_ordering(rows) == []


def test_ordering_violation_is_reported(caplog):
    rows = [{'variant': name, 'average': avg}
            for name, avg in zip(ORDERING, [0.50, 0.70, 0.60, 0.40])]
    with caplog.at_level(logging.WARNING, logger='training.ablation'):
        deviations = check_ablation_ordering(rows)
    assert len(deviations) == 1
    assert 'oat-average' in deviations[0]
    assert any('ordering violated' in r.message for r in caplog.records)


def test_ablation_suite_end_to_end(tiny_config, tiny_table):
    cfg = tiny_config.replace(steps=2, eval_rollouts=2, max_episode_steps=3)
    result = run_ablation_suite(cfg, table=tiny_table)
    assert [row['variant'] for row in result['rows']] == [v.name for v in BASE_VARIANTS]
    assert [row['tokens'] for row in result['rows']] == [1, 7, 16, 16]
    assert (Path(tiny_config.output_dir) / 'ablation.csv').exists()
    assert result['data_order_hash']


def test_ablation_needs_valid_config(tiny_config, tiny_table):
    with pytest.raises(ParameterError):
        run_ablation_suite(tiny_config.replace(agent_grid=4), table=tiny_table)


def comparison_row(seed, ratio, oat_success=None, full_success=None):
    return {'seed': seed, 'oat_steps': None, 'full_steps': None, 'step_ratio': ratio,
            'oat_success': oat_success, 'full_success': full_success}


def test_comparison_passes_on_faster_convergence():
    summary = summarize_comparison([comparison_row(0, 0.5), comparison_row(1, 0.7)], speedup=1.0)
    assert summary['mean_step_ratio'] == pytest.approx(0.6)
    assert summary['passed']


def test_comparison_passes_on_matching_success_at_higher_throughput():
    rows = [comparison_row(0, 1.0, 0.80, 0.83), comparison_row(1, None, 0.82, 0.85)]
    assert math.isnan(summarize_comparison(rows, speedup=1.5)['mean_step_ratio'])
    assert summarize_comparison(rows, speedup=1.5)['passed']
    assert not summarize_comparison(rows, speedup=1.2)['passed']


def test_comparison_fails_when_success_drops():
    rows = [comparison_row(0, 0.9, 0.60, 0.85)]
    summary = summarize_comparison(rows, speedup=3.0)
    assert not summary['matches_success']
    assert not summary['passed']


def test_convergence_comparison_end_to_end(tiny_config, tiny_table):
    cfg = tiny_config.replace(steps=2)
    result = run_convergence_comparison(cfg, seeds=(0, 1), threshold=0.0, table=tiny_table, bench_repeats=1)
    assert [row['seed'] for row in result['rows']] == [0, 1]
    assert all(row['step_ratio'] == 1.0 for row in result['rows'])
    assert all(row['oat_success'] is None for row in result['rows'])
    assert result['speedup'] > 0
    assert result['converges_faster'] is False
    csv_text = (Path(tiny_config.output_dir) / 'convergence.csv').read_text()
    assert csv_text.splitlines()[0] == ','.join(CONVERGENCE_COLUMNS)
