"""
Console reports for the CLI subcommands.
"""

from typing import Dict, Sequence

from utils.colors import bold, cyan, green, rate, red, status, yellow


class ReportFormatter:
    """Formats run, evaluation, benchmark and ablation reports."""

    @staticmethod
    def format_number(num: int) -> str:
        return f"{num:,}"

    @staticmethod
    def print_header(title: str):
        print("\n" + "=" * 80)
        print(bold(f"  {title}"))
        print("=" * 80)

    @staticmethod
    def print_subheader(title: str):
        print(f"\n{title}")
        print("-" * 80)

    @staticmethod
    def print_fields(fields: Dict, width: int = 22):
        for key, value in fields.items():
            if isinstance(value, float):
                value = f"{value:.6g}"
            print(f"  {cyan((key.replace('_', ' ') + ':').ljust(width))} {value}")

    @staticmethod
    def format_dataset(manifest: Dict, mismatches: Sequence[str] = ()):
        ReportFormatter.print_header("DATASET")
        ReportFormatter.print_fields({
            'episodes': manifest['episode_count'],
            'steps': ReportFormatter.format_number(manifest['step_count']),
            'expert_successes': manifest['expert_successes'],
            'seed': manifest['seed'],
            'image_size': manifest['geometry']['image_size'],
        })
        if mismatches:
            print(f"\n  {red('[XX]')} {len(mismatches)} replay mismatches")
            for line in mismatches[:10]:
                print(f"    {line}")

    @staticmethod
    def format_training(summary: Dict):
        ReportFormatter.print_header("TRAINING RUN")
        keys = ('tokenizer_mode', 'visual_tokens', 'reduction_ratio', 'frames', 'steps',
                'examples_processed', 'config_hash', 'data_order_hash')
        ReportFormatter.print_fields({k: summary[k] for k in keys if k in summary})
        if summary.get('final_accuracy') is not None:
            print(f"  {cyan('final loss:'.ljust(22))} {summary['final_loss']:.4f}")
            print(f"  {cyan('final accuracy:'.ljust(22))} {rate(summary['final_accuracy'], 0.9, 0.5)}")
        if 'final_success_rate' in summary:
            print(f"  {cyan('final success:'.ljust(22))} {rate(summary['final_success_rate'])}")

    @staticmethod
    def format_eval(report: Dict, title: str = "EVALUATION"):
        ReportFormatter.print_header(title)
        print(f"  Success: {rate(report['success_rate'])} +/- {100 * report['stderr']:.1f} "
              f"({report['successes']}/{report['rollouts']} rollouts)")
        ReportFormatter.print_subheader(">> Per relation")
        for relation, row in report['per_relation'].items():
            print(f"  {relation:<12} {rate(row['success_rate'])}  ({row['rollouts']} rollouts)")

    @staticmethod
    def format_bench(rows: Sequence[Dict], J: int):
        ReportFormatter.print_header(f"THROUGHPUT (J={J})")
        print(f"  {'config':<18} {'T':>4} {'ex/s':>10} {'attn ops':>14} {'analytic':>9} "
              f"{'measured':>9} {'attention':>9}")
        for row in rows:
            print(f"  {row['label']:<18} {row['tokens']:>4} {row['examples_per_sec']:>10.1f} "
                  f"{row['attention_ops']:>14,} {row['analytic_ratio']:>8.2f}x "
                  f"{row['measured_ratio']:>8.2f}x {row['attention_ratio']:>8.2f}x")

    @staticmethod
    def format_ablation(result: Dict, relations: Sequence[str]):
        ReportFormatter.print_header("ABLATION")
        header = ''.join(f"{r:>12}" for r in relations)
        print(f"  {'variant':<16} {'T':>4}{header}{'average':>12}")
        for row in result['rows']:
            cells = ''.join(f"{rate(row[r]):>12}" for r in relations)
            print(f"  {row['variant']:<16} {row['tokens']:>4}{cells}{rate(row['average']):>12}")
        deviations = result.get('deviations', [])
        print()
        if deviations:
            for message in deviations:
                print(f"  {status(False)} {yellow(message)}")
        else:
            print(f"  {status(True)} Ordering oat-average >= oat-attention >= object-only >= single-token holds")

    @staticmethod
    def format_convergence(result: Dict):
        ReportFormatter.print_header(f"CONVERGENCE (oat vs full-patch, accuracy {result['threshold']:g})")
        nan = float('nan')

        def steps(value):
            return 'never' if value is None else str(value)

        print(f"  {'seed':>4} {'oat steps':>10} {'full steps':>11} {'ratio':>7} {'oat':>8} {'full':>8}")
        for row in result['rows']:
            ratio = 'n/a' if row['step_ratio'] is None else f"{row['step_ratio']:.2f}"
            oat = nan if row['oat_success'] is None else row['oat_success']
            full = nan if row['full_success'] is None else row['full_success']
            print(f"  {row['seed']:>4} {steps(row['oat_steps']):>10} {steps(row['full_steps']):>11} "
                  f"{ratio:>7} {rate(oat):>8} {rate(full):>8}")
        print()
        print(f"  Throughput oat / full-patch: {result['speedup']:.2f}x")
        print(f"  {status(result['converges_faster'])} Step ratio {result['mean_step_ratio']:.2f} (<= 0.75)")
        print(f"  {status(result['matches_success'])} Success within 5 points")
        verdict = green('PASSED') if result['passed'] else red('NOT MET')
        print(f"\n  Comparison: {verdict}")

    @staticmethod
    def format_detector(metrics: Dict, patch_size: int):
        ReportFormatter.print_header("GRIPPER DETECTOR")
        print(f"  Median error:     {metrics['median_px_error']:.2f} px")
        print(f"  Hit rate (<{patch_size / 2:g}px): {rate(metrics['hit_rate'], 0.9, 0.7)}")
        print(f"  Miss rate:        {100 * metrics['miss_rate']:.1f}%")
        print(f"  False positives:  {100 * metrics['false_positive_rate']:.1f}%")
        print(f"  Frames:           {metrics['frames']}")

    @staticmethod
    def format_tokens(labels: Sequence[str], reduction: float, fallback: bool):
        ReportFormatter.print_header(f"VISUAL TOKENS ({len(labels)}, reduction {100 * reduction:.2f}%)")
        for i, label in enumerate(labels):
            print(f"  {i:>3}  {label}")
        if fallback:
            print(f"\n  {status(False)} No gripper keypoint: agent tokens are global means")
