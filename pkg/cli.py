#!/usr/bin/env python3
"""
Oat CLI - data generation, training, evaluation, benchmarks and inspection.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Tuple

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np

from core.config import TrainConfig, add_config_flags, load_config, overrides_from_args
from core.errors import DataError, GeometryError, NumericError, OatError, ParameterError
from core.imaging import Image, PixelPoint, load_png, patchify
from core.masks import MaskSet
from core.pipeline import FrameAnnotator, OatModel, geometry, tokenizer_config
from exporters.metrics_exporter import write_csv, write_yaml
from exporters.overlays import keypoint_overlay, save_overlay, segment_overlay, token_overlay
from formatters.report_formatter import ReportFormatter
from models.encoder import PatchEncoder, encode
from models.gripper import (
    DetectorParams, DetectorTrainConfig, build_detector_samples, detect, eval_detector,
    load_detector, save_detector, train_detector,
)
from models.policy import PolicyConfig
from models.segmenter import mask_agreement, normalize_ground_truth, segment_unsupervised
from models.tokenizer import TokenizerConfig, reduction_ratio, tokenize
from sim.dataset import generate_dataset, load_dataset, read_manifest, replay_check
from sim.render import render
from sim.scene import RELATIONS, SceneState, sample_task
from training.ablation import run_ablation_suite
from training.bench import DEFAULT_BUDGETS, bench_table, bench_throughput
from training.convergence import DEFAULT_SEEDS, run_convergence_comparison
from training.evaluator import evaluate, expert_policy, random_policy, training_evaluator
from training.metrics import ACCURACY_THRESHOLD
from training.trainer import CHECKPOINT_NAME, train
from utils.colors import Colors, cyan, green, red
from utils.progress import ProgressBar

Colors.enable()

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

class OatArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def create_parser():
    common = OatArgumentParser(add_help=False)
    common.add_argument('--config', help='Flat YAML config file (flags override it)')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    common.add_argument('--no-progress', action='store_true', help='Disable progress indicators')
    add_config_flags(common)

    frame = OatArgumentParser(add_help=False)
    source = frame.add_argument_group('Frame selection')
    source.add_argument('--episode', type=int, default=0, help='Episode index in the dataset (default: 0)')
    source.add_argument('--step', type=int, default=0, help='Step index within the episode (default: 0)')
    source.add_argument('--task-seed', type=int, help='Render the first frame of a freshly sampled task instead')
    source.add_argument('--image', help='Read a PNG frame instead (no ground truth)')
    source.add_argument('--overlay', help='Write a PNG overlay to this path')

    parser = OatArgumentParser(
        prog='oat',
        description='Object-agent-centric visual tokens for action-token policies',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-data --episodes 320 --dataset-path data/oat_sim
  %(prog)s train --tokenizer-mode oat --steps 20000 --output-dir runs/oat
  %(prog)s train --tokenizer-mode full-patch --output-dir runs/full
  %(prog)s eval --output-dir runs/oat --eval-rollouts 100 --workers 4
  %(prog)s bench --modes
  %(prog)s ablate --steps 5000 --output-dir runs/ablation --include-grid
  %(prog)s compare --steps 20000 --output-dir runs/compare --seeds 0 1 2
  %(prog)s tokenize --episode 3 --step 10 --overlay tokens.png
        """,
    )
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    p = sub.add_parser('gen-data', parents=[common], help='Generate expert demonstrations')
    p.add_argument('--check', action='store_true', help='Replay the stored states and compare PNG bytes')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', parents=[common], help='Behaviour-clone a policy')
    p.add_argument('--resume', action='store_true', help='Continue from output_dir/checkpoint.oat')
    p.add_argument('--stop-at', type=int, help='Stop and checkpoint after this many steps')
    p.add_argument('--no-eval', action='store_true', help='Skip periodic closed-loop evaluation')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='Closed-loop success rate')
    p.add_argument('--checkpoint', help='Policy checkpoint (default: output_dir/checkpoint.oat)')
    p.add_argument('--policy', choices=['model', 'expert', 'random'], default='model',
                   help='Evaluate the checkpoint or a reference policy (default: model)')
    p.add_argument('--report', help='Also write the report as YAML')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('bench', parents=[common], help='Throughput and attention-cost table')
    p.add_argument('--tokens', type=int, nargs='+', help=f'Token budgets (default: {DEFAULT_BUDGETS})')
    p.add_argument('--modes', action='store_true', help='Bench the tokenizer modes of the configured geometry')
    p.add_argument('--repeats', type=int, default=5, help='Timed repetitions per budget (default: 5)')
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('ablate', parents=[common], help='Tokenizer ablation suite')
    p.add_argument('--include-grid', action='store_true', help='Add the G=5 agent-window variant')
    p.add_argument('--include-slots', action='store_true', help='Add the N=15 slot variant')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('compare', parents=[common], help='Oat vs full-patch convergence over seeds')
    p.add_argument('--seeds', type=int, nargs='+', default=list(DEFAULT_SEEDS),
                   help=f'Training seeds (default: {list(DEFAULT_SEEDS)})')
    p.add_argument('--threshold', type=float, default=ACCURACY_THRESHOLD,
                   help=f'Smoothed accuracy to reach (default: {ACCURACY_THRESHOLD})')
    p.add_argument('--repeats', type=int, default=3, help='Timed repetitions for the throughput ratio (default: 3)')
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser('tokenize', parents=[common, frame], help='Show the visual tokens of one frame')
    p.add_argument('--checkpoint', help='Use the encoder and tokenizer of a trained policy')
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser('segment', parents=[common, frame], help='Unsupervised slot masks of one frame')
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser('detect', parents=[common, frame], help='Gripper keypoint of one frame')
    p.add_argument('--detector', help='Learned detector checkpoint (default: heuristic)')
    p.add_argument('--evaluate', action='store_true', help='Score the detector on the dataset frames instead')
    p.add_argument('--limit', type=int, help='Frames used with --evaluate')
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser('train-detector', parents=[common], help='Train the learned gripper detector')
    p.add_argument('--detector-steps', type=int, default=1500, help='Optimizer steps (default: 1500)')
    p.add_argument('--negative-fraction', type=float, default=0.1,
                   help='Gripper-free frames per stored frame (default: 0.1)')
    p.add_argument('--limit', type=int, help='Use at most this many stored frames')
    p.add_argument('--out', help='Detector checkpoint path (default: detector_path or output_dir/detector.oat)')
    p.set_defaults(func=cmd_train_detector)

    return parser


def configure_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s %(levelname)-7s %(name)s: %(message)s',
        datefmt='%H:%M:%S',
    )


def _config(args) -> TrainConfig:
    return load_config(args.config, overrides_from_args(args))


def _progress(args, total: int, prefix: str) -> ProgressBar:
    return ProgressBar(total, prefix, enabled=not args.no_progress)


# frame selection

def _load_frame(args, cfg: TrainConfig) -> Tuple[Image, Optional[MaskSet], Optional[PixelPoint], Optional[SceneState]]:
    """(image, raw simulator masks, ground-truth keypoint, state) of the selected frame."""
    if args.image:
        return load_png(args.image), None, None, None
    if args.task_seed is not None:
        state, _ = sample_task(args.task_seed)
        image, masks, keypoint = render(state, geometry(cfg))
        return image, masks, keypoint, state
    episodes = load_dataset(cfg.dataset_path, limit=args.episode + 1)
    if args.episode >= len(episodes):
        raise DataError(f"Dataset has only {len(episodes)} episodes")
    steps = episodes[args.episode].steps
    if not 0 <= args.step < len(steps):
        raise ParameterError(f"Episode {args.episode} has {len(steps)} steps")
    step = steps[args.step]
    return step.image, step.masks, step.keypoint, step.state


def _as_point(row: Optional[np.ndarray]) -> Optional[PixelPoint]:
    if row is None or np.isnan(row).any():
        return None
    return PixelPoint(float(row[0]), float(row[1]))


# subcommands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    bar = _progress(args, cfg.episodes, 'Episodes')
    path = generate_dataset(cfg.episodes, cfg.data_seed, cfg.dataset_path, geometry(cfg),
                            cfg.max_episode_steps, progress=bar)
    bar.finish()
    mismatches = replay_check(path) if args.check else []
    ReportFormatter.format_dataset(read_manifest(path), mismatches)
    return EXIT_DATA if mismatches else EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    evaluator = None
    if cfg.eval_rollouts and not args.no_eval:
        evaluator = training_evaluator(cfg.eval_rollouts, cfg.eval_seed, cfg.workers, cfg.max_episode_steps)
    total = min(args.stop_at, cfg.steps) if args.stop_at else cfg.steps
    bar = _progress(args, total, 'Training')
    print(f"{cyan('Training:')} {cfg.tokenizer_mode} -> {cfg.output_dir}")
    _, metrics = train(cfg, resume=args.resume, evaluator=evaluator, progress=bar, stop_at=args.stop_at)
    bar.finish()
    ReportFormatter.format_training(metrics.summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.policy == 'expert':
        policy, label = expert_policy, 'EXPERT POLICY'
    elif args.policy == 'random':
        policy, label = random_policy, 'RANDOM POLICY'
    else:
        policy = Path(args.checkpoint or Path(cfg.output_dir) / CHECKPOINT_NAME)
        if not policy.exists():
            raise DataError(f"No checkpoint at {policy}")
        label = f"EVALUATION ({policy})"
    bar = _progress(args, cfg.eval_rollouts, 'Rollouts')
    report = evaluate(policy, cfg.eval_rollouts, cfg.eval_seed, cfg.workers, cfg.max_episode_steps, progress=bar)
    bar.finish()
    result = report.get_report()
    ReportFormatter.format_eval(result, label)
    if args.report:
        write_yaml(dict(result, seed=cfg.eval_seed), args.report)
        print(green(f"\n[OK] Report written to {args.report}"))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    geom = geometry(cfg)
    if args.modes:
        configs = [TokenizerConfig(mode, cfg.object_slots, cfg.agent_grid, cfg.pool, cfg.feature_dim)
                   for mode in ('full-patch', 'oat', 'object-only', 'single-token')]
    else:
        configs = args.tokens or list(DEFAULT_BUDGETS)
    model_cfg = PolicyConfig(cfg.policy_layers, cfg.policy_width, cfg.policy_heads, cfg.action_bins,
                             cfg.feature_dim, cfg.max_language_tokens)
    rows = bench_table(bench_throughput(configs, geom, model_cfg, cfg.batch_size, args.repeats, seed=cfg.seed))
    ReportFormatter.format_bench(rows, cfg.max_language_tokens)
    out = write_csv(rows, list(rows[0]) if rows else [], Path(cfg.output_dir) / 'bench.csv')
    print(green(f"\n[OK] Table written to {out}"))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    n = 4 + int(args.include_grid) + int(args.include_slots)
    bar = _progress(args, n, 'Variants')
    result = run_ablation_suite(cfg, args.include_grid, args.include_slots, progress=bar)
    bar.finish()
    ReportFormatter.format_ablation(result, RELATIONS)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    bar = _progress(args, 2 * len(args.seeds), 'Runs')
    result = run_convergence_comparison(cfg, args.seeds, args.threshold, bench_repeats=args.repeats, progress=bar)
    bar.finish()
    ReportFormatter.format_convergence(result)
    return EXIT_OK


def cmd_tokenize(args) -> int:
    cfg = _config(args)
    if args.checkpoint:
        model, _, _ = OatModel.load(args.checkpoint)
        cfg, encoder, params = model.cfg, model.encoder, model.tokenizer
    else:
        encoder, params = PatchEncoder(cfg.encoder_mode, cfg.feature_dim, cfg.patch_size, cfg.seed).eval(), None
    config = tokenizer_config(cfg)
    image, raw_masks, keypoint, state = _load_frame(args, cfg)
    if config.uses_masks and cfg.mask_source == 'oracle' and state is None:
        raise ParameterError("Oracle masks need a dataset or --task-seed frame; use --mask-source unsupervised")
    annotator = FrameAnnotator(cfg)
    pixels = image.to_uint8()[None]
    gt_kp = np.array([[keypoint.u, keypoint.v]]) if keypoint is not None else np.full((1, 2), np.nan)
    assignment, keypoints = annotator.annotate(pixels, [raw_masks], [state], gt_kp)
    masks = MaskSet(assignment[0], cfg.object_slots) if assignment is not None else None
    point = _as_point(keypoints[0]) if keypoints is not None else None

    feats = encode(image, encoder)
    visual = tokenize(feats, masks, point, config, params)
    ReportFormatter.format_tokens([p.label() for p in visual.provenance],
                                  reduction_ratio(config, feats.geom), visual.agent_fallback)
    if args.overlay:
        grid = cfg.agent_grid if config.uses_keypoint else None
        save_overlay(token_overlay(image, masks, point, feats.geom, grid), args.overlay)
        print(green(f"\n[OK] Overlay written to {args.overlay}"))
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config(args)
    image, raw_masks, _, state = _load_frame(args, cfg)
    masks = segment_unsupervised(image, cfg.object_slots, cfg.patch_size)
    geom = patchify(image, cfg.patch_size)
    ReportFormatter.print_header("SEGMENTATION")
    print(f"  Slots: {masks.n_slots}, non-empty: {masks.non_empty}, sizes: {masks.counts.tolist()}")
    if raw_masks is not None and state is not None:
        gt = normalize_ground_truth(raw_masks, state, cfg.object_slots, geom)
        print(f"  Agreement with simulator masks: {100 * mask_agreement(masks, gt):.1f}%")
    if args.overlay:
        save_overlay(segment_overlay(image, masks, geom), args.overlay)
        print(green(f"\n[OK] Overlay written to {args.overlay}"))
    return EXIT_OK


def _detector(args, cfg: TrainConfig) -> DetectorParams:
    path = args.detector or (cfg.detector_path if cfg.keypoint_source == 'learned' else '')
    if path:
        return load_detector(path, cfg.detector_threshold)
    return DetectorParams('heuristic', cfg.detector_threshold)


def cmd_detect(args) -> int:
    cfg = _config(args)
    params = _detector(args, cfg)
    if args.evaluate:
        samples = build_detector_samples(load_dataset(cfg.dataset_path), seed=cfg.seed,
                                         patch_size=cfg.patch_size, limit=args.limit)
        ReportFormatter.format_detector(eval_detector(params, samples), cfg.patch_size)
        return EXIT_OK
    image, _, keypoint, _ = _load_frame(args, cfg)
    prediction = detect(image, params)
    ReportFormatter.print_header(f"GRIPPER ({params.mode})")
    if prediction.detected:
        print(f"  Keypoint: ({prediction.point.u:.1f}, {prediction.point.v:.1f}) px, "
              f"confidence {prediction.confidence:.3f}")
        if keypoint is not None and not keypoint.is_sentinel:
            err = float(np.hypot(prediction.point.u - keypoint.u, prediction.point.v - keypoint.v))
            print(f"  Error vs ground truth: {err:.2f} px")
    else:
        print(red(f"  No gripper detected (confidence {prediction.confidence:.3f})"))
    if args.overlay:
        save_overlay(keypoint_overlay(image, prediction.point, patchify(image, cfg.patch_size), cfg.agent_grid),
                     args.overlay)
        print(green(f"\n[OK] Overlay written to {args.overlay}"))
    return EXIT_OK


def cmd_train_detector(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.detector_path or Path(cfg.output_dir) / 'detector.oat')
    samples = build_detector_samples(load_dataset(cfg.dataset_path), args.negative_fraction,
                                     cfg.seed, cfg.patch_size, args.limit)
    hp = DetectorTrainConfig(steps=args.detector_steps, threshold=cfg.detector_threshold, seed=cfg.seed)
    bar = _progress(args, hp.steps, 'Detector')
    params, metrics = train_detector(samples, hp, progress=bar)
    bar.finish()
    save_detector(params, out)
    ReportFormatter.format_detector(metrics, cfg.patch_size)
    print(green(f"\n[OK] Detector written to {out}"))
    return EXIT_OK


def main(argv=None) -> int:
    parser = create_parser()
    args = parser.parse_args(argv)
    if not getattr(args, 'func', None):
        parser.print_help()
        return EXIT_USAGE
    configure_logging(args.verbose)

    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("\n\nInterrupted by user.", file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, GeometryError) as e:
        print(red(f"Error: {e}"), file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(red(f"Data error: {e}"), file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(red(f"Numeric failure: {e}"), file=sys.stderr)
        return EXIT_NUMERIC
    except OatError as e:
        print(red(f"Error: {e}"), file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
