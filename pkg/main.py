#!/usr/bin/env python3
"""
Rivulet - Main Orchestrator
Command-line entry points for data generation, preparation, training,
simulation, reconstruction and evaluation.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from src.config import Config, setup_logging
from src.dataset import build_dataset, load_dataset, save_dataset
from src.drops import InitDatabase, NetworkPredictor, SimulationError
from src.exporter import dump_color_pgm, export_mesh
from src.geometry import GeometryError, load_contour
from src.imaging import DataPrepError, GradientProfile, load_frames
from src.layers import NeuralError
from src.network import BUILDERS, save_model
from src.reconstruct import (
    DegenerateField,
    HeightField,
    ReconstructionError,
    color_to_height,
    default_grid,
    rasterize,
    smooth,
    solve_biharmonic,
)
from src.scene import (
    InvalidScene,
    SceneConfig,
    evaluate_sequence,
    run_scene,
    summarize_evaluation,
    summary_path_for,
    write_evaluation,
)
from src.synth import InvalidParams, SynthParams, load_manifest, synth_generate
from src.tracking import TrackedSequence, extract_sequences, load_tracks, save_tracks
from src.training import EmptyDataset, NoPositives, TrainConfig, near_miss_undersample, train


logger = logging.getLogger(__name__)


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_SCENE = 5


class PipelineError(Exception):
    """Pipeline failure carrying the process exit code."""

    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


def banner(title: str):
    logger.info("=" * 80)
    logger.info(title)
    logger.info("=" * 80)


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """
    Parse command-line arguments.

    Returns:
        Parsed arguments namespace
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--log-level', type=str, default=None,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
                        help='Logging level (default: from env or INFO)')
    common.add_argument('--log-dir', type=str, default=None, help='Log directory (default: from env or ./logs)')
    common.add_argument('--seed', type=int, default=None, help='Random seed (default: from env or 0)')

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        description='Rivulet - learned small-scale liquid drop simulator',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py synth --out data/synth
  python main.py prep --manifest data/synth/manifest.json --out data/train.jsonl
  python main.py train --net contour --dataset data/train.jsonl --out models/contour.json
  python main.py simulate --scene scenes/demo.json

Environment Variables:
  RIVULET_LOG_LEVEL        Logging level (default: INFO)
  RIVULET_OUTPUT_DIR       Default root for synth and scene outputs (default: ./output)
  RIVULET_HISTORY_LENGTH   History length K (default: 5)
  RIVULET_SPLIT_DELTA      Split normal threshold for scenes (default: -0.5)
  RIVULET_MIN_SEPARATION   Split index gap for scenes (default: 6)
  RIVULET_SOLVER           Biharmonic solver, cg or direct (default: cg)
  RIVULET_WORKERS          Worker threads (default: 1)
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], formatter_class=fmt, help='Generate synthetic frame sequences')
    p.add_argument('--config', type=str, default=None, help='Generator parameters JSON')
    p.add_argument('--out', type=str, default=None,
                   help='Output directory for sequences and manifest (default: <output dir>/synth)')

    p = sub.add_parser('prep', parents=[common], formatter_class=fmt, help='Convert frames into a training dataset')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--frames', type=str, help='Directory of frame_%%06d.pgm files')
    source.add_argument('--manifest', type=str, help='Generator manifest listing sequence directories')
    p.add_argument('--K', type=int, default=None, help='History length (default: from env or 5)')
    p.add_argument('--out', type=str, required=True, help='Dataset file (JSON lines)')
    p.add_argument('--init-db', type=str, default=None, help='Initialization database (default: next to dataset)')
    p.add_argument('--tracks-out', type=str, default=None, help='Optional file for the extracted tracks')

    p = sub.add_parser('train', parents=[common], formatter_class=fmt, help='Train one network')
    p.add_argument('--net', type=str, required=True, choices=sorted(BUILDERS), help='Network to train')
    p.add_argument('--dataset', type=str, required=True, help='Dataset file')
    p.add_argument('--epochs', type=int, default=1000, help='Training epochs')
    p.add_argument('--batch', type=int, default=128, help='Mini-batch size')
    p.add_argument('--lr', type=float, default=1e-2, help='Initial learning rate')
    p.add_argument('--decay', type=float, default=1e-6, help='Inverse-time learning-rate decay')
    p.add_argument('--optimizer', type=str, default='sgd_nesterov', choices=['sgd_nesterov', 'adam'],
                   help='Update rule')
    p.add_argument('--hidden', type=int, default=None, help='Hidden width override (default: published widths)')
    p.add_argument('--out', type=str, required=True, help='Model file')
    p.add_argument('--loss-curve', type=str, default=None, help='Loss CSV (default: <out>.loss.csv)')

    p = sub.add_parser('simulate', parents=[common], formatter_class=fmt, help='Run a scene')
    p.add_argument('--scene', type=str, required=True, help='Scene config JSON')
    p.add_argument('--out', type=str, default=None,
                   help='Output directory (default: scene output_dir, else <output dir>/<scene name>)')
    p.add_argument('--steps', type=int, default=None, help='Step count override')

    p = sub.add_parser('reconstruct', parents=[common], formatter_class=fmt,
                       help='Reconstruct one drop surface as a mesh')
    p.add_argument('--contour', type=str, required=True, help='Contour file (contour v1)')
    p.add_argument('--gradient', type=str, required=True, help='Text file of 52 gradient magnitudes')
    p.add_argument('--volume', type=float, required=True, help='Drop volume')
    p.add_argument('--out', type=str, required=True, help='OBJ output file')
    p.add_argument('--dump-color', type=str, default=None, help='Optional PGM dump of the color field')

    p = sub.add_parser('eval', parents=[common], formatter_class=fmt, help='Compare rollouts with ground truth')
    p.add_argument('--scene', type=str, required=True, help='Scene config JSON (models, K, terrain)')
    p.add_argument('--truth', type=str, required=True, help='Ground-truth tracks JSON')
    p.add_argument('--out', type=str, required=True, help='Evaluation CSV')
    p.add_argument('--steps', type=int, default=20, help='Rollout steps per sequence')

    return parser.parse_args(argv)


def load_configuration(args: argparse.Namespace) -> Config:
    """
    Load configuration from environment and command-line arguments.

    Command-line arguments override environment variables.

    Raises:
        ValueError: If configuration is invalid
    """
    logger.info("Loading configuration...")
    config = Config.from_env()

    if args.log_level:
        config.log_level = args.log_level
    if args.log_dir:
        config.log_dir = args.log_dir
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, 'K', None) is not None:
        config.history_length = args.K

    errors = config.validate()
    if errors:
        error_msg = "Configuration validation failed:\n" + "\n".join(f"  - {e}" for e in errors)
        logger.error(error_msg)
        raise ValueError(error_msg)

    logger.info("Configuration loaded successfully")
    return config


def run_synth(args: argparse.Namespace, config: Config) -> int:
    """Render synthetic sequences with ground truth into --out or the configured output directory."""
    out = args.out or str(Path(config.output_dir) / 'synth')
    banner("Generating synthetic sequences")
    try:
        if args.config:
            params = SynthParams.from_file(args.config)
        else:
            params = SynthParams(max_step=config.max_step_displacement)
            errors = params.validate()
            if errors:
                raise InvalidParams("; ".join(errors))
        results = synth_generate(params, config.seed, out)
    except (FileNotFoundError, InvalidParams) as e:
        raise PipelineError(str(e), EXIT_CONFIG) from e

    frames = sum(len(r.frames) for r in results)
    logger.info(f"✓ Generated {len(results)} sequences ({frames} frames) in {out}")
    return EXIT_OK


def _renumber(sequences: List[TrackedSequence], offset: int) -> List[TrackedSequence]:
    for seq in sequences:
        seq.seq_id += offset
        seq.parents = [p + offset for p in seq.parents]
        seq.children = [c + offset for c in seq.children]
    return sequences


def run_prep(args: argparse.Namespace, config: Config) -> int:
    """Extract tracked sequences from frames and build the dataset and init database."""
    if args.manifest:
        manifest_path = Path(args.manifest)
        try:
            manifest = load_manifest(manifest_path)
        except (FileNotFoundError, InvalidParams) as e:
            raise PipelineError(str(e), EXIT_CONFIG) from e
        directories = [manifest_path.parent / name for name in manifest['sequences']]
    else:
        directories = [Path(args.frames)]
    for directory in directories:
        if not directory.is_dir():
            raise PipelineError(f"Frame directory not found: {directory}", EXIT_CONFIG)

    banner("Stage 1: Extracting tracked sequences")
    sequences: List[TrackedSequence] = []
    tallies: Dict[str, int] = {}
    try:
        for directory in directories:
            found, counts = extract_sequences(load_frames(directory), config.morph_radius,
                                              config.min_component_area, config.overlap_threshold)
            sequences.extend(_renumber(found, len(sequences)))
            for kind, n in counts.items():
                tallies[kind] = tallies.get(kind, 0) + n
    except DataPrepError as e:
        frame = getattr(e, 'frame_index', None)
        where = f" at frame {frame}" if frame is not None else ""
        raise PipelineError(f"Data preparation failed{where}: {e}", EXIT_DATA) from e

    splits = sum(1 for s in sequences if s.terminal_event == 'split')
    logger.info(f"✓ Stage 1 complete: {len(sequences)} sequences, {splits} ending in a split")
    logger.info(f"Event tallies: {', '.join(f'{k}={v}' for k, v in sorted(tallies.items()))}")
    if args.tracks_out:
        save_tracks(sequences, args.tracks_out)

    banner("Stage 2: Building dataset")
    dataset = build_dataset(sequences, config.history_length, workers=config.workers)
    if len(dataset) == 0:
        logger.warning(f"No sequence is longer than K={config.history_length}; dataset is empty")
    out = save_dataset(dataset, args.out)
    logger.info(f"✓ Stage 2 complete: {len(dataset)} samples ({dataset.positives()} breakage) in {out}")

    banner("Stage 3: Building initialization database")
    db_path = Path(args.init_db) if args.init_db else out.with_suffix('.initdb.json')
    InitDatabase.from_sequences(sequences, source=str(out)).save(db_path)
    logger.info(f"✓ Stage 3 complete: {db_path}")
    return EXIT_OK


def run_train(args: argparse.Namespace, config: Config) -> int:
    """Train one network with the near-miss balancing reserved for the breakage net."""
    try:
        dataset = load_dataset(args.dataset)
    except FileNotFoundError as e:
        raise PipelineError(str(e), EXIT_CONFIG) from e
    except DataPrepError as e:
        raise PipelineError(f"Invalid dataset: {e}", EXIT_DATA) from e

    banner(f"Training {args.net} network")
    if args.net == 'contour':
        X, Y = dataset.contour_arrays()
    elif args.net == 'gradient':
        X, Y = dataset.gradient_arrays()
    else:
        X, Y = dataset.breakage_arrays()
        try:
            keep = near_miss_undersample(X, Y)
        except NoPositives as e:
            raise PipelineError(str(e), EXIT_DATA) from e
        X, Y = X[keep], Y[keep]
        logger.info(f"Balanced breakage set: {int(Y.sum())} positives, {int(len(Y) - Y.sum())} negatives")

    kwargs = {'dropout_rate': config.dropout_rate, 'seed': config.seed}
    if args.hidden:
        kwargs['hidden'] = args.hidden
    model = BUILDERS[args.net](**kwargs)
    model.meta.update({'K': dataset.K, 'gradient_scale': dataset.gradient_scale})

    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, lr_decay=args.decay,
                      optimizer=args.optimizer, loss='bce' if args.net == 'breakage' else 'mse',
                      seed=config.seed)
    errors = cfg.validate()
    if errors:
        raise PipelineError("; ".join(errors), EXIT_CONFIG)

    loss_path = args.loss_curve or str(Path(args.out).with_suffix('.loss.csv'))
    try:
        result = train(model, X, Y, cfg, loss_path=loss_path, track_accuracy=args.net == 'breakage')
    except EmptyDataset as e:
        raise PipelineError(str(e), EXIT_DATA) from e
    except NeuralError as e:
        raise PipelineError(f"Training failed: {e}", EXIT_TRAINING) from e

    save_model(model, args.out)
    final = f"{result.losses[-1]:.6e}" if result.losses else "n/a"
    logger.info(f"✓ Training complete: final loss {final}; model saved to {args.out}")
    return EXIT_OK


def scene_defaults(config: Config, scene_path: str) -> Dict:
    """
    Scene settings taken from the environment when the scene file omits them.

    Args:
        config: Loaded pipeline configuration
        scene_path: Scene file; its stem names the default output directory

    Returns:
        Keyword defaults for SceneConfig.from_file
    """
    return {
        'K': config.history_length,
        'split_delta': config.split_delta,
        'min_separation': config.min_separation,
        'output_dir': str(Path(config.output_dir) / Path(scene_path).stem),
        'smoothing_iters': config.smoothing_iters,
        'solver': config.solver,
        'workers': config.workers,
    }


def run_simulate(args: argparse.Namespace, config: Config) -> int:
    """Run a scene file; settings it omits come from the environment."""
    try:
        cfg = SceneConfig.from_file(args.scene, defaults=scene_defaults(config, args.scene))
    except FileNotFoundError as e:
        raise PipelineError(str(e), EXIT_CONFIG) from e
    except InvalidScene as e:
        raise PipelineError(f"Invalid scene: {e}", EXIT_SCENE) from e
    if args.out:
        cfg.output_dir = args.out
    if args.steps:
        cfg.steps = args.steps

    banner(f"Simulating {len(cfg.drops)} drops for {cfg.steps} steps")
    try:
        summary = run_scene(cfg)
    except (SimulationError, NeuralError, GeometryError, OSError, ValueError) as e:
        raise PipelineError(f"Scene failed: {e}", EXIT_SCENE) from e
    logger.info(f"✓ Simulation complete: {summary['drops']} drops, {summary['splits']} splits, "
                f"{summary['merges']} merges, {len(summary['failures'])} failures")
    return EXIT_OK


def run_reconstruct(args: argparse.Namespace, config: Config) -> int:
    """
    Rebuild one drop surface from a contour, gradients and a volume.

    A volume that cannot be placed on the solved field yields a flat mesh
    with a warning instead of a failure.

    Returns:
        Exit code

    Raises:
        PipelineError: With EXIT_CONFIG for missing inputs, EXIT_DATA for bad
            inputs or a failed solve
    """
    banner("Reconstructing drop surface")
    try:
        contour = load_contour(args.contour)
        profile = GradientProfile(np.loadtxt(args.gradient, dtype=float).reshape(-1))
    except FileNotFoundError as e:
        raise PipelineError(str(e), EXIT_CONFIG) from e
    except (GeometryError, DataPrepError, ValueError) as e:
        raise PipelineError(f"Invalid input: {e}", EXIT_DATA) from e

    try:
        problem = rasterize(contour, profile, default_grid(contour))
        field = solve_biharmonic(problem, tol=config.solver_tol, solver=config.solver)
        try:
            heights = smooth(color_to_height(field, args.volume), config.smoothing_iters)
        except DegenerateField as e:
            logger.warning(f"Volume {args.volume} cannot be placed ({e}); exporting a flat mesh")
            heights = HeightField(field.grid, np.zeros_like(field.values), field.labels, 0.0)
    except ReconstructionError as e:
        raise PipelineError(f"Reconstruction failed: {e}", EXIT_DATA) from e

    export_mesh(heights, args.out)
    if args.dump_color:
        dump_color_pgm(field, args.dump_color)
    logger.info(f"✓ Mesh written to {args.out} (volume {heights.integral():.4e})")
    return EXIT_OK


def run_eval(args: argparse.Namespace, config: Config) -> int:
    """Roll the trained networks against ground-truth tracks and score the rollouts."""
    try:
        cfg = SceneConfig.from_file(args.scene, defaults=scene_defaults(config, args.scene))
        sequences = load_tracks(args.truth)
    except FileNotFoundError as e:
        raise PipelineError(str(e), EXIT_CONFIG) from e
    except InvalidScene as e:
        raise PipelineError(f"Invalid scene: {e}", EXIT_SCENE) from e
    except DataPrepError as e:
        raise PipelineError(f"Invalid tracks: {e}", EXIT_DATA) from e

    banner(f"Evaluating {len(sequences)} sequences")
    theta = float(cfg.terrain.get('incline', 30.0))
    try:
        predictor = NetworkPredictor.from_files(cfg.models['contour'], cfg.models['gradient'], cfg.models['breakage'])
        results = [evaluate_sequence(seq, predictor, cfg.K, theta, args.steps) for seq in sequences if len(seq) > 1]
    except (SimulationError, NeuralError, GeometryError) as e:
        raise PipelineError(f"Evaluation failed: {e}", EXIT_SCENE) from e

    write_evaluation(results, args.out)
    summary = summarize_evaluation(results)
    logger.info(f"✓ Evaluation complete: mean control-point error {summary['mean_error']:.4e} "
                f"over {summary['steps']} steps")
    logger.info(f"Split events: precision {summary['precision']:.3f}, recall {summary['recall']:.3f} "
                f"({summary['true_splits']} hit, {summary['false_splits']} false, "
                f"{summary['missed_splits']} missed); summary in {summary_path_for(args.out)}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, Config], int]] = {
    'synth': run_synth,
    'prep': run_prep,
    'train': run_train,
    'simulate': run_simulate,
    'reconstruct': run_reconstruct,
    'eval': run_eval,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for Rivulet."""
    args = parse_arguments(argv)

    try:
        config = load_configuration(args)
    except ValueError as e:
        print(f"Configuration Error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    setup_logging(config)
    logger.info(f"Rivulet starting: {args.command}")

    try:
        return COMMANDS[args.command](args, config)

    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        print("\nOperation cancelled by user")
        return 130

    except PipelineError as e:
        logger.error(f"Pipeline error: {e}")
        print(f"\nError: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
