#!/usr/bin/env python3
"""
Command-line front end for stochastic neuron training experiments.

Subcommands: train, figure, physics-validate, eval, download, digests.
Exit codes: 0 success, 2 configuration error, 3 data error,
4 physics-validation failure, 1 anything else.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from config import TrainingConfig
from experiment_runner import (
    ExperimentSpec,
    Figure,
    evaluate_checkpoint,
    run_figure_suite,
    run_physics_validation,
    run_train,
)
from mnist_data import (
    Dataset,
    Split,
    load_mnist,
    verify_digests,
    write_digests,
)
from mnist_download import DEFAULT_MIRROR, download_mnist
from path_config import PathConfig
from psn_exceptions import (
    ConfigurationError,
    DataFormatError,
    PathConfigurationError,
    PhysicsValidationError,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PHYSICS = 4


def setup_logging(verbose: bool, path_config: PathConfig) -> None:
    """Log to the run log file and to stdout; DEBUG when verbose."""
    log_level = logging.DEBUG if verbose else logging.INFO
    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    logging.basicConfig(
        level=log_level,
        format=log_format,
        handlers=[
            logging.FileHandler(path_config.log_file),
            logging.StreamHandler(sys.stdout)
        ],
        force=True
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--data-dir', help='Directory holding the MNIST IDX files')
    common.add_argument('--out-dir', help='Directory receiving run outputs (default: ./runs)')
    common.add_argument('--config', help='Grouped JSON config file (see config_schema.json)')
    common.add_argument('--jobs', type=int, help='Worker processes for independent (K, seed) runs')
    common.add_argument('--seed', type=int, help='Base seed')
    common.add_argument('--epochs', type=int, help='Epochs per run')
    common.add_argument('--repetitions', type=int, help='Seeds per sweep point')
    common.add_argument('--k', type=int, nargs='+', metavar='K', help='Trial budgets to sweep')
    common.add_argument('--train-limit', type=int, help='Use only the first N training samples')
    common.add_argument('--test-limit', type=int, help='Use only the first N test samples')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(
        description='Train networks of physical stochastic neurons and validate their physics.',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s physics-validate                       Check all activation formulas
  %(prog)s download --data-dir data               Fetch MNIST
  %(prog)s train my_run.json --k 2 10 --jobs 4    Sweep a configured experiment
  %(prog)s figure FIG5 --epochs 5 --train-limit 10000
  %(prog)s eval runs/fig4_set_tp_tp/checkpoints/K10_seed0.npz
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', parents=[common], help='Run one configured sweep')
    train.add_argument('spec', help='Grouped JSON config describing the experiment')

    figure = sub.add_parser('figure', parents=[common], help='Run every configuration of a figure')
    figure.add_argument('figure', choices=[f.value for f in Figure])

    sub.add_parser('physics-validate', parents=[common], help='Compare closed forms with oracles')

    evaluate = sub.add_parser('eval', parents=[common], help='Accuracy of a saved checkpoint')
    evaluate.add_argument('checkpoint')

    download = sub.add_parser('download', parents=[common], help='Fetch the MNIST files')
    download.add_argument('--mirror', default=DEFAULT_MIRROR)

    digests = sub.add_parser('digests', parents=[common], help='Write or verify the SHA-256 manifest')
    digests.add_argument('action', choices=['write', 'verify'])
    digests.add_argument('--manifest', help='Manifest path (default: <data-dir>/mnist_sha256.txt)')
    return parser


def load_training_config(args: argparse.Namespace, config_file: Optional[str]) -> TrainingConfig:
    """Defaults, then the config file, then command-line flags."""
    config = TrainingConfig.from_file(config_file) if config_file else TrainingConfig()
    config.apply_overrides({
        'training.seed': args.seed,
        'training.epochs': args.epochs,
        'experiment.jobs': args.jobs,
        'experiment.repetitions': args.repetitions,
        'experiment.trial_sweep': args.k,
        'data.train_limit': args.train_limit,
        'data.test_limit': args.test_limit,
        'data.data_dir': args.data_dir,
    })
    config.validate()
    return config


def load_datasets(config: TrainingConfig, path_config: PathConfig) -> Tuple[Dataset, Dataset]:
    data_dir = path_config.data_dir
    if config.get('data.verify_digests'):
        verify_digests(data_dir, path_config.digest_manifest)
    return load_mnist(data_dir, Split.TRAIN), load_mnist(data_dir, Split.TEST)


def _resolve_paths(args: argparse.Namespace) -> PathConfig:
    data_dir = args.data_dir
    if data_dir is None and args.config:
        try:
            data_dir = json.loads(Path(args.config).read_text()).get('data', {}).get('data_dir') or None
        except (OSError, ValueError, AttributeError):
            data_dir = None
    return PathConfig.create_from_env(data_dir=data_dir, out_dir=args.out_dir)


def cmd_train(args, path_config: PathConfig) -> int:
    config = load_training_config(args, args.spec)
    spec = ExperimentSpec.from_config(config, path_config.out_dir)
    spec.validate()
    train, test = load_datasets(config, path_config)
    result = run_train(spec, train, test)
    print(f"Summary written to {result.summary_path}")
    return EXIT_OK


def cmd_figure(args, path_config: PathConfig) -> int:
    config = load_training_config(args, args.config)
    base = ExperimentSpec.from_config(config, path_config.out_dir)
    train, test = load_datasets(config, path_config)
    results = run_figure_suite(Figure(args.figure), base, train, test)
    for result in results:
        print(f"{result.spec.name}: {result.summary_path}")
    return EXIT_OK


def cmd_physics(args, path_config: PathConfig) -> int:
    out_dir = path_config.experiment_dir('physics_validation')
    report = run_physics_validation(out_dir, seed=args.seed or 0)

    print(f"{'check':<40} {'value':>14} {'tolerance':>14}  result")
    for c in report.checks:
        print(f"{c.check:<40} {c.value:>14.6e} {c.tolerance:>14.6e}  {'PASS' if c.passed else 'FAIL'}")
    print(f"Selected TSP variant: {report.selected_variant}")
    print(f"Report and curves written to {out_dir}")

    if not report.passed:
        names = ', '.join(c.check for c in report.failures())
        raise PhysicsValidationError(f"physics checks failed: {names}")
    return EXIT_OK


def cmd_eval(args, path_config: PathConfig) -> int:
    test = load_mnist(path_config.data_dir, Split.TEST)
    if args.test_limit:
        test = test.subset(args.test_limit)
    print(json.dumps(evaluate_checkpoint(Path(args.checkpoint), test), indent=2))
    return EXIT_OK


def cmd_download(args, path_config: PathConfig) -> int:
    fetched = download_mnist(path_config.data_dir, args.mirror)
    print(f"Fetched {len(fetched)} file(s) into {path_config.data_dir}")
    return EXIT_OK


def cmd_digests(args, path_config: PathConfig) -> int:
    manifest = Path(args.manifest) if args.manifest else path_config.digest_manifest
    if args.action == 'write':
        digests = write_digests(path_config.data_dir, manifest)
        print(f"Wrote {len(digests)} digest(s) to {manifest}")
    else:
        verified = verify_digests(path_config.data_dir, manifest)
        print(f"Verified {len(verified)} file(s)")
    return EXIT_OK


COMMANDS = {
    'train': cmd_train,
    'figure': cmd_figure,
    'physics-validate': cmd_physics,
    'eval': cmd_eval,
    'download': cmd_download,
    'digests': cmd_digests,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        path_config = _resolve_paths(args)
    except PathConfigurationError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    setup_logging(args.verbose, path_config)
    logger = logging.getLogger(__name__)

    try:
        return COMMANDS[args.command](args, path_config)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except PhysicsValidationError as e:
        logger.error(str(e))
        return EXIT_PHYSICS
    except KeyboardInterrupt:
        logger.info("Stopped by user.")
        return EXIT_ERROR
    except Exception as e:
        logger.error(f"Fatal error: {e}")
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
