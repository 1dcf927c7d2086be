"""
Spiking Operator Surrogate - Reliability Pipeline
Simulate, train, calibrate and evaluate a conformalized Bayesian spiking
operator network, then estimate time-dependent failure probabilities.
"""

import argparse
import logging
import sys
from pathlib import Path

# Configure logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

# Add utils to path
sys.path.append(str(Path(__file__).parent))

from utils.config import load_config
from utils.errors import (
    ArtifactExistsError,
    ConfigurationError,
    InvalidInputError,
    NumericalError,
)
from utils.pipeline import (
    RunContext,
    cmd_calibrate,
    cmd_energy_report,
    cmd_evaluate,
    cmd_reliability,
    cmd_simulate,
    cmd_train,
    run,
)


COMMANDS = {
    'simulate': lambda ctx, args: cmd_simulate(ctx),
    'train': lambda ctx, args: cmd_train(ctx),
    'calibrate': lambda ctx, args: cmd_calibrate(ctx),
    'evaluate': lambda ctx, args: cmd_evaluate(ctx, identity=args.identity),
    'reliability': lambda ctx, args: cmd_reliability(ctx),
    'energy-report': lambda ctx, args: cmd_energy_report(ctx),
    'run': lambda ctx, args: run(ctx, identity=args.identity),
}

HELP = {
    'simulate': 'Sample inputs and simulate train/cal/test/reliability datasets',
    'train': 'Train one variational operator network per response DOF',
    'calibrate': 'Compute per-timestep conformal schedules',
    'evaluate': 'NMSE, coverage and spiking activity on the test split',
    'reliability': 'Surrogate probability of failure with calibrated bounds',
    'energy-report': 'Analytical ANN vs VSN energy curves',
    'run': 'All stages in order',
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='Experiment config (JSON)')
    common.add_argument('--out', default='runs/default', help='Output directory')
    common.add_argument('--seed', type=int, default=None, help='Override the global seed')
    common.add_argument('--force', action='store_true', help='Overwrite existing artifacts')
    common.add_argument('--threads', type=int, default=1, help='Maximum worker threads')
    common.add_argument('--verbose', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name, parents=[common], help=HELP[name])
        if name in ('evaluate', 'run'):
            sub.add_argument('--identity', action='store_true',
                             help='Feed truths back as predictions (harness self-check)')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    if args.threads < 1:
        logger.error("--threads must be at least 1")
        return 2
    try:
        config = load_config(args.config, seed=args.seed)
        ctx = RunContext(config, Path(args.out), force=args.force, threads=args.threads)
        logger.info(f"Running '{args.command}' for {config.name} (seed {config.seed}) into {ctx.out_dir}")
        COMMANDS[args.command](ctx, args)
    except ArtifactExistsError as e:
        logger.error(str(e))
        return 3
    except (ConfigurationError, InvalidInputError, NumericalError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
