#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
Main application file for deskinfer.
This file is the entry point for the benchmark command line.
"""

import sys
import argparse
from typing import List, Optional

from deskinfer.config import ConfigManager
from deskinfer.utils import LoggerSetup
from deskinfer.bench import emit, run_sweep
from deskinfer.errors import ConfigurationError, CorrectnessError, DeskInferError

EXIT_OK = 0
EXIT_CORRECTNESS = 1
EXIT_CONFIG = 2
EXIT_OUTPUT = 3


def setup_logger(config: ConfigManager) -> LoggerSetup:
    """
    Set up application logging.

    Args:
        config: Configuration manager

    Returns:
        Logger setup instance
    """
    general = config.get_general_settings()
    return LoggerSetup.from_level_name(general.get('log_level', 'INFO'), general.get('log_file'))


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='bench', description='deskinfer - distributed inference benchmark')
    parser.add_argument('--config', type=str, default='config.yaml', help='Path to configuration file')
    parser.add_argument('--tp', type=int, help='Tensor parallel size')
    parser.add_argument('--pp', type=int, help='Pipeline parallel size')
    parser.add_argument('--drce', action='store_true', help='Eliminate padding computation')
    parser.add_argument('--pool', type=str, metavar='PLAN_FILE', help='Serve layers from a memory pool plan')
    parser.add_argument('--batch-sizes', type=_int_list, help='Comma-separated batch sizes, e.g. 1,4,16,32')
    parser.add_argument('--pad-sizes', type=_int_list, help='Comma-separated padding sizes')
    parser.add_argument('--clock', choices=['virtual', 'real'], help='Timing clock')
    parser.add_argument('--out', type=str, help='Report file (default: stdout)')
    parser.add_argument('--format', choices=['csv', 'json', 'table'], help='Report format')
    parser.add_argument('--seed', type=int, help='Seed for model and inputs')
    return parser


def apply_overrides(config: ConfigManager, args: argparse.Namespace) -> None:
    """Command-line flags take precedence over file values."""
    if args.tp is not None:
        config.set('bench', 'tp', [args.tp])
    if args.pp is not None:
        config.set('bench', 'pp', [args.pp])
    if args.drce:
        config.set('bench', 'drce', [True])
    if args.pool:
        config.set('pool', 'plan_file', args.pool)
        config.set('bench', 'pool', [True])
    if args.batch_sizes:
        config.set('bench', 'batch_sizes', args.batch_sizes)
    if args.pad_sizes:
        config.set('bench', 'pad_sizes', args.pad_sizes)
    if args.clock:
        config.set('bench', 'clock', args.clock)
    if args.out:
        config.set('bench', 'out', args.out)
    if args.format:
        config.set('bench', 'format', args.format)
    if args.seed is not None:
        config.set('general', 'seed', args.seed)
        config.set('model', 'seed', args.seed)


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    args = build_parser().parse_args(argv)

    # Load configuration
    config = ConfigManager(args.config)
    apply_overrides(config, args)

    # Set up logging
    logger_setup = setup_logger(config)
    logger = logger_setup.get_logger("main")

    try:
        sweep = config.sweep_config()
    except ConfigurationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    logger.info(f"Starting sweep over {len(sweep.grid())} grid points ({sweep.clock} clock)")
    try:
        report = run_sweep(sweep)
    except CorrectnessError as e:
        logger.error(f"Correctness check failed at {e.grid_point}: {e}")
        return EXIT_CORRECTNESS
    except DeskInferError as e:
        logger.error(f"Sweep aborted: {e}")
        return EXIT_CONFIG

    if not emit(report, sweep.format, sweep.out):
        return EXIT_OUTPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
