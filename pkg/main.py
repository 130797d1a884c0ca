#!/usr/bin/env python3
"""Main entrypoint for fixformer: gaze-guided image classification runs."""

from dotenv import load_dotenv
load_dotenv()

import sys
import argparse
from typing import NoReturn, Union
from modules.config import EXIT_USAGE, LOG_LEVEL, thread_count
from modules.logger import setup_logging, get_logger

logger = get_logger(__name__)


class UsageParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with EXIT_USAGE instead of 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(
        prog='fixformer', description='Gaze-guided image classification with ragged transformers'
    )
    common = UsageParser(add_help=False)
    common.add_argument('--config', help='YAML run configuration')
    common.add_argument(
        '--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
        help='Override one configuration key (repeatable)'
    )
    common.add_argument('--log-level', default=LOG_LEVEL, help='Logging level (default: %(default)s)')

    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('generate', parents=[common], help='Write a synthetic dataset directory')
    sub.add_parser('train', parents=[common], help='Train one variant and report test metrics')
    evaluate = sub.add_parser('eval', parents=[common], help='Score a checkpoint on a split')
    evaluate.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    gradcheck = sub.add_parser('gradcheck', parents=[common], help='Finite-difference gradient check')
    gradcheck.add_argument(
        '--variant', dest='variants', action='append', default=[],
        help='Variant to check (repeatable; default: the configured variant)'
    )
    bench = sub.add_parser('bench', parents=[common], help='Ragged against padded attention')
    bench.add_argument(
        '--profile', dest='profiles', action='append', default=[],
        help="Length profile: equal, mixed, skewed or all (repeatable)"
    )
    export = sub.add_parser('export-attn', parents=[common], help='Dump cross-attention weights')
    export.add_argument('--sample', required=True, help='Sample id from the manifest')
    report = sub.add_parser('report', parents=[common], help='Summarize attention dump files')
    report.add_argument('--attention-dir', help='Directory of dump files')
    sub.add_parser('ablation', parents=[common], help='Train every variant over several seeds')
    return parser


def main(argv: Union[list[str], None] = None) -> int:
    """Main entry point for fixformer."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    from fixformer.errors import ConfigError, ContractError
    from fixformer.ragged import set_num_threads
    from modules import commands
    from modules.run_config import load_run_config

    try:
        cfg = load_run_config(args.config, args.overrides)
        threads = thread_count()
        set_num_threads(threads)
    except (ConfigError, ContractError) as err:
        logger.error(f"Configuration rejected: {err}")
        return EXIT_USAGE
    logger.info(f"Running '{args.command}' with variant {cfg.variant.value} ({threads} threads)")

    if args.command == 'generate':
        return commands.cmd_generate(cfg)
    if args.command == 'train':
        return commands.cmd_train(cfg)
    if args.command == 'eval':
        return commands.cmd_eval(cfg, args.split)
    if args.command == 'gradcheck':
        return commands.cmd_gradcheck(cfg, args.variants)
    if args.command == 'bench':
        return commands.cmd_bench(cfg, args.profiles)
    if args.command == 'export-attn':
        return commands.cmd_export_attention(cfg, args.sample)
    if args.command == 'report':
        return commands.cmd_report(cfg, args.attention_dir)
    return commands.cmd_ablation(cfg)


if __name__ == "__main__":
    sys.exit(main())
