"""Command-line entry point: ``segnl <command> --config run.json``.

Exit codes: 0 success, 1 the network did not beat the watershed by the
required margin and significance, 2 usage or config error, 3 runtime error.
"""

import argparse
import logging
import sys

from threadpoolctl import threadpool_limits

from segnl import pipeline, report
from segnl.config import ConfigError, RunConfig, dump_config, load_config

EXIT_OK, EXIT_COMPARISON, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

COMMANDS = ("generate", "pseudolabel", "train", "evaluate", "experiment", "print-default-config")


def build_parser():
    parser = argparse.ArgumentParser(prog="segnl", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="run config JSON (see print-default-config)")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP thread limit; 1 gives byte-identical reruns")
    parser.add_argument("--force", action="store_true", help="rebuild outputs even when up to date")
    parser.add_argument("--resume", action="store_true", help="train: continue from the last checkpoint")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _comparison_code(result):
    return EXIT_OK if result["comparison"]["passed"]["both"] else EXIT_COMPARISON


def _print_summary(result):
    print(report.format_table(result["table"]))
    print(f"bootstrap p (both): {result['bootstrap_pvalue']['both']:.4f}")


def run(args):
    if args.command == "print-default-config":
        sys.stdout.write(dump_config(RunConfig()))
        return EXIT_OK
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    config = load_config(args.config)

    with threadpool_limits(limits=args.threads):
        if args.command == "generate":
            print(pipeline.run_generate(config, args.force))
        elif args.command == "pseudolabel":
            summary = pipeline.run_pseudolabel(config, args.force)
            n_failed = len(summary["failed"])
            print(f"pseudo-labels: {len(summary['subjects']) - n_failed} ok, {n_failed} failed "
                  f"(excluded {n_failed} cases)")
            if summary["mean_dsc_both"] is not None:
                print(f"mean pseudo-label DSC vs truth: {summary['mean_dsc_both']:.4f}")
        elif args.command == "train":
            print(pipeline.run_train(config, args.force, args.resume))
        elif args.command == "evaluate":
            result = pipeline.run_evaluate(config, args.force)
            _print_summary(result)
            return _comparison_code(result)
        else:
            result = pipeline.run_experiment(config, args.force)
            _print_summary(result)
            return _comparison_code(result)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"segnl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"segnl: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
