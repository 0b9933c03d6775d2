"""Command line entry point.

    mids run <config> [--out DIR] [--workers N]
    mids charts <run-dir>
    mids presets list
    mids validate <config>

Exit status is 0 on success, 1 for configuration errors and 2 for runtime
failures (including any seed whose chain failed).  ``MIDS_WORKERS`` sets
the default number of worker processes for ``run``.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import PRESETS, ConfigError, parse_config, preset_names

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _cmd_run(args) -> int:
    from .runner import run_experiment, worker_count

    config = parse_config(args.config)
    try:
        workers = args.workers if args.workers is not None else worker_count()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if workers < 1:
        raise ConfigError("--workers must be >= 1")

    def progress(arm, seed, entry):
        line = f"[{arm}] seed {seed}: {entry['status']} ({entry['wall_time']:.1f}s)"
        if entry["status"] != "complete":
            line += f" {entry['error']}"
        print(line, file=sys.stderr)

    result = run_experiment(config, out_dir=args.out, workers=workers,
                            progress=None if args.quiet else progress)
    print(result.path)
    if not result.ok:
        print(f"{len(result.failures)} chain(s) failed; see manifest.json", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_charts(args) -> int:
    from .charts import emit_charts

    for path in emit_charts(args.run_dir):
        print(path)
    return EXIT_OK


def _cmd_presets(args) -> int:
    width = max(len(n) for n in PRESETS)
    for name in preset_names():
        print(f"{name:<{width}}  {PRESETS[name]['description']}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    config = parse_config(args.config)
    print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mids", description="Model-induced distribution shift simulations."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every arm and seed of an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="output root (overrides output.dir)")
    run.add_argument("--workers", type=int, help="worker processes (default: $MIDS_WORKERS or 1)")
    run.add_argument("-q", "--quiet", action="store_true", help="no per-seed progress lines")
    run.set_defaults(func=_cmd_run)

    charts = sub.add_parser("charts", help="render SVG charts for a run directory")
    charts.add_argument("run_dir")
    charts.set_defaults(func=_cmd_charts)

    presets = sub.add_parser("presets", help="inspect built-in presets")
    presets_sub = presets.add_subparsers(dest="action", required=True)
    presets_sub.add_parser("list", help="list preset names").set_defaults(func=_cmd_presets)

    validate = sub.add_parser("validate", help="check a config and print its resolved form")
    validate.add_argument("config")
    validate.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors count as config errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; unfinished seeds are marked incomplete", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
