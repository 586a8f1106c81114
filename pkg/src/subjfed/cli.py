"""Command line entry point: ``subjfed run | compare | sweep``.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure.
``SUBJFED_OUTPUT_ROOT`` sets where runs go when neither ``--out`` nor
``output_dir`` is given (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, load_config_text, validate
from .experiment import OUTPUT_ROOT_ENV, compare_runs, default_output_dir, parse_grid, run_experiment, run_sweep

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _report(err: ConfigError) -> None:
    for path, msg in err.problems:
        print(f"error: {path}: {msg}" if path else f"error: {msg}", file=sys.stderr)


def _load_raw(path: str, overrides: list[str]) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([(path, "config file not found")])
    raw = load_config_text(p.read_text(encoding="utf-8"), path)
    if not isinstance(raw, dict):
        raise ConfigError([(path, "top level must be a mapping")])
    return apply_overrides(raw, overrides)


def _cmd_run(args) -> int:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_dir={json.dumps(str(args.out))}")
    cfg = validate(_load_raw(args.config, overrides))
    out = default_output_dir(cfg, args.config)
    cfg = cfg.model_copy(update={"output_dir": str(out)})
    code = run_experiment(cfg, out)
    if code == EXIT_OK:
        print(out / "summary.json")
    else:
        print(f"error: run failed, see {out / 'error.json'}", file=sys.stderr)
    return code


def _cmd_compare(args) -> int:
    rows = compare_runs(args.summaries, args.out)
    if args.out is None:
        import csv

        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    raw = _load_raw(args.config, list(args.override))
    grid = parse_grid(args.grid)
    base = validate(raw)
    root = Path(args.out) if args.out else default_output_dir(base, args.config).with_name(
        Path(args.config).stem + "-sweep"
    )
    code, rows = run_sweep(raw, grid, root)
    print(f"{len(rows)} cells -> {root / 'sweep.csv'}")
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subjfed", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<config>-seed<S>)")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    run.set_defaults(func=_cmd_run)

    cmp_ = sub.add_parser("compare", help="tabulate summary.json files")
    cmp_.add_argument("summaries", nargs="+")
    cmp_.add_argument("--out", help="write CSV here instead of stdout")
    cmp_.set_defaults(func=_cmd_compare)

    sweep = sub.add_parser("sweep", help="run a grid of configs")
    sweep.add_argument("config")
    sweep.add_argument("--grid", required=True, help="'security' or 'key=v1,v2;key2=v3,...'")
    sweep.add_argument("--out")
    sweep.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; usage is a validation failure here
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as err:
        _report(err)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
