"""Command-line entry point.

    ugfem run CONFIG [--scheme S] [--k K] [--study KIND] [--rho-list ...]
                     [--levels ...] [--grid uniform|unstructured|file]
                     [--mesh-node F --mesh-ele F] [--seed N]
                     [--out csv|md] [--output PATH] [--check]

Exit codes: 0 success, 1 configuration error, 2 numerical failure,
3 acceptance-check failure (with --check).
"""

import argparse
import sys

from .harness import (
    ConfigError,
    check_study,
    emit,
    emit_result,
    parse_config_text,
    run_study,
    study_from_mapping,
)
from .linsolve import SingularFactorizationError


def _build_parser():
    parser = argparse.ArgumentParser(prog="ugfem")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a study from a config file")
    run.add_argument("config", help="path to a key = value config file")
    run.add_argument("--scheme")
    run.add_argument("--k", type=int)
    run.add_argument("--study")
    run.add_argument("--rho-list")
    run.add_argument("--levels")
    run.add_argument("--grid", choices=["uniform", "unstructured", "file"])
    run.add_argument("--mesh-node")
    run.add_argument("--mesh-ele")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", choices=["csv", "md"])
    run.add_argument("--output")
    run.add_argument("--check", action="store_true")
    return parser


_FLAG_KEYS = {
    "scheme": "scheme.name",
    "k": "scheme.k",
    "study": "study",
    "rho_list": "rho.list",
    "levels": "grid.levels",
    "grid": "grid.kind",
    "mesh_node": "grid.node",
    "mesh_ele": "grid.ele",
    "seed": "grid.seed",
    "out": "out",
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            kv = parse_config_text(fh.read())
        for flag, key in _FLAG_KEYS.items():
            value = getattr(args, flag)
            if value is not None:
                kv[key] = str(value)
        cfg = study_from_mapping(kv)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    try:
        result = run_study(cfg)
    except SingularFactorizationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2

    if hasattr(result, "columns"):
        text = emit(result, cfg.out_format)
    else:
        text = emit_result(result, cfg.out_format)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)

    if args.check:
        failures = check_study(cfg, result)
        if failures:
            for f in failures:
                print(f"check failed: {f}", file=sys.stderr)
            return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
