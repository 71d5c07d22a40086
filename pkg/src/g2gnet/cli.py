"""Command line entry point: ``g2gnet {fetch,train,sweep,table1,table2,inspect}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .data_io import DATASETS, fetch
from .errors import CheckpointError, ConfigurationError, TrainingDiverged
from .experiment import SWEEP_AXES, ExperimentConfig, inspect_checkpoint, load_config, run_training, sweep, table1, table2

EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file; flags override its keys")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "dst":
            p.add_argument(flag, type=json.loads, default=None, help='rewire policy as JSON, e.g. \'{"prune_criterion": "magnitude"}\'')
            continue
        # field annotations are strings under postponed evaluation
        kind = int if "int" in f.type else float if "float" in f.type else str
        p.add_argument(flag, type=kind, default=None, dest=f.name)
    p.add_argument("--no-dst", action="store_true", help="disable rewiring even if the config enables it")


def _config(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(ExperimentConfig)}
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        cfg = ExperimentConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.no_dst:
        cfg = cfg.replace(dst=None)
    cfg.validate()
    return cfg


def _parse_values(axis, text):
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis in ("grouping", "model"):
        return items
    if axis == "dt":
        return [int(v) for v in items]
    return [float(v) for v in items]


def _seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="g2gnet", description="Train and evaluate group-to-group sparse MLPs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch", help="download and verify a dataset")
    p.add_argument("dataset", choices=DATASETS)
    p.add_argument("--dest", default="data")

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="sweep one axis over several seeds")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)

    p = sub.add_parser("table1", help="connectivity-pattern comparison")
    _add_config_flags(p)
    p.add_argument("--datasets", default="fashion_mnist,cifar10,cifar100")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)

    p = sub.add_parser("table2", help="prune/grow criterion grid")
    _add_config_flags(p)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)

    p = sub.add_parser("inspect", help="report on a checkpoint")
    p.add_argument("checkpoint")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fetch":
            print(json.dumps(fetch(args.dataset, args.dest), indent=2))
        elif args.command == "train":
            print(json.dumps(run_training(_config(args)), indent=2, sort_keys=True))
        elif args.command == "sweep":
            rows = sweep(_config(args), args.axis, _parse_values(args.axis, args.values), _seeds(args.seeds), args.jobs, out_csv=args.out)
            print(json.dumps(rows, indent=2))
        elif args.command == "table1":
            datasets = [d for d in args.datasets.split(",") if d]
            print(json.dumps(table1(_config(args), datasets, _seeds(args.seeds), args.jobs, args.out), indent=2))
        elif args.command == "table2":
            cfg = _config(args)
            print(json.dumps(table2(cfg, cfg.dataset, _seeds(args.seeds), args.jobs, args.out), indent=2))
        elif args.command == "inspect":
            print(json.dumps(inspect_checkpoint(args.checkpoint), indent=2))
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
