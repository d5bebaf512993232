"""Command-line entry point: ``fedfair {partition,train,adapt,report,run}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .data import DataFormatError, dirichlet_partition, read_csv_batch, synth_pool, write_csv_batch
from .experiment import (
    Artifacts,
    build_dataset,
    evaluate_variants,
    load_trained,
    train_variants,
    write_evaluation,
    write_manifest,
    run_experiment,
)
from .metrics import ReportError, build_report, read_clients_csv, write_report_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fedfair")

# flag -> dotted config key
_FLAG_KEYS = {
    "seed": "seed",
    "profile": "profile",
    "objective": "objective.kind",
    "q": "objective.q",
    "t_tilt": "objective.t_tilt",
    "eta": "objective.eta",
    "rounds": "train.rounds",
    "clients_per_round": "train.clients_per_round",
    "pafl": "pafl.preset",
    "max_adapt_clients": "adapt.max_clients",
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", help="named preset: synthetic, reddit-like, femnist-like, cifar-like")
    p.add_argument("--objective", choices=["fedavg", "qffl", "term"])
    p.add_argument("--q", type=float)
    p.add_argument("--t-tilt", dest="t_tilt", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients-per-round", dest="clients_per_round", type=int)
    p.add_argument("--pafl", choices=["none", "h_kd", "h_ewc"])
    p.add_argument("--max-adapt-clients", dest="max_adapt_clients", type=int)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set data.heterogeneity=0.5")
    p.add_argument("--workers", type=int, default=1, help="local-training processes (output is identical for any N)")


def _load(args):
    overrides = list(args.overrides)
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value!r}" if isinstance(value, str) else f"{key}={value}")
    if args.workers < 1:
        raise ConfigError("--workers must be ≥ 1")
    return parse_config(args.config, overrides)


def cmd_run(args) -> int:
    cfg = _load(args)
    run_experiment(cfg, args.out, args.workers)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(args)
    arts = Artifacts(args.out)
    dataset = build_dataset(cfg)
    finals = train_variants(cfg, dataset, arts, args.workers)
    write_manifest(arts.path("manifest.json"), cfg, "train", {"clients": dataset.m, "variants": list(finals)})
    arts.commit()
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _load(args)
    arts = Artifacts(args.out)
    dataset = build_dataset(cfg)
    finals = load_trained(cfg, args.checkpoints)
    evals = evaluate_variants(cfg, dataset, finals, args.workers)
    write_evaluation(cfg, evals, arts)
    write_manifest(arts.path("manifest.json"), cfg, "adapt", {"clients": dataset.m, "variants": list(finals)})
    arts.commit()
    return EXIT_OK


def cmd_report(args) -> int:
    evals, methods = read_clients_csv(args.clients)
    rows = build_report(evals, methods, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, rows)
    return EXIT_OK


def cmd_partition(args) -> int:
    if args.clients < 1:
        raise ConfigError("--clients must be ≥ 1")
    if not args.alpha > 0:
        raise ConfigError("--alpha must be > 0")
    if args.input:
        pool = read_csv_batch(args.input)
    else:
        pool = synth_pool(args.samples, args.classes, args.dims, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parts = dirichlet_partition(pool.labels, args.clients, args.alpha, args.seed)
    for k, idx in enumerate(parts):
        write_csv_batch(out / f"client_{k}.csv", pool.subset(idx))
    if args.test_samples and not args.input:
        test = synth_pool(args.test_samples, args.classes, args.dims, args.seed, stream=1)
        write_csv_batch(out / "fed_test.csv", test)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedfair", description="Fair and personalisation-aware federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline: train, adapt, evaluate, report")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train", help="federated training only (history.csv + checkpoints)")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="local baselines and adaptation from trained checkpoints")
    _add_config_args(p)
    p.add_argument("--checkpoints", required=True, help="directory written by `fedfair train`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("report", help="recompute a fairness table from clients.csv")
    p.add_argument("--clients", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["relative", "absolute"], default="relative")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("partition", help="Dirichlet-partition a pooled dataset into client CSV files")
    p.add_argument("--out", required=True)
    p.add_argument("--input", help="pooled CSV (f0..f{d-1},label); synthetic clusters if omitted")
    p.add_argument("--clients", type=int, default=100)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dims", type=int, default=20)
    p.add_argument("--test-samples", dest="test_samples", type=int, default=0)
    p.set_defaults(func=cmd_partition)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("FEDFAIR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fedfair: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ReportError, FileNotFoundError) as exc:
        # bad or missing input files are reported like config errors
        print(f"fedfair: input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        log.debug("runtime failure", exc_info=True)
        print(f"fedfair: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
