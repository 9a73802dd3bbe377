"""Command line entry point.

    sfada pretrain <config> [--seed N] [--out-dir DIR]
    sfada run <config> [--seed N] [--strategy S] [--out-dir DIR] [--eval-on-pool]
    sfada sample <config> --round-probe [--seed N] [--strategy S] [--out-dir DIR]
    sfada eval <checkpoint> <csv> [--header]

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .domains import CsvParseError, CsvSchema, load_csv
from .harness import (ConfigError, budget_schedule, evaluate, load_config, make_domains,
                      pretrain_source, resolve_budget, run_experiment, score_pool,
                      split_target, write_selections_csv)
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .pool import TargetPool
from .sampling import STRATEGIES

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "strategy", None) is not None:
        cfg.strategy = args.strategy
    if getattr(args, "eval_on_pool", False):
        cfg.eval_on_pool = True
    cfg.validate()
    return cfg


def _source_model(cfg):
    source, _ = make_domains(cfg)
    if cfg.source_checkpoint:
        return load_checkpoint(cfg.source_checkpoint, n_classes=source.n_classes,
                               input_dim=source.input_dim)
    return pretrain_source(source, cfg)


def cmd_pretrain(args) -> int:
    cfg = _load(args)
    source, _ = make_domains(cfg)
    model = pretrain_source(source, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = save_checkpoint(model, out / "source.ckpt")
    print(f"source validation accuracy {model.val_accuracy:.4f}; saved {path}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    result = run_experiment(cfg, out_dir=args.out_dir)
    print(f"source-only accuracy {result.source_acc:.4f}")
    for m in result.metrics:
        print(f"round {m.round:2d}  labeled {m.labeled_count:4d}  mean_acc {m.mean_acc:.4f}")
    print(f"artifacts written to {args.out_dir}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if not args.round_probe:
        raise ConfigError("sample currently supports only --round-probe")
    cfg = _load(args)
    model = _source_model(cfg)
    _, target = make_domains(cfg)
    pool_set, _ = split_target(target, cfg.test_fraction, cfg.seed, cfg.eval_on_pool)
    b = budget_schedule(resolve_budget(cfg.budget, len(pool_set)), cfg.rounds)[0]
    pool = TargetPool(pool_set.ids, pool_set.features)
    chosen, diag, _ = score_pool(model, pool, cfg.strategy, cfg, b, 0, {}, rng_seed=cfg.seed * 1000)
    truth = dict(zip(pool_set.ids.tolist(), pool_set.labels.tolist()))
    rows = [{"round": 1, "id": i, "u_cm": diag[i][0], "u_ct": diag[i][1], "u": diag[i][2],
             "y_a": diag[i][3], "true_label": truth[i]} for i in chosen]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_selections_csv(rows, out / "selections.csv")
    print(f"{cfg.strategy}: would query {len(chosen)} ids: {chosen}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    data = load_csv(args.csv, CsvSchema(n_classes=model.n_classes, has_header=args.header,
                                        input_dim=model.input_dim))
    mean_acc, per_class = evaluate(model, data)
    print(f"mean_acc {mean_acc:.4f}")
    for c, a in enumerate(per_class):
        print(f"class {c}: {a:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfada", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy=True):
        p.add_argument("config")
        p.add_argument("--seed", type=int)
        if strategy:
            p.add_argument("--strategy", choices=STRATEGIES)
        p.add_argument("--out-dir", default="out")

    p = sub.add_parser("pretrain", help="train the source model and save source.ckpt")
    common(p, strategy=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run all query/adapt rounds")
    common(p)
    p.add_argument("--eval-on-pool", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sample", help="score the pool once without adapting")
    common(p)
    p.add_argument("--round-probe", action="store_true")
    p.add_argument("--eval-on-pool", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled CSV")
    p.add_argument("checkpoint")
    p.add_argument("csv")
    p.add_argument("--header", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, CsvParseError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
