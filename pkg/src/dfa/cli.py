"""Command line entry point: ``dfa {run,sweep-gamma,report,export-embeddings,dump-dataset}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigValidationError, load_config
from .datasets import dump_episode
from .experiment import DEFAULT_GAMMAS, ReportError, episode_for, report, run_experiment, sweep_gamma
from .trainer import NonFiniteLossError, export_embeddings, load_checkpoint

EXIT_CONFIG = 2
EXIT_NONFINITE = 3
EXIT_REPORT = 4


def _config(args):
    overrides = list(args.set or [])
    if getattr(args, "mode", None):
        overrides.append(f"mode={args.mode}")
    if getattr(args, "seeds", None):
        overrides.append(f"seeds=[{','.join(map(str, args.seeds))}]")
    if getattr(args, "output_dir", None):
        overrides.append(f"output_dir={args.output_dir}")
    return load_config(args.config, overrides)


def cmd_run(args):
    cfg = _config(args)
    summary = run_experiment(cfg, cfg.output_dir, args.dataset_dump)
    print((Path(cfg.output_dir) / "summary.txt").read_text(), end="")
    return summary


def cmd_sweep(args):
    cfg = _config(args)
    out = args.out or str(Path(cfg.output_dir) / "sweep_gamma")
    if len(args.gammas) < 2 and not args.allow_single:
        raise ConfigValidationError("sweep-gamma needs at least two gamma values (or --allow-single)")
    result = sweep_gamma(cfg, args.gammas, args.seeds or cfg.seeds, out, args.jobs)
    print(result.table(), end="")


def cmd_report(args):
    summary = report(args.run_dirs, args.out, embeddings=not args.no_embeddings)
    for r in summary["runs"]:
        print(f"{r['run']}: mean acc {r['mean_accuracy']:.4f} +/- {r['std_accuracy']:.4f}")
    for p in summary["paired"]:
        print(f"{p['run']} - {p['reference']}: {p['mean_difference']:+.4f} over seeds {p['seeds']}")


def cmd_export(args):
    extractor, _, _, cfg, seed = load_checkpoint(args.checkpoint)
    seed = seed if args.seed is None else args.seed
    n = export_embeddings(extractor, episode_for(cfg, seed), args.out)
    print(f"wrote {n} records to {args.out}")


def cmd_dump(args):
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    dump_episode(episode_for(cfg, seed), args.out)
    print(f"wrote episode (seed {seed}) to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfa", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--set", nargs="+", metavar="KEY=VALUE", action="extend",
                        help="override config values (dotted path or unique leaf name)")

    r = sub.add_parser("run", help="train every seed in the config")
    config_args(r)
    r.add_argument("--mode", choices=["dfa", "s+t", "ent"])
    r.add_argument("--seeds", type=int, nargs="+")
    r.add_argument("--output-dir")
    r.add_argument("--dataset-dump", metavar="PATH", help="also write the episode to PATH")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep-gamma", help="bank pace ablation grid")
    config_args(s)
    s.add_argument("--gammas", type=float, nargs="+", default=list(DEFAULT_GAMMAS))
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--mode", choices=["dfa", "s+t", "ent"])
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--allow-single", action="store_true", help="permit a one-gamma grid")
    s.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="aggregate finished runs into data files")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--out", required=True)
    rep.add_argument("--no-embeddings", action="store_true")
    rep.set_defaults(func=cmd_report)

    e = sub.add_parser("export-embeddings", help="write target features from a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, help="episode seed (default: the checkpoint's run seed)")
    e.set_defaults(func=cmd_export)

    d = sub.add_parser("dump-dataset", help="write the episode of a config to a flat file")
    config_args(d)
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except ConfigValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ReportError as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_REPORT
    return 0


if __name__ == "__main__":
    sys.exit(main())
