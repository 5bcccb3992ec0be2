"""Command line entry point: ``bnexpand <subcommand> --config run.json``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import bn_stats_transplant, load_checkpoint, save_checkpoint
from .ewc import EwcConfig
from .experiment import CELLS, ExperimentConfig, Runner, rows_to_csv
from .metrics import bn_variance_probe, export_penultimate_features, kappa_band
from .training import FinetuneMode, StatsSource, evaluate, finetune


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise SystemExit(f"{args.command}: --config is required")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def _dataset(runner: Runner, which: str, part: str):
    o, t = runner.data
    return getattr(o if which == "O" else t, part)


def cmd_train(args) -> int:
    runner = Runner(_config(args), args.quiet)
    rows = runner.run_cell("i")
    sys.stdout.write(rows_to_csv(rows))
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    runner = Runner(cfg, args.quiet)
    origin = runner.origin()
    tc = cfg.train_config("phase2", quiet=args.quiet, finetune_mode=FinetuneMode(args.mode),
                          stats_source=StatsSource(args.stats_source),
                          ewc=None if args.lam is None else EwcConfig(args.lam))
    o, t = runner.data
    fisher = runner.fisher_checkpoint().fisher() if args.lam is not None else None
    res = finetune(origin, t.train, t.val, tc, origin_data=o.train, fisher=fisher)
    tag = f"{args.mode}_{args.stats_source}" + ("" if args.lam is None else f"_lam{args.lam!r}")
    path = Path(cfg.output_dir) / "finetune" / f"{tag}.ckpt"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.network, path, {"seed": cfg.seed, "config_hash": cfg.hash(),
                                        "epoch": res.best_epoch,
                                        "val_accuracy": res.best_val_accuracy})
    sys.stdout.write("dataset,accuracy,kappa,band\n")
    for name, ds in (("O", o.test), ("T", t.test)):
        m = evaluate(res.network, ds)
        sys.stdout.write(f"{name},{m.accuracy:.6f},{m.kappa:.6f},{kappa_band(m.kappa)}\n")
    return 0


def cmd_eval(args) -> int:
    runner = Runner(_config(args), args.quiet)
    net = load_checkpoint(args.checkpoint).build_network()
    source = load_checkpoint(args.stats_from) if args.stats_from else None
    sys.stdout.write("dataset,accuracy,kappa,band\n")
    for which in args.dataset:
        m = evaluate(net, _dataset(runner, which, args.split), stats_source=source)
        sys.stdout.write(f"{which},{m.accuracy:.6f},{m.kappa:.6f},{kappa_band(m.kappa)}\n")
    return 0


def cmd_fisher(args) -> int:
    runner = Runner(_config(args), args.quiet)
    ckpt = runner.fisher_checkpoint()
    fisher = ckpt.fisher()
    sys.stdout.write("parameter,mean,max\n")
    for name, v in fisher.values.items():
        sys.stdout.write(f"{name},{float(v.mean())!r},{float(v.max())!r}\n")
    return 0


def cmd_probe(args) -> int:
    runner = Runner(_config(args), args.quiet)
    net = load_checkpoint(args.checkpoint).build_network()
    images = _dataset(runner, args.dataset, "test").images[:args.batch]
    report = bn_variance_probe(net, images, provenance=f"{args.checkpoint}:{args.dataset}")
    text = report.to_csv(args.output)
    if args.output is None:
        sys.stdout.write(text)
    return 0


def cmd_transplant(args) -> int:
    result = bn_stats_transplant(load_checkpoint(args.dst), load_checkpoint(args.src))
    save_checkpoint(result, args.output)
    return 0


def cmd_sweep(args) -> int:
    runner = Runner(_config(args), args.quiet)
    _, path = runner.sweep()
    sys.stdout.write(path.read_text())
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    report = Runner(cfg, args.quiet).run(args.cells)
    sys.stdout.write(report.report_path.read_text())
    for cell, reason in report.failures.items():
        sys.stderr.write(f"cell {cell} failed: {reason}\n")
    return 0 if report.ok else 1


def cmd_export_features(args) -> int:
    runner = Runner(_config(args), args.quiet)
    net = load_checkpoint(args.checkpoint).build_network()
    dump = export_penultimate_features(net, _dataset(runner, args.dataset, args.split),
                                       args.output)
    if not args.quiet:
        sys.stdout.write(f"wrote {len(dump)} rows to {args.output}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # the subcommand copy must not overwrite flags given before the subcommand
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", help="experiment config (JSON)", **kw)
        g.add_argument("--seed", type=int, help="override the config seed", **kw)
        g.add_argument("--out", help="override the output directory", **kw)
        g.add_argument("--quiet", action="store_true", help="suppress progress lines", **kw)
        return g

    common = global_flags(True)
    parser = argparse.ArgumentParser(prog="bnexpand", parents=[global_flags(False)],
                                     description="Domain expansion experiments with "
                                                 "frozen batch-norm statistics and EWC.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    add("train", cmd_train, "train the origin model (cell i)")
    p = add("finetune", cmd_finetune, "fine-tune the origin model on the target domain")
    p.add_argument("--mode", choices=["all_layers", "bn_only"], default="all_layers")
    p.add_argument("--stats-source", choices=["self_live", "frozen_origin"],
                   default="frozen_origin")
    p.add_argument("--lam", type=float, help="EWC lambda; omit for no penalty")
    p = add("eval", cmd_eval, "evaluate a checkpoint on the configured datasets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", nargs="+", choices=["O", "T"], default=["O", "T"])
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--stats-from", help="checkpoint whose BN statistics to use")
    add("fisher", cmd_fisher, "estimate the Fisher diagonal of the origin model")
    p = add("probe", cmd_probe, "per-channel BN output variance on a probe batch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=["O", "T"], default="O")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--output", help="CSV path (default: stdout)")
    p = add("transplant", cmd_transplant, "copy BN running statistics between checkpoints")
    p.add_argument("--dst", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--output", required=True)
    add("sweep", cmd_sweep, "EWC lambda sweep")
    p = add("matrix", cmd_matrix, "run the fine-tuning matrix")
    p.add_argument("--cells", nargs="+", choices=list(CELLS))
    p = add("export-features", cmd_export_features, "write penultimate-layer features as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", choices=["O", "T"], default="O")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--output", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        sys.stderr.write(f"bnexpand {args.command}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
