"""Command-line entry point: ``ftwt <command> ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import experiments as ex
from .config import parse_config
from .errors import BenchmarkError, ConfigurationError, DataError, FormatError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BENCH = 4
EXIT_USAGE = 64

COMMANDS = ("train", "estimate", "eval", "bench", "routes", "shift", "heatmaps", "prepare-mnist")


class _Parser(argparse.ArgumentParser):
    # argument mistakes are configuration errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(f"{self.prog}: {message}")


def _default_out(args, name):
    return Path(args.out) if args.out else Path(args.ckpt).resolve().parent / name


def build_parser():
    p = _Parser(prog="ftwt", description="Train, prune and analyse dynamically gated CNNs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="command")

    s = sub.add_parser("train", help="train a dense baseline or a gated network")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (defaults to the config's output_dir)")
    s.add_argument("--quiet", action="store_true")

    s = sub.add_parser("estimate", help="FLOPs reduction estimate per r before any training")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True, help="dense checkpoint")
    s.add_argument("--r", type=float, nargs="+", required=True)
    s.add_argument("--split", choices=("train", "test"), default="train")
    s.add_argument("--non-cascaded", action="store_true",
                   help="gate each layer on the unmasked dense activations")
    s.add_argument("--out")

    s = sub.add_parser("eval", help="accuracy and FLOPs report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", help="JSON config or dataset section (defaults to the training data)")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--out")

    s = sub.add_parser("bench", help="single-thread batch-1 latency, dense vs dynamic")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--reps", type=int, default=30)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--images", type=int, default=16)
    s.add_argument("--dense-ckpt", help="dense reference (defaults to the gated backbone without heads)")
    s.add_argument("--label", default="", help="machine description recorded in the report")
    s.add_argument("--dataset")
    s.add_argument("--out")

    s = sub.add_parser("routes", help="per-layer route cluster statistics")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--out")

    s = sub.add_parser("shift", help="Brier score under blur or additive noise")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--kind", choices=("blur", "noise"), required=True)
    s.add_argument("--compare", nargs="*", default=[], metavar="NAME=CKPT",
                   help="extra models evaluated on the same corrupted inputs")
    s.add_argument("--sigmas", type=float, nargs="+")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dataset")
    s.add_argument("--out")

    s = sub.add_parser("heatmaps", help="export input/baseline/pruned heatmap triplets")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--dataset")
    s.add_argument("--out")

    s = sub.add_parser("prepare-mnist", help="export the 5,000-digit MNIST sample bundled with mlxtend as IDX")
    s.add_argument("--out", required=True)
    s.add_argument("--test-per-class", type=int, default=250)
    s.add_argument("--seed", type=int, default=0)
    return p


def _compare(items):
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise ConfigurationError(f"--compare expects NAME=CKPT, got {item!r}")
        out[name] = path
    return out


def _dataset(args):
    return ex.dataset_from_file(args.dataset) if getattr(args, "dataset", None) else None


def _run(args):
    cmd = args.command
    if cmd == "train":
        cfg = parse_config(args.config)
        out = args.out or cfg.output_dir
        if out is None:
            raise ConfigurationError("train needs --out or output_dir in the config")
        log = None if args.quiet else (lambda row: print(
            f"epoch {row['epoch']:3d}  lr {row['lr']:.4g}  L_ent {row['L_ent']:.4f}  "
            f"L_pred {row['L_pred']:.4f}  test_acc {row['test_acc']:.4f}", flush=True))
        rep = ex.run_train(cfg, out, log)
        print(f"test accuracy {rep['test_accuracy']:.4f}")
        if "flops" in rep:
            print(f"measured FLOPs reduction {rep['flops']['reduction_percent']:.2f}%")
    elif cmd == "estimate":
        cfg = parse_config(args.config)
        rows = ex.run_estimate(cfg, args.ckpt, args.r, _default_out(args, "estimate"),
                               cascaded=not args.non_cascaded, split=args.split)
        print(f"{'r':>6}  estimated reduction")
        for row in rows:
            print(f"{row['r']:>6.3f}  {row['reduction']:8.2f}%")
    elif cmd == "eval":
        rep = ex.run_eval(args.ckpt, _default_out(args, "eval"), _dataset(args), args.split)
        print(f"accuracy {rep['accuracy']:.4f} on {rep['samples']} {rep['split']} samples")
        if "flops" in rep:
            print(f"measured FLOPs reduction {rep['flops']['reduction_percent']:.2f}%")
    elif cmd == "bench":
        rep = ex.run_bench(args.ckpt, _default_out(args, "bench"), args.reps, args.warmup,
                           args.images, args.dense_ckpt, _dataset(args), args.label)
        print(rep.to_table())
    elif cmd == "routes":
        stats = ex.run_routes(args.ckpt, _default_out(args, "routes"), _dataset(args), args.split)
        print(f"{'layer':>5} {'clusters':>9} {'core_ratio':>11} {'pruning':>8}")
        for r in stats.layers.values():
            print(f"{r.block:>5} {r.clusters:>9} {r.core_ratio:>11.3f} {r.pruning_ratio:>8.3f}")
    elif cmd == "shift":
        rep = ex.run_shift(args.ckpt, args.kind, _default_out(args, f"shift_{args.kind}"),
                           _compare(args.compare), _dataset(args), args.sigmas, args.seed)
        print(rep.to_table())
    elif cmd == "heatmaps":
        rows = ex.run_heatmaps(args.ckpt, args.layer, args.n, _default_out(args, "heatmaps"),
                               _dataset(args))
        print(f"wrote {len(rows)} heatmap triplets")
    elif cmd == "prepare-mnist":
        from .data import export_bundled_mnist
        paths = export_bundled_mnist(args.out, args.test_per_class, args.seed)
        for k, v in paths.items():
            print(f"{k}: {v}")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv or argv[0] in ("-h", "--help"):
        parser.print_help()
        return EXIT_OK if argv else EXIT_USAGE
    if argv[0] not in COMMANDS:
        print(f"ftwt: unknown command {argv[0]!r}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        _run(parser.parse_args(argv))
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except BenchmarkError as e:
        print(f"benchmark refused: {e}", file=sys.stderr)
        return EXIT_BENCH
    return EXIT_OK


cli_dispatch = main
