"""``fect`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline as pl
from .aggregator import EmptyBagError
from .config import ConfigError, apply_overrides, load_config
from .descriptors import FeatureCacheError
from .fusion import GridSpec
from .imaging import NetpbmError
from .numkit import ShapeError
from .svm import DegenerateLabelsError
from .synthgen import load_recipe

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("fect")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so they do not clobber flags given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = _Parser(add_help=False)
    common.add_argument("--config", default=d(None), help="key=value configuration file")
    common.add_argument("--seed", type=int, default=d(None), help="global seed (overrides config)")
    common.add_argument("--jobs", type=int, default=d(None), help="worker processes for per-image extraction")
    common.add_argument("--set", action="append", default=d([]), metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fect", description="Multimodal cell/tissue/edge feature pipeline.", parents=[_common(False)])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common(True)

    g = sub.add_parser("generate", parents=[common], help="render the synthetic dataset")
    g.add_argument("--recipe", help="JSON recipe (default: built-in four-class recipe)")
    g.add_argument("--out", help="output directory (default: data_dir)")

    for name, help_ in (("extract", "write one modality's feature caches"),
                        ("train-aggregator", "train a cell or edge aggregator")):
        s = sub.add_parser(name, parents=[common], help=help_)
        # tissue is accepted by train-aggregator so the error names the reason
        s.add_argument("--modality", required=True, choices=("cell", "tissue", "edge"))
        if name == "extract":
            s.add_argument("--split", action="append", choices=pl.SPLITS,
                           help="split to extract (repeatable; default all)")

    sub.add_parser("train-svm", parents=[common], help="fit normalizer and one-vs-one SVM on the train split") \
        .add_argument("--weights", type=_floats, help="alpha,beta,gamma (default from config)")
    for name, help_ in (("evaluate", "metrics and predictions for one split"),
                        ("ablate", "retrain and score all seven modality subsets")):
        sub.add_parser(name, parents=[common], help=help_).add_argument("--split", choices=pl.SPLITS)
    gs = sub.add_parser("gridsearch", parents=[common], help="alpha/beta/gamma search on the val split")
    gs.add_argument("--alphas", type=_floats)
    gs.add_argument("--betas", type=_floats)
    gs.add_argument("--gammas", type=_floats)
    pr = sub.add_parser("project", parents=[common], help="2-D PCA coordinates as CSV")
    pr.add_argument("--modality", default="fused", choices=("fused", "cell", "tissue", "edge"))
    pr.add_argument("--split", choices=pl.SPLITS)
    pr.add_argument("--out", help="output CSV path")
    return p


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = raw.strip()
    cfg = load_config(args.config) if args.config else load_config()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    changes = {k: v for k, v in (("seed", args.seed), ("jobs", args.jobs)) if v is not None}
    return cfg.replace(**changes) if changes else cfg


def _dispatch(args, cfg):
    cmd = args.command
    if cmd == "generate":
        recipe = None
        if args.recipe:
            recipe = load_recipe(args.recipe)
        print(pl.stage_generate(cfg, recipe, args.out))
    elif cmd == "extract":
        for path in pl.stage_extract(cfg, args.modality, tuple(args.split or pl.SPLITS)):
            print(path)
    elif cmd == "train-aggregator":
        print(pl.stage_train_aggregator(cfg, args.modality))
    elif cmd == "train-svm":
        if args.weights is not None and len(args.weights) != 3:
            raise UsageError("--weights needs exactly three values")
        print(pl.stage_train_svm(cfg, args.weights))
    elif cmd == "evaluate":
        m, _ = pl.stage_evaluate(cfg, args.split)
        print(f"acc={m.accuracy:.6f} balanced_acc={m.balanced_accuracy:.6f} "
              f"macro_f1={m.macro_f1:.6f} weighted_f1={m.weighted_f1:.6f}")
    elif cmd == "ablate":
        for row in pl.stage_ablate(cfg, args.split):
            print(f"{row.subset:12s} balanced_acc={row.metrics.balanced_accuracy:.4f} "
                  f"weighted_f1={row.metrics.weighted_f1:.4f}")
    elif cmd == "gridsearch":
        grid = None
        if args.alphas or args.betas or args.gammas:
            steps = tuple(round(0.1 * i, 1) for i in range(11))
            grid = GridSpec(args.alphas or steps, args.betas or steps, args.gammas or cfg.gammas)
        best, rows = pl.stage_gridsearch(cfg, grid)
        print(f"best alpha={best.alpha} beta={best.beta} gamma={best.gamma} ({len(rows)} points)")
    elif cmd == "project":
        print(pl.stage_project(cfg, args.modality, args.split, args.out))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    stage = args.command
    try:
        cfg = _config(args)
        log.info("resolved configuration:\n%s", cfg.dump())
        _dispatch(args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"fect {stage}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"fect {stage}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pl.PipelineError, FeatureCacheError, NetpbmError, ShapeError, EmptyBagError,
            DegenerateLabelsError, OSError, ValueError, KeyError) as exc:
        print(f"fect {stage}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
