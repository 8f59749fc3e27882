"""Command line entry point: ``wotlab train|eval|landscape|sweep``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""
import argparse
import copy
import csv
import logging
import os
import sys

import numpy as np

from .attacks import input_landscape, weight_landscape, write_landscape_csv
from .checkpoint import load_checkpoint
from .config import config_from_dict, config_to_dict, parse_config, set_dotted
from .errors import CheckpointError, ConfigError, DataFormatError
from .models import build_model, make_layout
from .train import check_compatible, eval_suite, format_report, load_splits, run_training

EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 2, 3, 4


def _load_model(path, cfg):
    params, meta = load_checkpoint(path)
    if params.layout != make_layout(cfg.model):
        raise CheckpointError(f"{path}: layout does not match the configured model")
    return build_model(cfg.model, cfg.seed).with_params(params)


def cmd_train(args):
    cfg = parse_config(args.config)
    out = args.out or cfg.output_dir
    res = run_training(cfg, out)
    last = res.metrics[-1]
    print(f"trained {cfg.epochs} epochs ({res.total_steps} steps, {res.refine_count} refinements)")
    print(f"best epoch {res.tracker.best_epoch}: robust_val_acc {res.tracker.best_value:.4f}; "
          f"final {last['robust_val_acc']:.4f} (diff {res.tracker.diff:+.4f})")
    print(f"outputs in {out}")


def cmd_eval(args):
    cfg = parse_config(args.config)
    report = eval_suite(args.checkpoint, cfg, args.out, seed=args.seed)
    print(format_report(report))


def cmd_landscape(args):
    cfg = parse_config(args.config)
    model = _load_model(args.checkpoint, cfg)
    splits = load_splits(cfg)
    check_compatible(cfg, splits)
    x = splits.test.images[:args.samples]
    y = splits.test.labels[:args.samples]
    if args.mode == "input":
        mat = input_landscape(model, x, y, args.radius, args.grid_n, args.seed)
    else:
        mat = weight_landscape(model, (x, y), args.radius, args.grid_n, args.seed, cfg.attack.val)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", f"landscape_{args.mode}.csv")
    write_landscape_csv(out, mat, args.radius, args.seed, args.mode)
    print(f"{args.mode} landscape {mat.shape[0]}x{mat.shape[1]}: center {mat[args.grid_n // 2, args.grid_n // 2]:.5f},"
          f" min {mat.min():.5f}, max {mat.max():.5f} -> {out}")


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return {"true": True, "false": False}.get(text.lower(), text)


def cmd_sweep(args):
    base = parse_config(args.config)
    root = args.out or os.path.join(base.output_dir, "sweep")
    rows = []
    for text in args.values:
        raw = copy.deepcopy(config_to_dict(base))
        value = _parse_value(text)
        cfg = config_from_dict(set_dotted(raw, args.param, value))
        res = run_training(cfg, os.path.join(root, f"{args.param}={text}"))
        last = res.metrics[-1]
        rows.append((args.param, text, last["robust_val_acc"], last["robust_test_acc"],
                     last["clean_test_acc"], res.tracker.best_value, res.refine_count))
        print(f"{args.param}={text}: robust_val {last['robust_val_acc']:.4f} "
              f"robust_test {last['robust_test_acc']} refinements {res.refine_count}")
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value", "final_robust_val_acc", "final_robust_test_acc",
                    "final_clean_test_acc", "best_robust_val_acc", "refinements"])
        w.writerows(rows)


def build_parser():
    p = argparse.ArgumentParser(prog="wotlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run adversarial training from a TOML config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default: config output_dir)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="clean + robust accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    ls = sub.add_parser("landscape", help="loss landscape around a checkpoint")
    ls.add_argument("checkpoint")
    ls.add_argument("config")
    ls.add_argument("--mode", choices=("input", "weight"), required=True)
    ls.add_argument("--radius", type=float, default=None)
    ls.add_argument("--grid-n", type=int, default=21)
    ls.add_argument("--samples", type=int, default=128)
    ls.add_argument("--seed", type=int, default=0)
    ls.add_argument("--out")
    ls.set_defaults(fn=cmd_landscape)

    s = sub.add_parser("sweep", help="train once per value of a dotted config key")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="dotted key, e.g. wot.m")
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "radius", 0) is None:
        args.radius = 0.1 if args.mode == "input" else 1.0
    np.seterr(over="ignore", under="ignore")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    return 0


if __name__ == "__main__":
    sys.exit(main())
