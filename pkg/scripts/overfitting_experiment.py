"""Plain AT vs AT+WOT-B robust-overfitting comparison on CIFAR-10 or FashionMNIST.

    WOTLAB_CIFAR_DIR=/data/cifar-10-batches-bin python3 scripts/overfitting_experiment.py --workers 6

Prints per-run best/final validation robust accuracy, the averaged gaps and
the mean-alpha trend, and writes summary.json (plus each run's outputs) under --out.
"""
import argparse
import json
import os
import sys

from wotlab.errors import DataFormatError
from wotlab.experiment import check_alpha_trend, check_overfitting, require_dataset, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--out", default="runs/overfitting")
    args = ap.parse_args(argv)
    try:
        data, shape = require_dataset()
    except DataFormatError as exc:
        print(exc, file=sys.stderr)
        return 3
    summary = run_experiment(data, shape, args.seeds, args.epochs, min(args.workers, 2 * len(args.seeds)),
                             args.out)
    for r in summary["runs"]:
        print(f"{'AT+WOT-B' if r['wot'] else 'AT':<8} seed {r['seed']}: best {100 * r['best']:.2f} "
              f"(epoch {r['best_epoch']}), final {100 * r['final']:.2f}, diff {100 * r['diff']:+.2f}")
    for ok, text in check_overfitting(summary) + [check_alpha_trend(summary)]:
        print(("PASS " if ok else "FAIL ") + text)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
