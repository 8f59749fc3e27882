"""Robust-overfitting comparison: plain AT against AT+WOT-B, several seeds each.

The scaled setting is 5000 training images, a 500-image unseen holdout, the
small CNN, 40 epochs of PGD-10 (eps 8/255) adversarial training and learning
rate decays at 50% and 75% of training. For each run the gap between the
final and the best epoch's validation robust accuracy is reported; WOT runs
also report how the per-round mean alpha evolves.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import config_from_dict, config_to_dict
from .errors import DataFormatError
from .models import default_cnn_spec

CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]
IDX_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def find_dataset(env=os.environ):
    """Data block for the first dataset found via ``WOTLAB_CIFAR_DIR`` or ``WOTLAB_FASHION_DIR``.

    Returns ``(data_table, input_shape)`` or ``None`` when neither is set to a
    directory holding the expected files.
    """
    cifar = env.get("WOTLAB_CIFAR_DIR")
    if cifar and all((Path(cifar) / f).is_file() for f in CIFAR_TRAIN + CIFAR_TEST):
        return ({"name": "cifar10", "train_files": [str(Path(cifar) / f) for f in CIFAR_TRAIN],
                 "test_files": [str(Path(cifar) / f) for f in CIFAR_TEST]}, (3, 32, 32))
    fashion = env.get("WOTLAB_FASHION_DIR")
    if fashion and all((Path(fashion) / f).is_file() for f in IDX_FILES):
        tr_i, tr_l, te_i, te_l = (str(Path(fashion) / f) for f in IDX_FILES)
        return ({"name": "idx", "train_images": tr_i, "train_labels": tr_l,
                 "test_images": te_i, "test_labels": te_l}, (1, 28, 28))
    return None


def experiment_config(data, input_shape, seed, wot, epochs=40, m=20, k=4, **overrides):
    """TrainConfig dict for one run. ``m = 20`` is about half an epoch at 39 steps per epoch."""
    spec = default_cnn_spec(tuple(input_shape), 10)
    raw = {
        "seed": seed, "epochs": epochs, "batch_size": 128,
        "data": dict({"classes": 10, "train_size": 5000, "holdout_size": 500, "val_size": 500,
                      "test_size": 1000, "split_seed": 0}, **data),
        "model": config_to_dict(spec),
        "attack": {"train": {"epsilon": 8 / 255, "steps": 10}, "val": {"epsilon": 8 / 255, "steps": 10},
                   "eval": [{"epsilon": 8 / 255, "steps": 20}]},
        "wot": {"enabled": wot, "mode": "b", "m": m, "k": k},
        "metrics": {"test_attack": False, "train_acc_size": 500},
    }
    for key, val in overrides.items():
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return raw


def _run(raw_and_out):
    from .train import run_training
    raw, out = raw_and_out
    cfg = config_from_dict(raw)
    res = run_training(cfg, out, write=out is not None)
    return {
        "seed": cfg.seed,
        "wot": cfg.wot.enabled,
        "best": res.tracker.best_value,
        "best_epoch": res.tracker.best_epoch,
        "final": res.tracker.final_value,
        "diff": res.tracker.diff,
        "val_curve": [r["robust_val_acc"] for r in res.metrics],
        "refine_steps": list(res.refine_steps),
        "round_alpha": [float(a.mean()) for a in res.alpha_history],
        "total_steps": res.total_steps,
        "wot_start": res.wot_start_step,
        "nan_losses": res.nan_losses,
    }


def alpha_trend(run):
    """Mean per-round alpha in the first quarter of the WOT-active span and in the last quarter of training."""
    p, total = run["wot_start"], run["total_steps"]
    steps, alphas = np.asarray(run["refine_steps"]), np.asarray(run["round_alpha"])
    first = alphas[steps <= p + (total - p) / 4]
    last = alphas[steps > total - total / 4]
    if not len(first) or not len(last):
        return None, None
    return float(first.mean()), float(last.mean())


def run_experiment(data, input_shape, seeds=(0, 1, 2), epochs=40, workers=1, out_dir=None, **overrides):
    """Train plain AT and AT+WOT-B for each seed; return per-run records and averages (in points)."""
    jobs = []
    for wot in (False, True):
        for seed in seeds:
            raw = experiment_config(data, input_shape, seed, wot, epochs, **overrides)
            out = None if out_dir is None else os.path.join(out_dir, f"{'wot_b' if wot else 'at'}_seed{seed}")
            jobs.append((raw, out))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_run, jobs))
    else:
        runs = [_run(j) for j in jobs]
    summary = {"runs": runs}
    for name, flag in (("at", False), ("wot_b", True)):
        sel = [r for r in runs if r["wot"] == flag]
        summary[name] = {
            "diff": 100 * float(np.mean([r["diff"] for r in sel])),
            "final": 100 * float(np.mean([r["final"] for r in sel])),
            "best": 100 * float(np.mean([r["best"] for r in sel])),
        }
    trends = [alpha_trend(r) for r in runs if r["wot"]]
    summary["alpha_trend"] = trends
    return summary


def check_overfitting(summary):
    """The three directional requirements, each as ``(ok, description)``."""
    at, wot = summary["at"], summary["wot_b"]
    return [
        (at["diff"] <= -1.0, f"plain AT final-minus-best {at['diff']:+.2f} points (need <= -1.0)"),
        (wot["diff"] >= -0.5, f"AT+WOT-B final-minus-best {wot['diff']:+.2f} points (need >= -0.5)"),
        (wot["final"] - at["final"] >= 0.5,
         f"AT+WOT-B final {wot['final']:.2f} vs AT final {at['final']:.2f}: "
         f"{wot['final'] - at['final']:+.2f} points (need >= +0.5)"),
    ]


def check_alpha_trend(summary):
    trends = [t for t in summary["alpha_trend"] if t[0] is not None]
    if not trends:
        return False, "no WOT run has refinement rounds in both quarters"
    first = float(np.mean([t[0] for t in trends]))
    last = float(np.mean([t[1] for t in trends]))
    return last < first, f"mean alpha first WOT quarter {first:.4f}, final training quarter {last:.4f}"


def require_dataset():
    found = find_dataset()
    if found is None:
        raise DataFormatError("no dataset: set WOTLAB_CIFAR_DIR (CIFAR-10 binary batches) or "
                              "WOTLAB_FASHION_DIR (FashionMNIST IDX files, uncompressed)")
    return found
