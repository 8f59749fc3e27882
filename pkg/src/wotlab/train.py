"""Adversarial training loop with in-time trajectory refinement, plus evaluation."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .attacks import attack, clean_accuracy, pgd, robust_accuracy
from .baselines import AveragerState, BestTracker, ema_update, swa_update, track_best
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_to_dict
from .data import Dataset, SplitSpec, holdout_split, load_cifar_binary, load_idx, synth_blobs
from .errors import CheckpointError, ConfigError, DataFormatError
from .losses import at_loss, mart_loss, trades_loss
from .models import block_partition, build_model, make_layout
from .tensor import GradTape, ParamVector, backward
from .wot import AlphaState, AlphaTrace, TrajectoryBuffer, refine

log = logging.getLogger(__name__)

METRICS_SCHEMA = "# schema=wotlab.metrics/1"
METRICS_HEADER = ("epoch", "step", "clean_train_acc", "clean_test_acc", "robust_val_acc",
                  "robust_test_acc", "train_loss", "mean_alpha", "lr")


@dataclass
class Splits:
    train: Dataset
    holdout: Dataset
    val: Dataset
    test: Dataset


def _take(ds, n, rng, name):
    if n <= 0 or n >= len(ds):
        return ds, None
    perm = rng.permutation(len(ds))
    return ds.subset(np.sort(perm[:n]), name), ds.subset(np.sort(perm[n:]), ds.name)


def load_splits(cfg):
    """Train / holdout / validation / test sets described by ``cfg.data``."""
    d = cfg.data
    if d.name == "synth":
        train_pool = synth_blobs(d.split_seed, d.n_per_class, d.classes, tuple(d.dim), d.spread)
        test_pool = synth_blobs(d.split_seed + 7919, d.n_per_class, d.classes, tuple(d.dim), d.spread)
    elif d.name == "idx":
        train_pool = load_idx(d.train_images, d.train_labels, d.classes, "idx-train")
        test_pool = load_idx(d.test_images, d.test_labels, d.classes, "idx-test")
    else:
        train_pool = load_cifar_binary(d.train_files, "cifar10-train")
        test_pool = load_cifar_binary(d.test_files, "cifar10-test")
    rng = np.random.Generator(np.random.Philox(key=int(d.split_seed) + 1))
    unseen = d.holdout_source == "unseen"
    want = d.train_size + (d.holdout_size if unseen else 0) if d.train_size > 0 else 0
    if want > len(train_pool):
        raise DataFormatError(f"train pool has {len(train_pool)} samples, config needs {want}")
    pool, _ = _take(train_pool, want, rng, train_pool.name)
    if d.holdout_size > 0:
        train, holdout = holdout_split(pool, SplitSpec(d.holdout_size, d.split_seed, d.holdout_source))
    else:
        train, holdout = pool, None
    if d.val_size + d.test_size > len(test_pool):
        raise DataFormatError(f"test pool has {len(test_pool)} samples, config needs "
                              f"val_size + test_size = {d.val_size + d.test_size}")
    val, rest = _take(test_pool, d.val_size, rng, "val")
    test, _ = _take(rest if rest is not None else test_pool, d.test_size, rng, "test")
    return Splits(train, holdout, val, test)


def check_compatible(cfg, splits):
    spec = cfg.model
    shape = splits.train.shape
    if int(np.prod(shape)) != int(np.prod(spec.input_shape)):
        raise ConfigError(f"model input_shape {spec.input_shape} does not fit data shape {shape}")
    if spec.kind == "cnn" and tuple(shape) != spec.input_shape:
        raise ConfigError(f"cnn input_shape {spec.input_shape} != data shape {shape}")
    if splits.train.classes != spec.classes:
        raise ConfigError(f"model has {spec.classes} classes, data has {splits.train.classes}")


def lr_at(cfg, epoch):
    lr = cfg.optim.lr
    for frac in cfg.optim.milestones:
        if epoch >= round(frac * cfg.epochs):
            lr *= cfg.optim.decay
    return lr


def _start_step(value, cfg, steps_per_epoch):
    epoch = cfg.first_decay_epoch() if value < 0 else value
    return int(round(epoch * steps_per_epoch))


def training_loss(cfg, model, x, x_adv, y, weights):
    kind = cfg.loss.kind
    if kind == "at":
        return at_loss(model, x_adv, y, weights)
    if kind == "trades":
        return trades_loss(model, x, x_adv, y, cfg.loss.beta, weights)
    return mart_loss(model, x, x_adv, y, cfg.loss.lam, weights)


@dataclass
class TrainResult:
    final: ParamVector
    best: ParamVector
    metrics: list
    tracker: BestTracker
    refine_count: int = 0
    nan_losses: int = 0
    alpha_history: list = field(default_factory=list)
    refine_steps: list = field(default_factory=list)
    trace: AlphaTrace | None = None
    paths: dict = field(default_factory=dict)
    total_steps: int = 0
    wot_start_step: int | None = None


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRICS_HEADER])


def read_metrics(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def run_training(cfg, out_dir=None, splits=None, partition=None, on_refine=None, write=True):
    """Train per ``cfg``; returns a :class:`TrainResult` and (if ``write``) writes
    ``final.wotc``, ``best.wotc``, ``metrics.csv`` and ``alpha_trace.csv``.

    ``partition`` overrides the WOT block partition; ``on_refine(step, buffer,
    partition, model)`` is called right before every refinement round.
    """
    cfg.validate()
    out_dir = out_dir or cfg.output_dir
    splits = splits or load_splits(cfg)
    check_compatible(cfg, splits)
    train = splits.train
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    shuffle_rng, attack_rng, wot_rng, eval_seed = (np.random.Generator(np.random.Philox(s)) for s in seeds)
    eval_seed = int(eval_seed.integers(2 ** 31))

    model = build_model(cfg.model, cfg.seed)
    n = len(train)
    spe = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * spe
    wc = cfg.wot
    p_steps = None
    if wc.enabled:
        p_steps = _start_step(wc.start_epoch, cfg, spe)
        if splits.holdout is None or len(splits.holdout) == 0:
            raise ConfigError("wot.enabled needs data.holdout_size > 0")
        if wc.m * wc.k > total - p_steps:
            raise ConfigError(f"wot.m * wot.k = {wc.m * wc.k} exceeds the {total - p_steps} "
                              "training steps after the WOT start; no refinement would run")
        partition = partition or block_partition(model, "wot_" + wc.mode)
        partition.check(model.layout)
        buffer = TrajectoryBuffer(wc.k, wc.m, len(model.params))
        state = AlphaState(wc.k, partition.block_count, wc.alpha_lr, wc.alpha_gamma, wc.alpha_steps)
        trace = AlphaTrace()
    else:
        trace = None
    swa_start = cfg.first_decay_epoch() if cfg.swa_start_epoch < 0 else cfg.swa_start_epoch
    avg = AveragerState(decay=cfg.ema_decay) if cfg.baseline != "none" else None

    objective = "kl" if cfg.loss.kind == "trades" else "ce"
    velocity = np.zeros_like(model.params.values)
    tracker = BestTracker()
    result = TrainResult(final=None, best=None, metrics=[], tracker=tracker, trace=trace,
                         total_steps=total, wot_start_step=p_steps)
    train_probe = train.subset(np.arange(min(cfg.metrics.train_acc_size, n)))
    t = 0
    round_alpha = None
    if wc.enabled and p_steps == 0:
        buffer.clear(model.params)

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        perm = shuffle_rng.permutation(n)
        losses = []
        round_alpha = None
        for b in range(spe):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x, y = train.images[idx], train.labels[idx]
            if objective == "kl":
                x_adv = pgd(model, x, y, cfg.attack.train, attack_rng, objective="kl")
            else:
                x_adv = attack(model, x, y, cfg.attack.train, attack_rng)
            w = model.params.tensors(requires_grad=True)
            with GradTape():
                loss = training_loss(cfg, model, x, x_adv, y, w)
            g = backward(loss, w).values
            lv = loss.item()
            if not math.isfinite(lv):
                result.nan_losses += 1
            losses.append(lv)
            values = model.params.values
            g = g + np.float32(cfg.optim.weight_decay) * values
            velocity = np.float32(cfg.optim.momentum) * velocity + g
            model.params = ParamVector(values - np.float32(lr) * velocity, model.layout)
            t += 1
            if avg is not None and cfg.baseline == "ema":
                ema_update(avg, model.params)

            if not wc.enabled:
                continue
            if t == p_steps:
                buffer.clear(model.params)
            elif t > p_steps:
                if (t - p_steps) % wc.m == 0:
                    buffer.record(model.params)
                if (t - p_steps) % (wc.m * wc.k) == 0:
                    if on_refine is not None:
                        on_refine(t, buffer, partition, model)
                    _, alpha = refine(model, buffer, state, splits.holdout, wc.attack, partition, wot_rng,
                                      wc.batch_size, wc.regenerate_per_step, trace, result.refine_count)
                    result.refine_count += 1
                    result.alpha_history.append(alpha)
                    result.refine_steps.append(t)
                    round_alpha = alpha
                    if wc.reset_momentum_on_refine:
                        velocity[:] = 0

        if avg is not None and cfg.baseline == "swa" and epoch + 1 > swa_start:
            swa_update(avg, model.params)
        weights = avg.average if avg is not None and avg.average is not None else model.params
        row = evaluate_epoch(cfg, model, weights, splits, train_probe, eval_seed)
        row.update(epoch=epoch + 1, step=t, lr=lr,
                   train_loss=float(np.mean(losses)) if losses else float("nan"),
                   mean_alpha=float(round_alpha.mean()) if round_alpha is not None else None)
        result.metrics.append(row)
        track_best(tracker, epoch + 1, row["robust_val_acc"], weights.copy())
        log.info("epoch %d: loss %.4f val-robust %.4f test-clean %.4f", epoch + 1,
                 row["train_loss"], row["robust_val_acc"], row["clean_test_acc"])

    result.final = (avg.average if avg is not None and avg.average is not None else model.params).copy()
    result.best = tracker.best_ref
    if write:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"model": config_to_dict(cfg.model), "seed": cfg.seed, "config": config_to_dict(cfg)}
        result.paths["final"] = save_checkpoint(os.path.join(out_dir, "final.wotc"), result.final,
                                                dict(meta, epoch=cfg.epochs, kind="final"))
        result.paths["best"] = save_checkpoint(os.path.join(out_dir, "best.wotc"), result.best,
                                               dict(meta, epoch=tracker.best_epoch, kind="best"))
        result.paths["metrics"] = os.path.join(out_dir, "metrics.csv")
        write_metrics(result.paths["metrics"], result.metrics)
        if trace is not None:
            result.paths["alpha_trace"] = os.path.join(out_dir, "alpha_trace.csv")
            trace.write(result.paths["alpha_trace"])
    return result


def evaluate_epoch(cfg, model, weights, splits, train_probe, seed):
    row = {
        "clean_train_acc": clean_accuracy(model, train_probe, weights),
        "clean_test_acc": clean_accuracy(model, splits.test, weights),
        "robust_val_acc": robust_accuracy(model, splits.val, cfg.attack.val, seed, weights=weights),
        "robust_test_acc": None,
    }
    if cfg.metrics.test_attack and cfg.attack.eval:
        row["robust_test_acc"] = robust_accuracy(model, splits.test, cfg.attack.eval[0], seed, weights=weights)
    return row


def eval_suite(checkpoint_path, cfg, out_dir=None, splits=None, seed=0):
    """Clean accuracy plus robust accuracy per configured eval attack, on the test split."""
    params, meta = load_checkpoint(checkpoint_path)
    if params.layout != make_layout(cfg.model):
        raise CheckpointError(f"{checkpoint_path}: layout does not match the configured model")
    splits = splits or load_splits(cfg)
    check_compatible(cfg, splits)
    model = build_model(cfg.model, cfg.seed).with_params(params)
    rows = [("clean", clean_accuracy(model, splits.test))]
    for a in cfg.attack.eval:
        rows.append((a.label(), robust_accuracy(model, splits.test, a, seed)))
    report = {"checkpoint": str(checkpoint_path), "epoch": meta.get("epoch"), "rows": rows}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "eval.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["attack", "accuracy"])
            for name, acc in rows:
                w.writerow([name, repr(acc)])
    return report


def format_report(report):
    width = max(len(name) for name, _ in report["rows"])
    lines = [f"checkpoint: {report['checkpoint']} (epoch {report['epoch']})"]
    lines += [f"  {name:<{width}}  {100 * acc:6.2f}%" for name, acc in report["rows"]]
    return "\n".join(lines)
