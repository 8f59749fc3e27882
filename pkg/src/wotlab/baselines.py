"""Weight-averaging baselines (SWA, EMA) and best-checkpoint tracking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import ParamVector


@dataclass
class AveragerState:
    """Running average; ``acc`` holds it in float64, ``average`` is its float32 view."""
    average: ParamVector | None = None
    count: int = 0
    decay: float | None = None
    start_step: int = 0
    acc: np.ndarray | None = field(default=None, repr=False)

    def _set(self, acc, layout):
        self.acc = acc
        self.average = ParamVector(acc.astype(np.float32), layout)


def _check_layout(state, w):
    if state.average is not None and not state.average.same_layout(w):
        raise ContractError("averaged weights and new weights have different layouts")


def swa_update(state, w):
    """Running arithmetic mean: ``avg += (w - avg) / (count + 1)``."""
    _check_layout(state, w)
    new = w.values.astype(np.float64)
    if state.acc is None or state.count == 0:
        state._set(new, w.layout)
        state.count = 1
        return state
    state._set(state.acc + (new - state.acc) / (state.count + 1), w.layout)
    state.count += 1
    return state


def ema_update(state, w, decay=None):
    """``avg <- decay * avg + (1 - decay) * w``; the first update copies ``w``."""
    decay = state.decay if decay is None else decay
    if decay is None or not 0 <= decay < 1:
        raise ConfigError(f"EMA decay must be in [0, 1), got {decay}")
    _check_layout(state, w)
    new = w.values.astype(np.float64)
    if state.acc is None:
        state._set(new, w.layout)
    else:
        state._set(decay * state.acc + (1 - decay) * new, w.layout)
    state.count += 1
    return state


@dataclass
class BestTracker:
    best_epoch: int | None = None
    best_value: float = -np.inf
    best_ref: object = None
    final_epoch: int | None = None
    final_value: float | None = None
    history: list = field(default_factory=list)

    @property
    def diff(self):
        """Final minus best (the robust-overfitting gap)."""
        return self.final_value - self.best_value


def track_best(tracker, epoch, validation_robust_acc, checkpoint_ref=None):
    """Keep the epoch with the highest validation robust accuracy; ties keep the earlier one."""
    tracker.history.append((epoch, validation_robust_acc))
    if validation_robust_acc > tracker.best_value:
        tracker.best_epoch = epoch
        tracker.best_value = validation_robust_acc
        tracker.best_ref = checkpoint_ref
    tracker.final_epoch = epoch
    tracker.final_value = validation_robust_acc
    return tracker
