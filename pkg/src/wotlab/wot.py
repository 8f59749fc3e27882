"""Weighted optimization trajectories.

Every ``m`` optimizer steps the weight change since the previous snapshot is
cached; after ``k`` such deltas the window is re-weighted: per (delta, block)
coefficients in [0, 1] are fitted by projected momentum SGD on adversarial
examples from a holdout set, and the weights snap to
``anchor + sum_i alpha_i * delta_i``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attacks import pgd
from .errors import ConfigError, ContractError
from .tensor import GradTape, ParamTensors, ParamVector, Tensor, add, backward, index, mul, softmax_cross_entropy

TRACE_HEADER = ("round", "step", "block", "gap_index", "alpha", "grad_norm")


class TrajectoryBuffer:
    """Anchor weights plus up to ``k`` deltas collected every ``m`` steps."""

    def __init__(self, k, m, size):
        if k < 1 or m < 1:
            raise ConfigError(f"trajectory buffer needs k >= 1 and m >= 1, got k={k}, m={m}")
        self.k, self.m = k, m
        self.deltas = np.zeros((k, size), dtype=np.float32)
        self.count = 0
        self.anchor = None
        self._last = None

    def __len__(self):
        return self.count

    @property
    def full(self):
        return self.count == self.k

    def clear(self, weights=None):
        """Drop all deltas; ``weights`` (if given) becomes the new anchor."""
        self.count = 0
        self.deltas[:] = 0
        if weights is None:
            self.anchor = self._last = None
        else:
            self.anchor = weights.copy()
            self._last = weights.copy()

    def record(self, current):
        """Append ``current - last snapshot``; the first call after a bare clear only sets the anchor."""
        if self.count >= self.k:
            raise ContractError("trajectory buffer is full; refine before recording again")
        if self.anchor is None:
            self.anchor = current.copy()
            self._last = current.copy()
            return self
        if not current.same_layout(self.anchor):
            raise ContractError("recorded weights do not match the buffer layout")
        np.subtract(current.values, self._last.values, out=self.deltas[self.count])
        self.count += 1
        self._last = current.copy()
        return self

    def delta(self, i):
        return ParamVector(self.deltas[i].copy(), self.anchor.layout)

    def last(self):
        return self._last.copy()


@dataclass
class AlphaState:
    k: int
    blocks: int
    lr: float = 0.01
    gamma: float = 0.9
    n_steps: int = 10
    alpha: np.ndarray = field(default=None)
    momentum: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.alpha is None:
            self.reset()

    def reset(self):
        self.alpha = np.zeros((self.k, self.blocks), dtype=np.float64)
        self.momentum = np.zeros((self.k, self.blocks), dtype=np.float64)


def alpha_step(state, grad):
    """Momentum ``m <- gamma*m + g``, then ``alpha <- clip(alpha - lr*m, 0, 1)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.alpha.shape:
        raise ContractError(f"alpha gradient shape {grad.shape} != {state.alpha.shape}")
    state.momentum = state.momentum * state.gamma + grad
    state.alpha = np.clip(state.alpha - state.lr * state.momentum, 0.0, 1.0)
    return state


def _check(buffer, alpha, partition):
    if buffer.anchor is None:
        raise ContractError("trajectory buffer has no anchor")
    partition.check(buffer.anchor.layout)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (buffer.k, partition.block_count):
        raise ContractError(f"alpha shape {alpha.shape} != ({buffer.k}, {partition.block_count})")
    return alpha


def compose_delta(buffer, alpha, partition):
    """Per-block recombination ``sum_i alpha[i, block(q)] * delta_i[q]``."""
    alpha = _check(buffer, alpha, partition)
    if not buffer.full:
        raise ContractError(f"compose_delta needs a full buffer ({buffer.count}/{buffer.k})")
    out = kernels.block_combine(buffer.deltas, alpha, partition.starts, partition.stops, partition.block_ids)
    return ParamVector(out.astype(np.float32), buffer.anchor.layout)


def recomposed_weights(buffer, alpha, partition):
    return ParamVector(buffer.anchor.values + compose_delta(buffer, alpha, partition).values,
                       buffer.anchor.layout)


def holdout_loss(model, weights, x, y):
    return softmax_cross_entropy(model.forward(x, weights), y)


def alpha_gradient(model, buffer, alpha, partition, holdout_adv_batch, method="inner"):
    """``dL/dalpha[i, j] = <grad_w L(w~) restricted to block j, delta_i>``.

    ``method="inner"`` takes the weight gradient once and projects it onto the
    deltas; ``method="chain"`` records the recombination itself on the tape and
    differentiates w.r.t. alpha directly.
    """
    alpha = _check(buffer, alpha, partition)
    x, y = holdout_adv_batch
    if method == "inner":
        w = recomposed_weights(buffer, alpha, partition).tensors(requires_grad=True)
        with GradTape():
            loss = holdout_loss(model, w, x, y)
        g = backward(loss, w)
        return kernels.block_inner(g.values, buffer.deltas, partition.starts, partition.stops,
                                   partition.block_ids, partition.block_count)
    if method != "chain":
        raise ConfigError(f"unknown alpha gradient method {method!r}")
    a = Tensor(alpha, requires_grad=True)
    layout = buffer.anchor.layout
    with GradTape():
        params = {}
        for e, (s, stop, b) in zip(layout, partition.segments):
            t = Tensor(buffer.anchor.values[s:stop].reshape(e.shape))
            for i in range(buffer.k):
                t = add(t, mul(index(a, (i, b)), buffer.deltas[i, s:stop].reshape(e.shape)))
            params[e.name] = t
        loss = holdout_loss(model, ParamTensors(layout, params), x, y)
    return backward(loss, a).data.astype(np.float64)


class AlphaTrace:
    """Accumulates per-step alpha rows; writes the trace CSV."""

    def __init__(self):
        self.rows = []

    def add(self, rnd, step, alpha, grad):
        gn = float(np.linalg.norm(grad))
        for i in range(alpha.shape[0]):
            for j in range(alpha.shape[1]):
                self.rows.append((rnd, step, j, i, float(alpha[i, j]), gn))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], r[3], repr(r[4]), repr(r[5])])


def _holdout_batches(n, batch_size, steps, rng):
    perm = rng.permutation(n)
    bs = min(batch_size, n)
    for i in range(steps):
        yield perm[np.arange(i * bs, (i + 1) * bs) % n]


def refine(model, buffer, state, holdout, attack_cfg, partition, rng, batch_size=128,
           regenerate_per_step=True, trace=None, round_index=0):
    """One refinement round; writes the refined weights into ``model`` and clears ``buffer``.

    Returns ``(refined ParamVector, final alpha)``.
    """
    if holdout is None or len(holdout) == 0:
        raise ConfigError("WOT refinement needs a non-empty holdout set")
    if not buffer.full:
        raise ContractError(f"refine needs a full trajectory buffer ({buffer.count}/{buffer.k})")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(int(rng)))
    state.reset()
    fixed_adv = None
    if not regenerate_per_step and state.n_steps > 0:
        w0 = recomposed_weights(buffer, state.alpha, partition)
        fixed_adv = pgd(model, holdout.images, holdout.labels, attack_cfg, rng, w0)
    for step, idx in enumerate(_holdout_batches(len(holdout), batch_size, state.n_steps, rng)):
        w = recomposed_weights(buffer, state.alpha, partition)
        y = holdout.labels[idx]
        if fixed_adv is None:
            x_adv = pgd(model, holdout.images[idx], y, attack_cfg, rng, w)
        else:
            x_adv = fixed_adv[idx]
        grad = alpha_gradient(model, buffer, state.alpha, partition, (x_adv, y))
        alpha_step(state, grad)
        if trace is not None:
            trace.add(round_index, step, state.alpha, grad)
    refined = recomposed_weights(buffer, state.alpha, partition)
    model.params = refined
    buffer.clear(refined)
    return refined, state.alpha.copy()
