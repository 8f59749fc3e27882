"""Dense float32 tensors with reverse-mode differentiation on a recorded tape.

Operations record a node on the innermost active :class:`GradTape` whenever at
least one input requires a gradient. A tape is consumed by one backward pass,
which visits the recorded nodes in exact reverse order.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with GradTape():
    ...     loss = tsum(w * w)
    >>> backward(loss, w).data
    array([2., 4.], dtype=float32)
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, TapeStateError

__all__ = [
    "Tensor", "GradTape", "ParamVector", "ParamTensors", "LayoutEntry",
    "backward", "matmul", "conv2d", "relu", "reshape", "tsum", "mean",
    "log_softmax", "softmax", "softmax_cross_entropy", "kl_divergence",
    "log", "pick", "max_excluding", "add", "mul", "sub",
]

_TAPES: list["GradTape"] = []


class Tensor:
    """Immutable float32 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Records operations executed while the tape is active (``with GradTape():``)."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def gradient(self, root, sources):
        """Gradients of scalar ``root`` w.r.t. each tensor in ``sources``; consumes the tape."""
        if self.consumed:
            raise TapeStateError("tape already consumed by a backward pass")
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise ContractError("root was not recorded on this tape")
        self.consumed = True
        grads = {id(root): np.ones_like(root.data)}
        for out, inputs, needs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, need, gi in zip(inputs, needs, fn(g, needs)):
                if not need or gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        self.nodes = []
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros_like(s.data) if g is None else g.astype(np.float32, copy=False))
        return out


def _record(data, inputs, fn):
    out = Tensor(data)
    if not _TAPES:
        return out
    needs = tuple(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    if any(needs):
        tape = _TAPES[-1]
        out.requires_grad = True
        out.tape = tape
        tape.nodes.append((out, inputs, needs, fn))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return _record(a.data + b.data, (a, b), fn)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return _record(a.data - b.data, (a, b), fn)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def fn(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _record(a.data * b.data, (a, b), fn)


def relu(x):
    mask = x.data > 0

    def fn(g, needs):
        return (g * mask,)

    return _record(np.where(mask, x.data, np.float32(0)), (x,), fn)


def log(x, floor=1e-12):
    """Natural log with the argument clamped below at ``floor``."""
    safe = np.maximum(x.data, np.float32(floor))

    def fn(g, needs):
        return (np.where(x.data >= floor, g / safe, 0).astype(np.float32),)

    return _record(np.log(safe), (x,), fn)


def reshape(x, shape):
    old = x.shape

    def fn(g, needs):
        return (g.reshape(old),)

    return _record(x.data.reshape(shape), (x,), fn)


def index(x, idx):
    shape = x.shape

    def fn(g, needs):
        out = np.zeros(shape, dtype=np.float32)
        np.add.at(out, idx, g)
        return (out,)

    return _record(np.array(x.data[idx]), (x,), fn)


# reductions (accumulated in float64) --------------------------------------------

def tsum(x):
    shape = x.shape

    def fn(g, needs):
        return (np.full(shape, g, dtype=np.float32),)

    return _record(np.float32(x.data.sum(dtype=np.float64)), (x,), fn)


def mean(x):
    shape, n = x.shape, x.data.size

    def fn(g, needs):
        return (np.full(shape, g / n, dtype=np.float32),)

    return _record(np.float32(x.data.mean(dtype=np.float64)), (x,), fn)


# linear algebra ------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g, needs):
        return (g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None)

    return _record(a.data @ b.data, (a, b), fn)


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """Cross-correlation of ``x`` (C,H,W or N,C,H,W) with ``kernel`` (Cout,Cin,kH,kW)."""
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D kernel and 3/4-D input, got {x.shape}, {kernel.shape}")
    n, c, h, w = xd.shape
    cout, cin, kh, kw = kernel.shape
    if cin != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kernel.shape} larger than padded input {(hp, wp)}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise DimensionError(
            f"non-integral conv2d output: input {x.shape}, kernel {kernel.shape}, "
            f"stride {stride}, padding {padding}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    xp = np.ascontiguousarray(xp, dtype=np.float32)
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(cout, -1)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    if single:
        out = out[0]

    def fn(g, needs):
        g4 = g[None] if single else g
        gm = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gx = gk = gb = None
        if needs[0]:
            dcols = np.ascontiguousarray(gm @ kmat)
            dxp = kernels.col2im(dcols, n, c, hp, wp, kh, kw, stride, ho, wo)
            gx = dxp[:, :, padding:padding + h, padding:padding + w]
            gx = gx[0] if single else gx
        if needs[1]:
            gk = (gm.T @ cols).reshape(kernel.shape)
        if len(needs) > 2 and needs[2]:
            gb = gm.sum(axis=0, dtype=np.float64).astype(np.float32)
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, inputs, fn)


# softmax family ------------------------------------------------------------------

def _log_softmax(z):
    z64 = z.astype(np.float64)
    shifted = z64 - z64.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(x):
    ls = _log_softmax(x.data)
    p = np.exp(ls)

    def fn(g, needs):
        g64 = g.astype(np.float64)
        return ((g64 - p * g64.sum(axis=1, keepdims=True)).astype(np.float32),)

    return _record(ls.astype(np.float32), (x,), fn)


def softmax(x):
    p = np.exp(_log_softmax(x.data))

    def fn(g, needs):
        g64 = g.astype(np.float64)
        return ((p * (g64 - (g64 * p).sum(axis=1, keepdims=True))).astype(np.float32),)

    return _record(p.astype(np.float32), (x,), fn)


def _check_labels(labels, n, c):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c}): {labels.min()}..{labels.max()}")
    return labels


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Batch-mean (or per-sample) ``-log softmax(logits)[label]``."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    ls = _log_softmax(logits.data)
    rows = np.arange(n)
    per = -ls[rows, labels]
    if reduction == "none":
        out = per.astype(np.float32)
    else:
        out = np.float32(per.mean())

    def fn(g, needs):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        if reduction == "none":
            d *= g.astype(np.float64)[:, None]
        else:
            d *= float(g) / n
        return (d.astype(np.float32),)

    return _record(out, (logits,), fn)


def kl_divergence(p_logits, q_logits, reduction="mean"):
    """Batch-mean of KL(softmax(p) || softmax(q)), computed from log-probabilities."""
    if p_logits.shape != q_logits.shape or p_logits.data.ndim != 2:
        raise DimensionError(f"kl_divergence shape mismatch: {p_logits.shape} vs {q_logits.shape}")
    n = p_logits.shape[0]
    lp, lq = _log_softmax(p_logits.data), _log_softmax(q_logits.data)
    p, q = np.exp(lp), np.exp(lq)
    per = np.maximum((p * (lp - lq)).sum(axis=1), 0.0)  # rounding can dip below 0
    out = per.astype(np.float32) if reduction == "none" else np.float32(per.mean())

    def fn(g, needs):
        w = g.astype(np.float64)[:, None] if reduction == "none" else float(g) / n
        gp = gq = None
        if needs[0]:
            r = lp - lq
            gp = (w * p * (r - (p * r).sum(axis=1, keepdims=True))).astype(np.float32)
        if needs[1]:
            gq = (w * (q - p)).astype(np.float32)
        return gp, gq

    return _record(out, (p_logits, q_logits), fn)


def pick(x, labels):
    """Row-wise ``x[i, labels[i]]`` as a length-N tensor."""
    n, c = x.shape
    labels = _check_labels(labels, n, c)
    rows = np.arange(n)

    def fn(g, needs):
        out = np.zeros(x.shape, dtype=np.float32)
        out[rows, labels] = g
        return (out,)

    return _record(x.data[rows, labels], (x,), fn)


def max_excluding(x, labels):
    """Row-wise maximum over all columns except ``labels[i]``."""
    n, c = x.shape
    labels = _check_labels(labels, n, c)
    rows = np.arange(n)
    masked = x.data.copy()
    masked[rows, labels] = -np.inf
    arg = masked.argmax(axis=1)

    def fn(g, needs):
        out = np.zeros(x.shape, dtype=np.float32)
        out[rows, arg] = g
        return (out,)

    return _record(masked[rows, arg], (x,), fn)


# parameters ----------------------------------------------------------------------

@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    length: int
    shape: tuple


class ParamTensors(dict):
    """``name -> Tensor`` mapping that remembers the layout it was cut from."""

    def __init__(self, layout, items):
        super().__init__(items)
        self.layout = layout


class ParamVector:
    """Flat float32 view of every trainable tensor, in definition order."""

    def __init__(self, values, layout):
        self.values = np.ascontiguousarray(values, dtype=np.float32)
        self.layout = tuple(layout)
        end = 0
        for e in self.layout:
            if e.offset != end or e.length != int(np.prod(e.shape, dtype=np.int64)):
                raise ContractError(f"layout entry {e.name} is not contiguous with its predecessor")
            end += e.length
        if end != self.values.size:
            raise ContractError(f"layout covers {end} values but vector holds {self.values.size}")

    @classmethod
    def zeros(cls, layout):
        layout = tuple(layout)
        size = layout[-1].offset + layout[-1].length if layout else 0
        return cls(np.zeros(size, dtype=np.float32), layout)

    def __len__(self):
        return self.values.size

    def copy(self):
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values):
        return ParamVector(values, self.layout)

    def view(self, name):
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset:e.offset + e.length].reshape(e.shape)
        raise KeyError(name)

    def tensors(self, requires_grad=False):
        return ParamTensors(self.layout, (
            (e.name, Tensor(self.values[e.offset:e.offset + e.length].reshape(e.shape), requires_grad))
            for e in self.layout))

    def same_layout(self, other):
        return self.layout == other.layout

    def checksum(self):
        return hashlib.sha256(self.values.tobytes()).hexdigest()

    def __eq__(self, other):
        return (isinstance(other, ParamVector) and self.same_layout(other)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"ParamVector(n={self.values.size}, tensors={len(self.layout)})"


def backward(loss, wrt):
    """Differentiate scalar ``loss`` w.r.t. ``wrt`` using the tape that recorded it.

    ``wrt`` may be a single Tensor (returns a Tensor), a sequence of Tensors
    (returns a list), or :class:`ParamTensors` (returns a gradient ParamVector).
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        if isinstance(loss, Tensor) and loss.data.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {loss.shape}")
        raise ContractError("loss was not recorded on an active tape")
    tape = loss.tape
    if isinstance(wrt, ParamTensors):
        grads = tape.gradient(loss, [wrt[e.name] for e in wrt.layout])
        flat = np.concatenate([g.reshape(-1) for g in grads]) if grads else np.zeros(0, np.float32)
        return ParamVector(flat, wrt.layout)
    if isinstance(wrt, Tensor):
        return Tensor(tape.gradient(loss, [wrt])[0])
    return [Tensor(g) for g in tape.gradient(loss, list(wrt))]
