"""Desk-scale architectures (MLP, small CNN) over a flat parameter vector.

A :class:`Model` is a spec plus a :class:`ParamVector`; ``forward`` is a pure
function of the weights and the batch, so any ParamVector with the same layout
(trajectory anchors, recomposed weights, averages) can be evaluated directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import LayoutEntry, ParamTensors, ParamVector, Tensor, add, conv2d, matmul, relu, reshape


@dataclass
class ConvLayer:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass
class ModelSpec:
    kind: str = "mlp"
    input_shape: tuple = (784,)
    classes: int = 10
    hidden: list = field(default_factory=lambda: [256, 256])
    conv: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.hidden = [int(h) for h in self.hidden]
        self.conv = [c if isinstance(c, ConvLayer) else ConvLayer(**c) for c in self.conv]

    def validate(self):
        if self.kind not in ("mlp", "cnn"):
            raise ConfigError(f"model.kind must be 'mlp' or 'cnn', got {self.kind!r}")
        if self.classes < 2:
            raise ConfigError(f"model.classes must be >= 2, got {self.classes}")
        if any(d <= 0 for d in self.input_shape):
            raise ConfigError(f"model.input_shape has a non-positive dimension: {self.input_shape}")
        if self.kind == "mlp":
            if any(h <= 0 for h in self.hidden):
                raise ConfigError(f"zero-width layer in model.hidden: {self.hidden}")
            if len(self.hidden) < 1:
                raise ConfigError("an MLP needs at least one hidden layer (2 trainable layers)")
        else:
            if len(self.input_shape) != 3:
                raise ConfigError(f"cnn input_shape must be (C, H, W), got {self.input_shape}")
            if not self.conv:
                raise ConfigError("cnn needs at least one conv layer")
            for c in self.conv:
                if c.channels <= 0 or c.kernel <= 0:
                    raise ConfigError(f"zero-width conv layer: {c}")
                if c.stride < 1 or c.padding < 0:
                    raise ConfigError(f"invalid conv stride/padding: {c}")


def mlp_spec(widths):
    """``mlp_spec([784, 256, 256, 10])``: input width, hidden widths, class count."""
    return ModelSpec(kind="mlp", input_shape=(widths[0],), hidden=list(widths[1:-1]), classes=widths[-1])


def default_cnn_spec(input_shape=(3, 32, 32), classes=10):
    """Two conv blocks (two equal-width convs each) and a linear classifier."""
    return ModelSpec(kind="cnn", input_shape=input_shape, classes=classes, conv=[
        ConvLayer(8, 4, 2, 1), ConvLayer(8, 3, 1, 1),
        ConvLayer(16, 4, 2, 1), ConvLayer(16, 3, 1, 1),
    ])


def _conv_out(size, c):
    span = size + 2 * c.padding - c.kernel
    if span < 0 or span % c.stride:
        raise ConfigError(f"conv layer {c} does not tile an input of size {size}")
    return span // c.stride + 1


def _layers(spec):
    """Yield ``(kind, name, weight_shape, fan_in, conv_cfg)`` in definition order."""
    out = []
    if spec.kind == "mlp":
        widths = [int(np.prod(spec.input_shape))] + spec.hidden + [spec.classes]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            out.append(("linear", f"fc{i}", (a, b), a, None))
        return out
    c, h, w = spec.input_shape
    for i, cv in enumerate(spec.conv):
        out.append(("conv", f"conv{i}", (cv.channels, c, cv.kernel, cv.kernel), c * cv.kernel ** 2, cv))
        c, h, w = cv.channels, _conv_out(h, cv), _conv_out(w, cv)
    out.append(("linear", "fc", (c * h * w, spec.classes), c * h * w, None))
    return out


def make_layout(spec):
    layout, off = [], 0
    for kind, name, wshape, _, _ in _layers(spec):
        bshape = (wshape[0],) if kind == "conv" else (wshape[1],)
        for suffix, shape in (("weight", wshape), ("bias", bshape)):
            n = int(np.prod(shape))
            layout.append(LayoutEntry(f"{name}.{suffix}", off, n, tuple(shape)))
            off += n
    return tuple(layout)


class Model:
    def __init__(self, spec, params):
        self.spec = spec
        self.params = params
        self._layers = _layers(spec)

    @property
    def layout(self):
        return self.params.layout

    def forward(self, batch, weights=None):
        """Logits ``N x C`` for ``batch``.

        ``weights`` may be ``None`` (current parameters), a ParamVector with the
        model's layout, or a ParamTensors mapping (for differentiation).
        """
        if weights is None:
            weights = self.params
        if isinstance(weights, ParamVector):
            if not weights.same_layout(self.params):
                raise ContractError("weights layout does not match the model")
            weights = weights.tensors()
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        shape = tuple(x.shape[1:])
        if x.data.ndim < 2 or (shape != self.spec.input_shape
                               and shape != (int(np.prod(self.spec.input_shape)),)):
            raise DimensionError(f"batch shape {x.shape} does not match input shape {self.spec.input_shape}")
        n = x.shape[0]
        if self.spec.kind == "mlp":
            if x.data.ndim != 2:
                x = reshape(x, (n, -1))
        elif shape != self.spec.input_shape:
            x = reshape(x, (n,) + self.spec.input_shape)
        last = len(self._layers) - 1
        for i, (kind, name, _, _, cv) in enumerate(self._layers):
            w, b = weights[f"{name}.weight"], weights[f"{name}.bias"]
            if kind == "conv":
                x = conv2d(x, w, cv.stride, cv.padding, bias=b)
            else:
                if x.data.ndim != 2:
                    x = reshape(x, (n, -1))
                x = add(matmul(x, w), b)
            if i != last:
                x = relu(x)
        return x

    def predict(self, batch, weights=None, chunk=512):
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float32)
        out = [self.forward(data[i:i + chunk], weights).data.argmax(axis=1)
               for i in range(0, len(data), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def copy(self):
        return Model(self.spec, self.params.copy())

    def with_params(self, params):
        return Model(self.spec, params)


def build_model(spec, seed):
    """Fan-in-scaled uniform (He) weights and zero biases from a Philox stream."""
    spec.validate()
    layout = make_layout(spec)
    values = np.zeros(layout[-1].offset + layout[-1].length, dtype=np.float32)
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    fan_in = {name: f for _, name, _, f, _ in _layers(spec)}
    for e in layout:
        if e.name.endswith(".weight"):
            bound = np.sqrt(6.0 / fan_in[e.name.rsplit(".", 1)[0]])
            values[e.offset:e.offset + e.length] = rng.uniform(-bound, bound, e.length)
    return Model(spec, ParamVector(values, layout))


# block partitions ----------------------------------------------------------------

@dataclass(frozen=True)
class BlockPartition:
    """Total, disjoint grouping of whole named tensors into ``block_count`` blocks.

    ``segments`` holds one ``(start, stop, block)`` triple per named tensor.
    """
    block_count: int
    segments: tuple
    names: tuple

    @property
    def starts(self):
        return [s for s, _, _ in self.segments]

    @property
    def stops(self):
        return [e for _, e, _ in self.segments]

    @property
    def block_ids(self):
        return [b for _, _, b in self.segments]

    def size(self):
        return self.segments[-1][1] if self.segments else 0

    def block_of(self, q):
        for s, e, b in self.segments:
            if s <= q < e:
                return b
        raise IndexError(q)

    def assignment(self):
        out = np.empty(self.size(), dtype=np.int64)
        for s, e, b in self.segments:
            out[s:e] = b
        return out

    def check(self, layout):
        if tuple((e.offset, e.offset + e.length) for e in layout) != tuple((s, e) for s, e, _ in self.segments):
            raise ContractError("block partition does not match the parameter layout")


def partition_from_groups(layout, group_of):
    """Build a partition from a ``tensor name -> group key`` function; keys numbered by first use."""
    ids, segs = {}, []
    for e in layout:
        key = group_of(e.name)
        b = ids.setdefault(key, len(ids))
        segs.append((e.offset, e.offset + e.length, b))
    return BlockPartition(len(ids), tuple(segs), tuple(e.name for e in layout))


def block_partition(model, mode):
    """``wot_w``: one block. ``wot_b``: MLP layer pairs; CNN runs of equal-width convs; classifier alone."""
    if mode in ("w", "wot_w"):
        return partition_from_groups(model.layout, lambda name: 0)
    if mode not in ("b", "wot_b"):
        raise ConfigError(f"unknown partition mode {mode!r}")
    layers = model._layers
    group = {}
    gid, prev_width = -1, None
    for kind, name, wshape, _, _ in layers:
        if kind == "conv":
            if wshape[0] != prev_width:
                gid += 1
            prev_width = wshape[0]
        else:
            gid += 1
            prev_width = None
        group[name] = gid
    return partition_from_groups(model.layout, lambda name: group[name.rsplit(".", 1)[0]])


def param_delta(w_new, w_old):
    """Elementwise ``w_new - w_old`` over identical layouts."""
    if not w_new.same_layout(w_old):
        raise ContractError("param_delta: layouts differ")
    return ParamVector(w_new.values - w_old.values, w_new.layout)
