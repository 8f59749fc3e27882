"""Training configuration: TOML file <-> nested dataclasses.

Grammar: a TOML document with top-level scalars (``seed``, ``epochs``,
``batch_size``, ``baseline``, ``ema_decay``, ``output_dir``) and the sections
``[data]``, ``[model]`` (with ``[[model.conv]]`` entries), ``[loss]``,
``[optim]``, ``[attack.train]``, ``[attack.val]``, ``[[attack.eval]]``,
``[wot]``, ``[wot.attack]`` and ``[metrics]``. Unset keys take the defaults
below; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .attacks import AttackConfig
from .errors import ConfigError
from .models import ConvLayer, ModelSpec


@dataclass
class DataConfig:
    name: str = "synth"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)
    classes: int = 10
    train_size: int = 5000
    test_size: int = 1000
    val_size: int = 500
    holdout_size: int = 500
    holdout_source: str = "unseen"
    split_seed: int = 0
    # synthetic generator
    n_per_class: int = 200
    dim: list = field(default_factory=lambda: [16])
    spread: float = 0.15


@dataclass
class LossConfig:
    kind: str = "at"
    beta: float = 6.0
    lam: float = 5.0


@dataclass
class OptimConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list = field(default_factory=lambda: [0.5, 0.75])
    decay: float = 0.1


@dataclass
class AttackSection:
    train: AttackConfig = field(default_factory=AttackConfig)
    val: AttackConfig = field(default_factory=AttackConfig)
    eval: list = field(default_factory=lambda: [
        AttackConfig.fgsm(), AttackConfig(steps=20), AttackConfig(steps=100)])


@dataclass
class WotConfig:
    enabled: bool = False
    mode: str = "b"
    m: int = 400
    k: int = 4
    start_epoch: float = -1.0  # negative: first LR decay
    alpha_lr: float = 0.01
    alpha_gamma: float = 0.9
    alpha_steps: int = 10
    batch_size: int = 128
    regenerate_per_step: bool = True
    reset_momentum_on_refine: bool = False
    attack: AttackConfig = field(default_factory=AttackConfig)


@dataclass
class MetricsConfig:
    test_attack: bool = True  # robust_test_acc each epoch with attack.eval[0]
    train_acc_size: int = 1000


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 128
    baseline: str = "none"
    ema_decay: float = 0.999
    swa_start_epoch: float = -1.0  # negative: first LR decay
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    wot: WotConfig = field(default_factory=WotConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.baseline not in ("none", "swa", "ema"):
            raise ConfigError(f"baseline must be none|swa|ema, got {self.baseline!r}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.loss.kind not in ("at", "trades", "mart"):
            raise ConfigError(f"loss.kind must be at|trades|mart, got {self.loss.kind!r}")
        if self.loss.beta < 0 or self.loss.lam < 0:
            raise ConfigError("loss.beta and loss.lam must be >= 0")
        if self.data.name not in ("synth", "idx", "cifar10"):
            raise ConfigError(f"data.name must be synth|idx|cifar10, got {self.data.name!r}")
        if self.data.holdout_source not in ("unseen", "seen"):
            raise ConfigError(f"data.holdout_source must be unseen|seen, got {self.data.holdout_source!r}")
        if self.optim.lr <= 0:
            raise ConfigError(f"optim.lr must be > 0, got {self.optim.lr}")
        w = self.wot
        if w.m < 1:
            raise ConfigError(f"wot.m must be >= 1, got {w.m}")
        if w.k < 1:
            raise ConfigError(f"wot.k must be >= 1, got {w.k}")
        if w.mode not in ("w", "b"):
            raise ConfigError(f"wot.mode must be 'w' or 'b', got {w.mode!r}")
        if w.alpha_lr < 0 or w.alpha_steps < 0 or not 0 <= w.alpha_gamma < 1:
            raise ConfigError("wot.alpha_lr/alpha_steps must be >= 0 and alpha_gamma in [0, 1)")
        self.model.validate()
        for a in [self.attack.train, self.attack.val, w.attack, *self.attack.eval]:
            a.validate()
        return self

    def first_decay_epoch(self):
        return min(self.optim.milestones) * self.epochs if self.optim.milestones else 0.0


# generic dict <-> dataclass --------------------------------------------------------

_NESTED = {
    (TrainConfig, "data"): DataConfig, (TrainConfig, "model"): ModelSpec,
    (TrainConfig, "loss"): LossConfig, (TrainConfig, "optim"): OptimConfig,
    (TrainConfig, "attack"): AttackSection, (TrainConfig, "wot"): WotConfig,
    (TrainConfig, "metrics"): MetricsConfig,
    (AttackSection, "train"): AttackConfig, (AttackSection, "val"): AttackConfig,
    (WotConfig, "attack"): AttackConfig,
}
_LISTS = {(AttackSection, "eval"): AttackConfig, (ModelSpec, "conv"): ConvLayer}
_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,)}


def _field_type(cls, f):
    hints = typing.get_type_hints(cls)
    t = hints.get(f.name)
    origin = typing.get_origin(t)
    if origin is typing.Union or type(t).__name__ == "UnionType":
        args = [a for a in typing.get_args(t) if a is not type(None)]
        t = args[0] if args else None
    return t


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in raw.items():
        path = f"{where}.{key}" if where else key
        if key not in fields:
            raise ConfigError(f"unknown config key {path!r}")
        f = fields[key]
        if (cls, key) in _NESTED:
            kwargs[key] = _build(_NESTED[(cls, key)], val, path)
        elif (cls, key) in _LISTS:
            if not isinstance(val, list):
                raise ConfigError(f"config key {path!r} must be an array of tables")
            kwargs[key] = [_build(_LISTS[(cls, key)], v, f"{path}[{i}]") for i, v in enumerate(val)]
        else:
            kwargs[key] = _coerce(_field_type(cls, f), val, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _coerce(t, val, path):
    if t in _SCALARS:
        if isinstance(val, bool) and t is not bool:
            raise ConfigError(f"config key {path!r} expects {t.__name__}, got bool")
        if not isinstance(val, _SCALARS[t]):
            raise ConfigError(f"config key {path!r} expects {t.__name__}, got {type(val).__name__}")
        return t(val)
    if t in (list, tuple) or typing.get_origin(t) in (list, tuple):
        if not isinstance(val, list):
            raise ConfigError(f"config key {path!r} expects an array, got {type(val).__name__}")
        return list(val)
    return val


def config_from_dict(raw):
    return _build(TrainConfig, raw, "").validate()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if getattr(obj, f.name) is not None}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg):
    return _to_plain(cfg)


def parse_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def parse_config_text(text):
    try:
        return config_from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg):
    return tomli_w.dumps(config_to_dict(cfg))


def set_dotted(raw, dotted, value):
    """Set ``raw['a']['b'] = value`` for ``dotted='a.b'``, creating tables as needed."""
    parts = dotted.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted!r}: {p!r} is not a table")
    node[parts[-1]] = value
    return raw
