"""White-box FGSM / PGD attacks, robust accuracy and loss-landscape probes."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import GradTape, ParamVector, Tensor, kl_divergence, softmax_cross_entropy

L2_FLOOR = 1e-12


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    steps: int = 10
    step_size: float | None = None
    random_start: bool = True

    def __post_init__(self):
        self.norm = self.norm.lower()
        if self.step_size is None:
            self.step_size = self.epsilon / 4

    def validate(self):
        if self.norm not in ("linf", "l2"):
            raise ConfigError(f"attack norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError(f"attack epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"attack steps must be >= 1, got {self.steps}")
        if self.step_size <= 0 and self.epsilon > 0:
            raise ConfigError(f"attack step_size must be > 0, got {self.step_size}")
        return self

    @classmethod
    def fgsm(cls, epsilon=8 / 255):
        return cls("linf", epsilon, 1, epsilon, False)

    def label(self):
        if self.steps == 1 and not self.random_start and self.step_size == self.epsilon:
            name = "FGSM"
        else:
            name = f"PGD-{self.steps}"
        return f"{name}-{self.norm}-{self.epsilon:.4g}"

    def to_dict(self):
        return asdict(self)


def _labels(y):
    return np.asarray(y, dtype=np.int64)


def loss_and_input_grad(model, x, y, weights=None, objective="ce", clean_logits=None):
    """Batch-mean loss at ``x`` and its gradient w.r.t. ``x``.

    ``objective="kl"`` measures KL(softmax(clean_logits) || softmax(f(x))), the
    TRADES inner objective.
    """
    xt = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        logits = model.forward(xt, weights)
        if objective == "ce":
            loss = softmax_cross_entropy(logits, y)
        elif objective == "kl":
            loss = kl_divergence(Tensor(clean_logits), logits)
        else:
            raise ConfigError(f"unknown attack objective {objective!r}")
    g = tape.gradient(loss, [xt])[0]
    return loss.item(), g


def _linf_bounds(x, eps):
    """Float32 box bounds that never leave the real-valued eps-ball around ``x``."""
    x64 = x.astype(np.float64)
    lo = (x64 - eps).astype(np.float32)
    hi = (x64 + eps).astype(np.float32)
    lo = np.where(x64 - lo.astype(np.float64) > eps, np.nextafter(lo, np.float32(np.inf)), lo)
    hi = np.where(hi.astype(np.float64) - x64 > eps, np.nextafter(hi, np.float32(-np.inf)), hi)
    return lo, hi


def _project(x_adv, x, cfg):
    if cfg.norm == "linf":
        x_adv = np.clip(x_adv, *_linf_bounds(x, cfg.epsilon))
    else:
        x64 = x.astype(np.float64)
        delta = (x_adv.astype(np.float64) - x64).reshape(len(x), -1)
        norms = np.linalg.norm(delta, axis=1)
        scale = np.minimum(1.0, cfg.epsilon * (1 - 1e-12) / np.maximum(norms, L2_FLOOR))
        target = (delta * scale[:, None]).reshape(x.shape)
        x_adv = (x64 + target).astype(np.float32)
        # round every coordinate toward x so no |x_adv - x| exceeds its float64 target
        outward = np.abs(x_adv.astype(np.float64) - x64) > np.abs(target)
        x_adv = np.where(outward, np.nextafter(x_adv, x), x_adv)
    return np.clip(x_adv, 0.0, 1.0).astype(np.float32)


def _random_start(x, cfg, rng, objective):
    if objective == "kl":
        # KL is flat at the clean point; TRADES starts from a tiny Gaussian jitter
        start = x + np.float32(0.001) * rng.standard_normal(x.shape).astype(np.float32)
    elif cfg.norm == "linf":
        start = x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.shape).astype(np.float32)
    else:
        flat = rng.standard_normal((len(x), x[0].size))
        flat /= np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), L2_FLOOR)
        radius = cfg.epsilon * rng.uniform(0, 1, (len(x), 1)) ** (1.0 / x[0].size)
        start = x + (flat * radius).reshape(x.shape).astype(np.float32)
    return _project(start.astype(np.float32), x, cfg)


def _step(x_adv, g, cfg):
    if cfg.norm == "linf":
        return x_adv + np.float32(cfg.step_size) * np.sign(g)
    flat = g.reshape(len(g), -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    unit = np.where(norms[:, None] >= L2_FLOOR, flat / np.maximum(norms, L2_FLOOR)[:, None], 0.0)
    return x_adv + (cfg.step_size * unit).reshape(g.shape).astype(np.float32)


def fgsm(model, x, y, epsilon, weights=None):
    """``clip(x + eps * sign(grad_x CE), 0, 1)``."""
    x = np.asarray(x, dtype=np.float32)
    if epsilon == 0:
        return x.copy()
    _, g = loss_and_input_grad(model, x, _labels(y), weights)
    x_adv = np.clip(x + np.float32(epsilon) * np.sign(g), *_linf_bounds(x, epsilon))
    return np.clip(x_adv, 0.0, 1.0).astype(np.float32)


def pgd(model, x, y, cfg, rng=None, weights=None, objective="ce"):
    """Projected gradient ascent inside the ``cfg`` ball, clipped to [0, 1].

    ``rng`` (a numpy Generator or an int seed) drives the random start.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float32)
    y = _labels(y)
    if cfg.epsilon == 0:
        return x.copy()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.Philox(0 if rng is None else int(rng)))
    clean_logits = None
    if objective == "kl":
        clean_logits = model.forward(x, weights).data
    x_adv = _random_start(x, cfg, rng, objective) if cfg.random_start else x.copy()
    for _ in range(cfg.steps):
        _, g = loss_and_input_grad(model, x_adv, y, weights, objective, clean_logits)
        x_adv = _project(_step(x_adv, g, cfg), x, cfg)
    return x_adv


def attack(model, x, y, cfg, rng=None, weights=None):
    if cfg.steps == 1 and not cfg.random_start and cfg.step_size == cfg.epsilon and cfg.norm == "linf":
        return fgsm(model, x, y, cfg.epsilon, weights)
    return pgd(model, x, y, cfg, rng, weights)


def robust_accuracy(model, dataset, cfg, seed=0, batch_size=256, weights=None):
    """Fraction of samples still classified correctly after attacking every sample."""
    n = len(dataset.labels)
    if n == 0:
        raise ContractError("robust_accuracy on an empty dataset")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    correct = 0
    for i in range(0, n, batch_size):
        xb, yb = dataset.images[i:i + batch_size], dataset.labels[i:i + batch_size]
        x_adv = attack(model, xb, yb, cfg, rng, weights)
        correct += int((model.predict(x_adv, weights) == yb).sum())
    return correct / n


def clean_accuracy(model, dataset, weights=None):
    if len(dataset.labels) == 0:
        raise ContractError("clean_accuracy on an empty dataset")
    return float((model.predict(dataset.images, weights) == dataset.labels).mean())


def ce_loss(model, x, y, weights=None):
    return softmax_cross_entropy(model.forward(x, weights), _labels(y)).item()


# landscapes ----------------------------------------------------------------------

def _grid(radius, n):
    if n < 1 or n % 2 == 0:
        raise ContractError(f"grid_n must be odd so the origin is a grid point, got {n}")
    offs = np.linspace(-radius, radius, n)
    offs[n // 2] = 0.0
    return offs


def input_landscape(model, x, y, grid_radius, grid_n, seed, weights=None):
    """CE over ``x + a*sign(grad_x CE) + b*r`` with Rademacher ``r``; rows index ``a``."""
    offs = _grid(grid_radius, grid_n)
    x = np.asarray(x, dtype=np.float32)
    y = _labels(y)
    _, g = loss_and_input_grad(model, x, y, weights)
    r1 = np.sign(g).astype(np.float32)
    rng = np.random.Generator(np.random.Philox(int(seed)))
    r2 = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), size=x.shape)
    out = np.empty((grid_n, grid_n), dtype=np.float64)
    for i, a in enumerate(offs):
        for j, b in enumerate(offs):
            out[i, j] = ce_loss(model, x + np.float32(a) * r1 + np.float32(b) * r2, y, weights)
    return out


def layer_normalized_directions(params, seed, count=2):
    """Gaussian directions rescaled so each named tensor matches the weight's norm."""
    rng = np.random.Generator(np.random.Philox(int(seed)))
    dirs = []
    for _ in range(count):
        d = rng.standard_normal(len(params)).astype(np.float64)
        for e in params.layout:
            sl = slice(e.offset, e.offset + e.length)
            wn = np.linalg.norm(params.values[sl].astype(np.float64))
            dn = np.linalg.norm(d[sl])
            d[sl] *= wn / dn if dn > 0 else 0.0
        dirs.append(d.astype(np.float32))
    return dirs


def adversarial_loss(model, x, y, weights, cfg, seed):
    x_adv = pgd(model, x, y, cfg, int(seed), weights)
    return ce_loss(model, x_adv, y, weights)


def weight_landscape(model, batch, grid_radius, grid_n, seed, cfg=None, attack_seed=None, weights=None):
    """Adversarial CE (PGD regenerated per cell) over ``w + a*d1 + b*d2``."""
    offs = _grid(grid_radius, grid_n)
    cfg = cfg or AttackConfig(steps=10)
    attack_seed = seed if attack_seed is None else attack_seed
    x, y = batch
    base = weights if weights is not None else model.params
    d1, d2 = layer_normalized_directions(base, seed)
    out = np.empty((grid_n, grid_n), dtype=np.float64)
    for i, a in enumerate(offs):
        for j, b in enumerate(offs):
            w = ParamVector(base.values + np.float32(a) * d1 + np.float32(b) * d2, base.layout)
            out[i, j] = adversarial_loss(model, x, y, w, cfg, attack_seed)
    return out


def write_landscape_csv(path, matrix, radius, seed, mode):
    n = matrix.shape[0]
    offs = _grid(radius, n)
    with open(path, "w", newline="") as fh:
        fh.write(f"# mode={mode},radius={radius!r},seed={seed},grid_n={n}\n")
        w = csv.writer(fh)
        w.writerow(["row_offset"] + [repr(float(o)) for o in offs])
        for o, row in zip(offs, matrix):
            w.writerow([repr(float(o))] + [repr(float(v)) for v in row])


def read_landscape_csv(path):
    with open(path) as fh:
        meta_line = fh.readline().lstrip("# ").strip()
        meta = dict(kv.split("=", 1) for kv in meta_line.split(","))
        rows = list(csv.reader(fh))
    matrix = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return matrix, meta
