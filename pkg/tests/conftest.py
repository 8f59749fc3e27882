import numpy as np
import pytest

from wotlab.data import synth_blobs
from wotlab.models import ConvLayer, ModelSpec, build_model, mlp_spec
from wotlab.tensor import Tensor, matmul, mul, tsum

np.seterr(over="ignore", under="ignore")


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records and prints one criterion verdict."""
    def record(n, ok, detail):
        request.config.stash[_ACCEPTANCE].append((n, bool(ok), detail))
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


class LogisticModel:
    """Two-class logits ``[0, w.x]`` so that p(class 1) = sigmoid(w.x)."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float32).reshape(-1, 1)
        self.params = None

    def forward(self, x, weights=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        z = matmul(x, Tensor(np.concatenate([np.zeros_like(self.w), self.w], axis=1)))
        return z

    def predict(self, x, weights=None):
        return self.forward(np.asarray(x, dtype=np.float32)).data.argmax(axis=1)


def central_fd(f, x, h=1e-3):
    """Central differences of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-8))


def tiny_cnn_spec(classes=3, shape=(2, 6, 6)):
    return ModelSpec(kind="cnn", input_shape=shape, classes=classes, conv=[
        ConvLayer(3, 3, 1, 1), ConvLayer(3, 3, 1, 1), ConvLayer(4, 2, 2, 0)])


@pytest.fixture
def logistic():
    return LogisticModel([1.0, -2.0])


@pytest.fixture
def tiny_mlp():
    return build_model(mlp_spec([6, 5, 4, 3]), seed=3)


@pytest.fixture
def tiny_cnn():
    return build_model(tiny_cnn_spec(), seed=5)


@pytest.fixture
def blobs():
    return synth_blobs(seed=0, n_per_class=20, classes=3, dim=6, spread=0.1)


def quadratic_loss(t):
    return tsum(mul(t, t))


def tiny_config_dict(**dotted):
    """Seconds-scale synthetic run; keyword names use ``__`` for dots (``wot__m=5``)."""
    from wotlab.config import set_dotted
    raw = {
        "seed": 0, "epochs": 2, "batch_size": 16,
        "data": {"name": "synth", "classes": 3, "n_per_class": 60, "dim": [8], "spread": 0.2,
                 "train_size": 96, "holdout_size": 32, "val_size": 40, "test_size": 60},
        "model": {"kind": "mlp", "input_shape": [8], "classes": 3, "hidden": [12]},
        "optim": {"lr": 0.05},
        "attack": {"train": {"epsilon": 0.05, "steps": 2}, "val": {"epsilon": 0.05, "steps": 3},
                   "eval": [{"epsilon": 0.05, "steps": 3}]},
        "wot": {"m": 2, "k": 2, "start_epoch": 0.5, "alpha_steps": 3, "batch_size": 16,
                "attack": {"epsilon": 0.05, "steps": 2}},
        "metrics": {"train_acc_size": 50},
    }
    for key, val in dotted.items():
        set_dotted(raw, key.replace("__", "."), val)
    return raw


def tiny_config(**dotted):
    from wotlab.config import config_from_dict
    return config_from_dict(tiny_config_dict(**dotted))
