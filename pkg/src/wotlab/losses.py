"""Adversarial training objectives: AT (PGD-CE), TRADES and MART.

Each function returns a scalar Tensor; run it under a :class:`GradTape` with
differentiable ``weights`` to train.
"""
import numpy as np

from .tensor import kl_divergence, log, max_excluding, mean, mul, pick, softmax, softmax_cross_entropy, sub


def at_loss(model, x_adv, y, weights=None):
    return softmax_cross_entropy(model.forward(x_adv, weights), y)


def trades_loss(model, x, x_adv, y, beta, weights=None):
    """``CE(f(x), y) + beta * KL(f(x) || f(x_adv))``."""
    clean = model.forward(x, weights)
    ce = softmax_cross_entropy(clean, y)
    if beta == 0:
        return ce
    return ce + mul(kl_divergence(clean, model.forward(x_adv, weights)), float(beta))


def boosted_ce(adv_logits, y):
    """Per-sample ``-log p_y - log(1 - max_{c != y} p_c)`` on adversarial logits."""
    p = softmax(adv_logits)
    return sub(sub(0.0, log(pick(p, y))), log(sub(1.0, max_excluding(p, y))))


def mart_loss(model, x, x_adv, y, lam, weights=None):
    """Boosted CE on ``x_adv`` plus ``lam * KL(f(x) || f(x_adv)) * (1 - p_y(x))``, batch-averaged."""
    y = np.asarray(y, dtype=np.int64)
    adv = model.forward(x_adv, weights)
    bce = mean(boosted_ce(adv, y))
    if lam == 0:
        return bce
    clean = model.forward(x, weights)
    kl = kl_divergence(clean, adv, reduction="none")
    conf = sub(1.0, pick(softmax(clean), y))
    return bce + mul(mean(mul(kl, conf)), float(lam))
