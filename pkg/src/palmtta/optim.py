"""Per-slot Adam and SGD updates with elementwise learning rates.

The moments live on the :class:`~palmtta.network.ParamSlot` itself so that a
frozen slot is trivially left alone: callers simply skip it.
"""
from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_update(slot, lr) -> None:
    """One bias-corrected Adam step on ``slot`` using its current gradient.

    ``lr`` may be a scalar or an array broadcastable to the parameter shape.
    """
    g = slot.tensor.grad
    if g is None:
        raise RuntimeError(f"slot {slot.key} has no gradient")
    if slot.m is None:
        slot.m = np.zeros_like(g)
        slot.v = np.zeros_like(g)
    slot.step += 1
    slot.m = BETA1 * slot.m + (1.0 - BETA1) * g
    slot.v = BETA2 * slot.v + (1.0 - BETA2) * (g * g)
    m_hat = slot.m / (1.0 - BETA1 ** slot.step)
    v_hat = slot.v / (1.0 - BETA2 ** slot.step)
    slot.tensor.values -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def sgd_update(slot, lr) -> None:
    g = slot.tensor.grad
    if g is None:
        raise RuntimeError(f"slot {slot.key} has no gradient")
    slot.tensor.values -= lr * g


def update(slot, lr, optimizer: str = "adam") -> None:
    if optimizer == "adam":
        adam_update(slot, lr)
    elif optimizer == "sgd":
        sgd_update(slot, lr)
    else:
        raise ValueError(f"unknown optimizer {optimizer!r} (expected 'adam' or 'sgd')")
