"""Uncertainty-driven layer selection with sensitivity-scaled learning rates.

One adaptation step on an unlabeled batch runs two backward passes:

1. Cross-entropy of the temperature-smoothed softmax against the uniform
   label. The p-norm of each layer's gradient is its score; layers scoring
   at or below ``eta`` are selected, the rest frozen for this batch.
2. For selected parameters, first-order sensitivity ``|theta * grad|`` feeds
   an exponential moving average; the deviation of the current sensitivity
   from that average, divided by the average, scales the base learning rate
   elementwise.
3. Gated entropy plus a consistency term against an augmented copy of the
   batch is minimised with those per-parameter learning rates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import optim
from .network import Network, ParamSlot, per_layer_grad_view

P_NORMS = (0, 0.5, 1, 2, 3, 4, 5, math.inf)
VARIANTS = (1, 2, 3, 4, 5, 6)


@dataclass
class PalmConfig:
    kappa: float = 5e-4
    alpha: float = 0.5
    temperature: float = 50.0
    eta: float = 1.0
    lam: float = 0.01
    eps: float = 1e-8
    p: float = 1
    variant: int = 1
    optimizer: str = "adam"
    entropy_gate_factor: float = 0.4
    ema_init: str = "current"  # or "zero"
    aggregate_layer_mean: bool = False
    bn_mode: str = "batch"

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.eta < 0 or self.lam < 0:
            raise ValueError("eta and lam must be >= 0")
        if not 0 < self.eps < 1:
            raise ValueError("eps must satisfy 0 < eps << 1")
        if self.p not in P_NORMS:
            raise ValueError(f"unsupported p-norm order {self.p}; choose from {P_NORMS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown importance variant {self.variant}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ema_init not in ("current", "zero"):
            raise ValueError(f"ema_init must be 'current' or 'zero', got {self.ema_init!r}")


@dataclass
class PalmState:
    t: int = 0
    mask: dict[int, bool] = field(default_factory=dict)
    scores: dict[int, float] = field(default_factory=dict)


@dataclass
class StepReport:
    predictions: np.ndarray
    scores: dict[int, float] = field(default_factory=dict)
    mask: dict[int, bool] = field(default_factory=dict)
    loss_uncert: float = float("nan")
    loss_entropy: float = float("nan")
    loss_consist: float = float("nan")
    mean_importance: dict[int, float] = field(default_factory=dict)

    @property
    def n_selected(self) -> int:
        return sum(self.mask.values())


# ---------------------------------------------------------------- uncertainty

def kl_to_uniform(probs: np.ndarray) -> float:
    """Batch-mean KL(p || u) with the 0 * log 0 = 0 convention."""
    probs = np.atleast_2d(probs)
    c = probs.shape[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs * c), 0.0)
    return float(terms.sum(axis=1).mean())


def uniform_ce(logits: ad.Tensor, temperature: float) -> ad.Tensor:
    """Batch mean of the cross-entropy between softmax(logits/T) and the uniform label."""
    c = logits.shape[1]
    logp = ad.log_softmax(ad.scale(logits, 1.0 / temperature))
    return ad.scale(ad.mean(ad.sum(logp, axis=1)), -1.0 / c)


def uncertainty_loss(net: Network, x, temperature: float, bn_mode: str | None = None):
    """Return ``(loss, kl_diagnostic)``.

    ``loss`` is what gets backpropagated: its gradient is the class-average of
    the per-class cross-entropy gradients. ``kl_diagnostic`` is KL(p || u) of
    the smoothed prediction, for logging only.
    """
    logits = net.forward(x, bn_mode)
    loss = uniform_ce(logits, temperature)
    probs = ad.softmax(ad.scale(logits.detach(), 1.0 / temperature)).values
    return loss, kl_to_uniform(probs)


def pnorm(g: np.ndarray, p: float) -> float:
    a = np.abs(np.ravel(g))
    if p == 0:
        return float(np.count_nonzero(a))
    if p == math.inf:
        return float(a.max()) if a.size else 0.0
    if p == 1:
        return float(a.sum())
    return float(np.sum(a ** p) ** (1.0 / p))


def layer_scores(net: Network, p: float = 1) -> dict[int, float]:
    if p not in P_NORMS:
        raise ValueError(f"unsupported p-norm order {p}; choose from {P_NORMS}")
    return {n: pnorm(g, p) for n, g in per_layer_grad_view(net).items()}


def select_layers(scores: dict[int, float], eta: float, net: Network | None = None) -> dict[int, bool]:
    """Select layers with score <= eta; with ``net`` given, freeze the others."""
    mask = {n: bool(z <= eta) for n, z in sorted(scores.items())}
    if net is not None:
        for s in net.slots:
            if mask.get(s.layer_index, False):
                s.unfreeze()
            else:
                s.freeze()
    return mask


# ---------------------------------------------------------------- sensitivity

def sensitivity(slot: ParamSlot) -> np.ndarray:
    if slot.tensor.grad is None:
        raise RuntimeError(f"slot {slot.key} has no gradient")
    return np.abs(slot.tensor.values * slot.tensor.grad)


def ema_update(slot: ParamSlot, s: np.ndarray, alpha: float, init: str = "current") -> np.ndarray:
    """Fold the current sensitivity into the slot's moving average."""
    prev = slot.ema_sensitivity
    if prev is None:
        if init == "current":
            slot.ema_sensitivity = s.copy()
            return slot.ema_sensitivity
        prev = np.zeros_like(s)
    slot.ema_sensitivity = alpha * s + (1.0 - alpha) * prev
    return slot.ema_sensitivity


def importance(s: np.ndarray, s_hat: np.ndarray, eps: float = 1e-8, variant: int = 1) -> np.ndarray:
    """Learning-rate multiplier from current and averaged sensitivity.

    ``eps`` is added to every numerator and denominator factor.
    """
    d = np.abs(s - s_hat) + eps
    sh = s_hat + eps
    if variant == 1:
        return d / sh
    if variant == 2:
        return d * sh
    if variant == 3:
        return sh
    if variant == 4:
        return 1.0 / sh
    if variant == 5:
        return d
    if variant == 6:
        return sh / d
    raise ValueError(f"unknown importance variant {variant}")


def apply_lr(slot: ParamSlot, imp: np.ndarray, kappa: float) -> np.ndarray:
    if slot.frozen:
        slot.lr = np.zeros_like(slot.tensor.values)
    else:
        slot.lr = kappa * np.broadcast_to(imp, slot.tensor.shape).copy()
    return slot.lr


# ---------------------------------------------------------------- objective

def entropy(probs: np.ndarray) -> np.ndarray:
    """Per-row Shannon entropy (natural log), 0 * log 0 = 0."""
    probs = np.atleast_2d(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1)


def entropy_threshold(num_classes: int, factor: float = 0.4) -> float:
    return factor * math.log(num_classes)


def entropy_tensor(logits: ad.Tensor) -> ad.Tensor:
    """Per-sample entropy of softmax(logits) as a graph node, shape (batch,)."""
    p = ad.softmax(logits)
    return ad.scale(ad.sum(ad.mul(p, ad.log_softmax(logits)), axis=1), -1.0)


def adaptation_loss(net: Network, x, x_aug, lam: float, num_classes: int | None = None,
                    gate_factor: float = 0.4, bn_mode: str | None = None):
    """Gated entropy plus ``lam`` times consistency with the augmented batch.

    Returns ``(total, logits, parts)`` where ``parts`` holds the float values
    of the entropy and consistency terms.
    """
    if np.shape(x) != np.shape(x_aug):
        raise ad.ShapeError("adaptation_loss", np.shape(x), np.shape(x_aug))
    logits = net.forward(x, bn_mode)
    c = num_classes or logits.shape[1]
    h0 = entropy_threshold(c, gate_factor)
    h = entropy_tensor(logits)
    gate = (h.values <= h0).astype(np.float64)
    loss_ent = ad.mean(ad.mul(h, gate))

    aug_logits = net.forward(x_aug, bn_mode)
    p = ad.softmax(logits)
    consist = ad.scale(ad.sum(ad.mul(p, ad.log_softmax(aug_logits)), axis=1), -1.0)
    loss_const = ad.mean(consist)
    total = ad.add(loss_ent, ad.scale(loss_const, lam))
    return total, logits, {"entropy": loss_ent.item(), "consist": loss_const.item()}


# ---------------------------------------------------------------- the step

def _check_params_finite(net: Network) -> None:
    for s in net.slots:
        if not np.all(np.isfinite(s.tensor.values)):
            raise ad.NonFiniteError(f"update of slot {s.key}")


def palm_step(net: Network, state: PalmState, cfg: PalmConfig, batch, augmenter) -> StepReport:
    """Adapt ``net`` to one unlabeled batch.

    ``batch`` needs ``x``; ``augmenter(batch)`` must return an array of the
    same shape. Predictions in the report come from the clean forward of the
    adaptation objective, i.e. before this batch's parameter update.
    """
    x = batch.x
    # (a) uncertainty gradient
    net.zero_grad()
    loss_u, kl = uncertainty_loss(net, x, cfg.temperature, cfg.bn_mode)
    net.backward(loss_u)
    # (b, c) score and select
    scores = layer_scores(net, cfg.p)
    mask = select_layers(scores, cfg.eta, net)
    # (d) per-parameter learning rates for selected slots
    mean_imp: dict[int, float] = {}
    by_layer: dict[int, list] = {}
    for slot in net.slots:
        if slot.frozen:
            slot.lr = np.zeros_like(slot.tensor.values)
            continue
        s = sensitivity(slot)
        s_hat = ema_update(slot, s, cfg.alpha, cfg.ema_init)
        imp = importance(s, s_hat, cfg.eps, cfg.variant)
        by_layer.setdefault(slot.layer_index, []).append((slot, imp))
    for n, items in by_layer.items():
        layer_mean = float(np.concatenate([imp.ravel() for _, imp in items]).mean())
        mean_imp[n] = layer_mean
        for slot, imp in items:
            apply_lr(slot, layer_mean if cfg.aggregate_layer_mean else imp, cfg.kappa)
    # (e) adaptation objective
    net.zero_grad()
    x_aug = augmenter(batch)
    total, logits, parts = adaptation_loss(net, x, x_aug, cfg.lam, net.num_classes,
                                           cfg.entropy_gate_factor, cfg.bn_mode)
    net.backward(total)
    # (f, g) update selected slots only
    for slot in net.slots:
        if not slot.frozen:
            optim.update(slot, slot.lr, cfg.optimizer)
    _check_params_finite(net)
    state.t += 1
    state.mask = mask
    state.scores = scores
    return StepReport(
        predictions=logits.values.argmax(axis=1),
        scores=scores, mask=mask, loss_uncert=kl,
        loss_entropy=parts["entropy"], loss_consist=parts["consist"],
        mean_importance=mean_imp,
    )
