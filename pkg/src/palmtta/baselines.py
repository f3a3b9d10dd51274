"""Reference adaptation strategies run on the same streams as PALM.

* ``source``: frozen model, running BN statistics.
* ``bn-stats``: current-batch BN statistics, no gradient step.
* ``tent-continual``: ungated entropy minimisation over BN affine parameters.
* ``surgical``: the full PALM objective at a fixed learning rate on the
  first affine + BN pair only.
* ``law``: LAW-style layer-wise learning rates from an accumulated diagonal
  Fisher estimate built on pseudo-labels. Only the Fisher accumulation is
  taken from the original method; the mapping to a learning rate is a
  labelled approximation (see :func:`law_layer_lrs`).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import optim
from .network import Network, cross_entropy
from .palm import StepReport, adaptation_loss, entropy_tensor

BASELINES = ("source", "bn-stats", "tent-continual", "surgical", "law")


def _finite_or_raise(net: Network) -> None:
    for s in net.slots:
        if not np.all(np.isfinite(s.tensor.values)):
            raise ad.NonFiniteError(f"update of slot {s.key}")


def source_step(net: Network, batch) -> StepReport:
    logits = net.forward(batch.x, "eval")
    return StepReport(predictions=logits.values.argmax(axis=1))


def bn_stats_step(net: Network, batch) -> StepReport:
    logits = net.forward(batch.x, "batch")
    return StepReport(predictions=logits.values.argmax(axis=1))


def bn_affine_slots(net: Network):
    return [s for s in net.slots if s.name in ("gamma", "beta")]


def tent_step(net: Network, batch, lr: float = 1e-3, optimizer: str = "adam") -> StepReport:
    """One step of mean (ungated) entropy on BN scale/shift, batch statistics."""
    net.zero_grad()
    logits = net.forward(batch.x, "batch")
    loss = ad.mean(entropy_tensor(logits))
    net.backward(loss)
    trainable = bn_affine_slots(net)
    for s in net.slots:
        s.frozen = s not in trainable
    for s in trainable:
        optim.update(s, lr, optimizer)
    _finite_or_raise(net)
    mask = {n: any(s in trainable for s in net.layer_slots(n)) for n in sorted({s.layer_index for s in net.slots})}
    return StepReport(predictions=logits.values.argmax(axis=1), mask=mask, loss_entropy=loss.item())


def surgical_step(net: Network, batch, augmenter, lr: float = 5e-4, lam: float = 0.01,
                  layers=(0, 1), gate_factor: float = 0.4, optimizer: str = "adam") -> StepReport:
    """Fixed-rate fine-tuning of the first block under the gated-entropy + consistency objective."""
    layers = set(layers)
    net.zero_grad()
    total, logits, parts = adaptation_loss(net, batch.x, augmenter(batch), lam,
                                           net.num_classes, gate_factor, "batch")
    net.backward(total)
    for s in net.slots:
        s.frozen = s.layer_index not in layers
        if not s.frozen:
            optim.update(s, lr, optimizer)
    _finite_or_raise(net)
    mask = {n: n in layers for n in sorted({s.layer_index for s in net.slots})}
    return StepReport(predictions=logits.values.argmax(axis=1), mask=mask,
                      loss_entropy=parts["entropy"], loss_consist=parts["consist"])


# ---------------------------------------------------------------- LAW-style

@dataclass
class LawState:
    fisher: dict = field(default_factory=dict)  # slot key -> accumulated diagonal
    t: int = 0

    def layer_means(self, net: Network) -> dict[int, float]:
        out = {}
        for n in sorted({s.layer_index for s in net.slots}):
            parts = [self.fisher[s.key].ravel() for s in net.layer_slots(n) if s.key in self.fisher]
            out[n] = float(np.concatenate(parts).mean()) if parts else 0.0
        return out


def pseudo_label_fisher(net: Network, x) -> tuple[dict, np.ndarray]:
    """Squared gradient of the pseudo-label log-likelihood, per slot.

    The gradient is taken of the batch-mean log-likelihood of the argmax
    labels, then squared elementwise.
    """
    net.zero_grad()
    logits = net.forward(x, "batch")
    pseudo = logits.values.argmax(axis=1)
    nll = cross_entropy(logits, pseudo)
    net.backward(nll)
    fisher = {s.key: s.tensor.grad ** 2 for s in net.slots}
    return fisher, pseudo


def accumulate_fisher(state: LawState, fisher: dict) -> None:
    """Direct accumulation: F_hat <- F_hat + F."""
    for key, f in fisher.items():
        if key in state.fisher:
            state.fisher[key] = state.fisher[key] + f
        else:
            state.fisher[key] = f.copy()
    state.t += 1


def law_layer_lrs(state: LawState, net: Network, kappa: float, eps: float = 1e-8) -> dict[int, float]:
    """kappa * mean(F_hat_n) / (max_m mean(F_hat_m) + eps), clipped to [0, kappa]."""
    means = state.layer_means(net)
    top = max(means.values()) if means else 0.0
    return {n: float(np.clip(kappa * m / (top + eps), 0.0, kappa)) for n, m in means.items()}


def law_step(net: Network, state: LawState, batch, augmenter, kappa: float = 5e-4,
             lam: float = 0.01, gate_factor: float = 0.4, optimizer: str = "adam") -> StepReport:
    fisher, _ = pseudo_label_fisher(net, batch.x)
    accumulate_fisher(state, fisher)
    lrs = law_layer_lrs(state, net, kappa)
    net.zero_grad()
    total, logits, parts = adaptation_loss(net, batch.x, augmenter(batch), lam,
                                           net.num_classes, gate_factor, "batch")
    net.backward(total)
    for s in net.slots:
        s.frozen = lrs[s.layer_index] == 0.0
        s.lr = np.full(s.tensor.shape, lrs[s.layer_index])
        if not s.frozen:
            optim.update(s, s.lr, optimizer)
    _finite_or_raise(net)
    return StepReport(predictions=logits.values.argmax(axis=1),
                      mask={n: lr > 0 for n, lr in lrs.items()},
                      loss_entropy=parts["entropy"], loss_consist=parts["consist"],
                      mean_importance={n: lr / kappa for n, lr in lrs.items()})
