"""One adaptation step, taken apart.

Trains (or loads) the source model, takes the first severity-5 batch of the
continual stream and runs each stage of the step by hand: uncertainty
gradient, layer scores, selection, sensitivity, moving average, importance,
learning rates, and finally the update.
"""
import math

import numpy as np

from palmtta import palm as pm
from palmtta import runner as rn
from palmtta import shiftbench as sb

cfg = rn.RunConfig(out_dir="demo_out")
ws = rn.Workspace(train_missing=True)
net = rn.build_network(cfg)
net.restore(ws.source_snapshot(cfg))
stream = ws.stream(cfg, seed=0)
batch = stream[0]
print(f"batch {batch.index}: domain={batch.domain} severity={batch.severity} n={len(batch.x)}")

# %% uncertainty gradient: CE of softmax(h/T) against the uniform label
net.zero_grad()
loss, kl = pm.uncertainty_loss(net, batch.x, temperature=50.0, bn_mode="batch")
net.backward(loss)
print(f"uniform-target CE {loss.item():.5f}   KL(p||u) diagnostic {kl:.2e}")

# %% per-layer scores for several p, and what each threshold would select
for p in (0.5, 1, 2, math.inf):
    z = pm.layer_scores(net, p)
    print(f"p={p:<4} " + " ".join(f"{n}:{v:8.4f}" for n, v in z.items()))
scores = pm.layer_scores(net, 1)
for eta in (0.01, 0.03, 0.1):
    mask = pm.select_layers(scores, eta)
    print(f"eta={eta:<5} selects layers {[n for n, s in mask.items() if s]}")

# %% sensitivity -> moving average -> importance, first slot of each selected layer
pm.select_layers(scores, 0.03, net)
for slot in net.slots:
    if slot.frozen or slot.name not in ("weight", "gamma"):
        continue
    s = pm.sensitivity(slot)
    slot.ema_sensitivity = 0.5 * s  # pretend history, so the deviation is non-zero
    s_hat = pm.ema_update(slot, s, alpha=0.5)
    imp = pm.importance(s, s_hat, variant=1)
    lr = pm.apply_lr(slot, imp, kappa=5e-4)
    print(f"layer {slot.layer_index} {slot.name:6s} S mean {s.mean():.2e}  S_hat mean {s_hat.mean():.2e}  "
          f"importance median {np.median(imp):.3f}  lr range [{lr.min():.1e}, {lr.max():.1e}]")

# %% the full step on a fresh copy, then on the next batches
net.restore(ws.source_snapshot(cfg))
net.reset_adaptation_state()
state = pm.PalmState()
aug = sb.Augmenter(ws.dataset(cfg).feature_std, seed=0)
for b in stream.batches[:5]:
    rep = pm.palm_step(net, state, cfg.palm, b, aug)
    err = np.mean(rep.predictions != stream.labels(b))
    print(f"step {b.index}: selected {rep.n_selected}/{net.num_layers}  entropy {rep.loss_entropy:.4f}  "
          f"consistency {rep.loss_consist:.4f}  error {err:.2f}")
