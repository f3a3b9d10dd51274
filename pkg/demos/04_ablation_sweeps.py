"""Ablation grids: scoring norm p, importance variant, and threshold eta.

Each sweep is a Cartesian grid x seeds; the report step writes an ablation
table plus x / mean / std plot-data files for each swept key.
"""
import math

from palmtta import runner as rn

base = rn.RunConfig(out_dir="demo_out")
ws = rn.Workspace(train_missing=True)
seeds = [0, 1, 2, 3, 4]

grids = {
    "pnorm": {"palm.p": [0, 0.5, 1, 2, 3, 4, 5, math.inf]},
    "variant": {"palm.variant": [1, 2, 3, 4, 5, 6]},
    "eta": {"palm.eta": list(rn.ETA_GRID)},
}
for name, grid in grids.items():
    reports = rn.sweep(base, {**grid, "seeds": seeds}, ws)
    print(f"\n{name}: {len(reports)} runs")
    for g in rn.summarize(reports):
        (k, v), = g["params"].items()
        print(f"  {k}={v!s:8s} mean {g['mean_error']:.4f}  std {g['std_error']:.4f}")
    paths = rn.report(reports, "demo_out", prefix=f"ablation-{name}-")
    print("  plot data:", [str(p) for k, p in paths.items() if k.startswith("plot:")])
