"""Every method on the same continual streams, five seeds each.

All runs share one Workspace, so each seed's stream object is literally the
same for every method. Writes per-batch CSVs and summaries to demo_out/.
"""
import numpy as np

from palmtta import runner as rn

base = rn.RunConfig(out_dir="demo_out", seeds=[0, 1, 2, 3, 4])
ws = rn.Workspace(train_missing=True)

reports = []
for method in rn.METHODS:
    cfg = base.with_updates({"method": method})
    reps = rn.run_all(cfg, ws)
    reports += reps
    errs = [r.overall_error for r in reps]
    print(f"{rn.method_label(method):15s} mean error {np.mean(errs):.4f} +- {np.std(errs, ddof=1):.4f}  "
          f"({np.mean([r.wall_time for r in reps]):.2f}s per run)")

# %% per-domain view for the default method vs source
by = {(r.method, r.seed): r for r in reports}
print("\n" + " " * 22 + "  source    palm")
for domain in by["palm", 0].per_domain:
    s = np.mean([by["source", k].per_domain[domain] for k in base.seeds])
    p = np.mean([by["palm", k].per_domain[domain] for k in base.seeds])
    print(f"{domain:22s} {s:7.4f} {p:7.4f}")

paths = rn.report(reports, "demo_out", prefix="compare-")
print("\nwrote", ", ".join(str(p) for p in paths.values()))
