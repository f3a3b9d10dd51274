"""The three stream protocols over the same corrupted test split.

Continual (one severity-5 task per family), gradual (severity ramps
1..5..1 inside each task) and mixed-domain (continual batches shuffled).
"""
from collections import Counter

import numpy as np

from palmtta import shiftbench as sb

data = sb.make_clean(num_classes=5, dim=8, n=5000, seed=0)
print(f"clean data: train {data.x_train.shape}, test {data.x_test.shape}, {data.num_classes} classes")

# %% how far each family moves the features, by severity
x = data.x_test[:1000]
for family in sb.FAMILIES:
    d = [sb.displacement(x, sb.Corruption(family, s, seed=1), data.feature_std) for s in range(1, 6)]
    print(f"{family:22s} " + " ".join(f"{v:6.2f}" for v in d))

# %% continual
ctta = sb.build_ctta(data, batch_size=100, seed=0)
print(f"\nctta: {len(ctta)} batches; domain changes at",
      [b.index for a, b in zip(ctta, ctta.batches[1:]) if a.domain != b.domain])

# %% gradual
gtta = sb.build_gtta(data, batch_size=100, seed=0)
first = [b.severity for b in gtta if b.domain_id == 0]
print(f"gtta: {len(gtta)} batches; first task severities {first}")

# %% mixed domain
mdtta = sb.build_mdtta(data, batch_size=100, seed=0)
print("mdtta first 12 domain ids:", [b.domain_id for b in mdtta.batches[:12]])
same = np.mean([a == b for a, b in zip(mdtta.domains(), mdtta.domains()[1:])])
print(f"consecutive same-domain fraction {same:.3f} (1/K = {1 / len(sb.FAMILIES):.3f})")
key = lambda b: (b.domain, b.sample_ids)  # noqa: E731
print("mdtta holds exactly the ctta batches:", Counter(map(key, ctta)) == Counter(map(key, mdtta)))

# %% streams are written out as plain descriptors, labels never leave the scenario
ctta.dump_jsonl("demo_ctta.jsonl")
print("wrote demo_ctta.jsonl;", open("demo_ctta.jsonl").readline().strip()[:100], "...")
