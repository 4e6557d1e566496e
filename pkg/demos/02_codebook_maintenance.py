"""Codebook lifecycle: EMA updates, usage statistics, and dead-code revival.

A codebook trained by exponential moving averages drifts toward the data it
quantizes; entries that stop being selected decay toward zero cluster size
and get re-seeded onto poorly covered inputs.

Run:  python demos/02_codebook_maintenance.py
"""

import numpy as np

from vqkit import Codebook, ema_update, revive_dead_codes, stats
from vqkit.quantize import lookup_batch
from vqkit.seeding import substream

rng = substream(42, "demo")

# start from a deliberately bad codebook: all entries bunched near the origin
cb = Codebook.from_entries(0.01 * rng.standard_normal((16, 2)).astype(np.float32))

# data lives in two far-apart blobs
def batch(n=256):
    centers = np.array([[4.0, 4.0], [-4.0, -4.0]])
    which = rng.integers(0, 2, n)
    return (centers[which] + 0.3 * rng.standard_normal((n, 2))).astype(np.float32)

for step in range(1, 201):
    x = batch()
    idx, _ = lookup_batch(cb, x)
    ema_update(cb, x, idx, decay=0.99)
    if step % 50 == 0:
        s = stats(cb)
        dead = int((cb.ema_cluster_size < 1.0).sum())
        print(f"step {step:3d}: utilization {s.utilization:.2f}  "
              f"perplexity {s.perplexity:5.2f}  dead entries {dead}")
        cb.reset_usage()

# without revival, most entries chase one blob and the rest starve
dead_before = int((cb.ema_cluster_size < 1.0).sum())
revived = revive_dead_codes(cb, batch(512), threshold=1.0, seed=7)
print(f"\nrevival: {dead_before} entries below threshold, {revived} relocated")

for step in range(1, 101):
    x = batch()
    idx, _ = lookup_batch(cb, x)
    ema_update(cb, x, idx, decay=0.99)
s = stats(cb)
print(f"after 100 more steps: utilization {s.utilization:.2f}  "
      f"perplexity {s.perplexity:5.2f}")
print("\nfinal entries (should straddle both blobs):")
print(np.round(cb.entries, 1))
