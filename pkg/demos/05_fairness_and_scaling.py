"""
Who mines, and how selection cost grows
=======================================

Hashes look uniform, so every relay should win about equally often.
"""

import numpy as np

from porch.runner import RunConfig, run

res = run(RunConfig(cycles=4000, seed=1, record_trace=False))
miners = np.array([int(m.miner[1:]) for m in res.metrics])
counts = np.bincount(miners, minlength=5)[1:]
share = counts / counts.sum()
sigma = np.sqrt(0.25 * 0.75 / counts.sum())
for i, (c, s) in enumerate(zip(counts, share), start=1):
    print(f"R{i}: {c:5d}  {s:.3f}  ({(s - 0.25) / sigma:+.2f} sigma)")

# %%
# Share of cycle time spent on selection.
frac = np.array([m.selection_fraction for m in res.metrics])
print(f"selection fraction: mean {frac.mean():.3f}, p5 {np.percentile(frac, 5):.3f}, "
      f"p95 {np.percentile(frac, 95):.3f}")

# %%
# Every eligible relay sends its count to every relay and each one handles
# its inbox a message at a time, so selection time grows with the size of
# the eligible set. Drawing K eligible relays out of N caps it.
for k in (2, 4, 8, 16, 32):
    r = run(RunConfig(relays=32, cycles=10, k_eligible=k, seed=2, record_trace=False))
    ticks = np.array([m.phases["selection"] for m in r.metrics])
    total = np.array([m.total for m in r.metrics])
    print(f"k={k:2d}: selection {ticks.mean():6.1f} ticks of {total.mean():6.1f}")
