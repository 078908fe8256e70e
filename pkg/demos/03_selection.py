"""
Choosing the mining node
========================

The aggregator broadcasts a random number. Each relay counts how often its
decimal digits occur in the hash of its own measurements; the largest count
mines the block.
"""

import random

from porch.consensus import build_tally, generate_challenge, make_report, resolve, verify_report
from porch.dataset import load_dataset, sample_cycle

rng = random.Random(3)
sets = sample_cycle(load_dataset(), cycle=1, seed=0)
challenge = generate_challenge(rng, 0, 9)
print("challenge:", challenge.rendered)

reports = [make_report(sets[name], challenge) for name in sorted(sets)]
for r in reports:
    print(f"{r.node}  {r.digest}  count={r.count}")

# %%
# All nodes sort the same way (count down, then name), so every relay can
# derive the decision independently and vote on it.
tally = build_tally(reports)
print(tally.sorted, "multiplicity:", tally.largest_count_multiplicity)
print("decision:", tally.decision.label(), "-> miner", resolve(tally, rng))

# %%
# Counts are cheap to check. A relay that claims one more hit than its hash
# holds is caught by anyone who has its data.
honest = reports[0]
inflated = type(honest)(honest.node, honest.digest, honest.count + 1)
print("honest ok:", verify_report(honest, sets[honest.node], challenge))
print("inflated ok:", verify_report(inflated, sets[honest.node], challenge))

# %%
# Wider challenges are rarer in a 64-character digest, so more rounds end
# in an all-zero tally and fall back to a random draw.
for hi in (9, 99, 999):
    zeros = 0
    for cycle in range(1, 501):
        s = sample_cycle(load_dataset(), cycle, seed=0)
        c = generate_challenge(rng, 0, hi)
        zeros += build_tally([make_report(v, c) for v in s.values()]).top_count == 0
    print(f"range 0..{hi}: {zeros / 500:.2%} all-zero rounds")
