"""
One acquisition cycle in the simulator
======================================

Control center, aggregator and four relays exchange real DNP3m frames over
a virtual clock where one tick is a millisecond.
"""

from porch.harness import trace_to_jsonl
from porch.runner import RunConfig, metrics_csv, run

res = run(RunConfig(cycles=1, seed=0))
for e in res.trace:
    if e.kind in ("send", "phase") and (e.kind == "phase" or e.src in ("CC", "DA")):
        print(f"{e.tick:6d} {e.kind:6s} {e.src:>3} -> {e.dst:<3} {e.detail}")

# %%
# Time per phase as the aggregator saw it.
print(metrics_csv(res.metrics))

# %%
# All six copies of the chain agree.
print({name: chain.tip.current_hash[:12] for name, chain in res.replicas().items()})
print("CC tip:", res.nodes["CC"].chain.tip.current_hash[:12])

# %%
# A relay that lies about its count aborts the cycle and is named, and no
# copy of the chain moves.
res = run(RunConfig(cycles=2, seed=0, faults={"R3": {"inflate_count": 2}}))
for m in res.metrics:
    print(m.cycle, m.outcome_label, m.flagged, m.detail)
print("chain length:", len(res.chain), "identical:", res.replicas_identical)

# %%
# Dropping a relay's link makes acquisition time out.
res = run(RunConfig(cycles=1, drop={"R2": 1.0}))
print(res.metrics[0].outcome_label, res.metrics[0].detail)
print(trace_to_jsonl(res.trace[-3:]))
