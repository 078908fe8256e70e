"""
The same nodes over localhost TCP
=================================

Each node listens on its own port and frames go through real sockets.
Ports are picked by the OS here; the CLI defaults to 20000 upward.
"""

from porch.runner import RunConfig, run

res = run(RunConfig(cycles=3, period=400, transport="tcp", base_port=0))
for m in res.metrics:
    print(f"cycle {m.cycle}: {m.total} ms wall, selection {m.phases['selection']} ms, "
          f"miner {m.miner}, {m.outcome_label}")
print("replicas identical:", res.replicas_identical)

# %%
# With block timestamps pinned to the cycle number, the simulator and the
# socket run build the same chain byte for byte.
def clock(cycle, now):
    return cycle * 1000


sim = run(RunConfig(cycles=3, period=400, latency=0, block_clock=clock))
tcp = run(RunConfig(cycles=3, period=400, transport="tcp", base_port=0, block_clock=clock))
print("same chain:", sim.chain.to_json() == tcp.chain.to_json())
