"""
Building and tampering with the ledger
======================================

Blocks hold one measurement set per relay. The Merkle root covers the
payload and the block hash covers the header, so any edit shows up.
"""

import dataclasses

from porch.dataset import load_dataset, sample_cycle
from porch.ledger import Chain, create_block, validate_chain

ds = load_dataset()
chain = Chain.new()
for cycle in range(1, 6):
    sets = sample_cycle(ds, cycle, seed=0)
    chain = chain.append(create_block(chain.tip, [sets[k] for k in sorted(sets)], cycle * 15_000))

for b in chain.blocks:
    print(b.index, b.header.timestamp, b.current_hash[:16], "<-", b.header.previous_hash[:16])
print("violations:", validate_chain(chain))

# %%
# The canonical text of one relay's measurements, which is what gets hashed.
print(chain.blocks[1].payload[0].canonical()[:120], "...")

# %%
# Nudge a single voltage reading in block 3 by one microunit.
block = chain.blocks[3]
s = block.payload[0]
rec = s.records[0]
bad_set = dataclasses.replace(s, records=(dataclasses.replace(rec, value=rec.value + 1e-6),) + s.records[1:])
bad = dataclasses.replace(block, payload=(bad_set,) + block.payload[1:])
tampered = dataclasses.replace(chain, blocks=chain.blocks[:3] + (bad,) + chain.blocks[4:])
print([str(v) for v in validate_chain(tampered)])

# %%
# Recomputing the root and hash hides nothing: the next block still points
# at the old hash.
forged = create_block(chain.blocks[2], bad.payload, block.header.timestamp)
tampered = dataclasses.replace(chain, blocks=chain.blocks[:3] + (forged,) + chain.blocks[4:])
print([str(v) for v in validate_chain(tampered)])
