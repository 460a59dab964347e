# %% [markdown]
# # Data availability: erasure coding and sampling
#
# A block body is split into `k` data chunks and extended to `n` chunks
# with a Reed-Solomon code over GF(2^16).  Any `k` chunks rebuild the body,
# so a producer must withhold at least `n - k + 1` chunks to hide it.  Light
# clients sample a few chunks at random and flag the block if any is
# missing.

# %%
import numpy as np

from sidechain.availability import (
    ChunkServer, decode, detection_probability, empirical_detection, encode, prove_incorrect_coding,
    sample, verify_incorrect_coding, commit_chunks,
)
from sidechain.hashing import merkle_prove

body = b"a side block body that must stay retrievable " * 20
coded = encode(body, k=8, n=16)
print(f"{len(body)} bytes -> 16 chunks of {len(coded.chunks[0])} bytes")

# %% [markdown]
# Any eight chunks suffice.

# %%
rng = np.random.default_rng(3)
pick = sorted(rng.choice(16, size=8, replace=False).tolist())
print("rebuilt from", pick, ":", decode({i: coded.chunks[i] for i in pick}, 8, 16, len(body)) == body)

# %% [markdown]
# ## Sampling against a withholding producer
#
# With 9 of 16 chunks withheld and 3 samples per client, one client
# detects the hiding with probability `1 - C(7,3)/C(16,3)`.

# %%
exact = detection_probability(16, 9, 3)
freq = empirical_detection(16, 8, 9, 3, 10_000, rng)
print(f"exact {exact} = {float(exact):.4f}, empirical over 10,000 trials {freq:.4f}")
for s in (1, 2, 3, 5, 8):
    print(f"  {s} samples: {float(detection_probability(16, 9, s)):.4f}")

withheld = rng.choice(16, size=9, replace=False)
server = ChunkServer(coded, withheld)
print("one client:", sample(server, coded.chunk_root, 16, 3, rng).verdict)

# %% [markdown]
# ## Incorrect coding
#
# A producer can also commit to chunks that are not a codeword.  Any `k`
# committed chunks whose re-encoding contradicts the root prove it.

# %%
chunks = list(coded.chunks)
chunks[15] = bytes(len(chunks[15]))
root = commit_chunks(chunks)
proof = prove_incorrect_coding(root, 8, 16, [(i, chunks[i], merkle_prove(chunks, i)) for i in range(8)])
print("coding proof verifies:", verify_incorrect_coding(proof.encode()), "|", len(proof.encode()), "bytes")
