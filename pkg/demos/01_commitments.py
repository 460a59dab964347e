# %% [markdown]
# # Commitments: Merkle trees and the sparse state tree
#
# Side blocks commit to their transactions with a binary Merkle tree and to
# the UTXO set with a sparse Merkle tree keyed by 256-bit outpoint keys.
# Both use domain-separated SHA-256, so a leaf can never pose as a node.

# %%
import numpy as np

from sidechain.hashing import merkle_prove, merkle_root, merkle_verify, proof_length
from sidechain.smt import SparseMerkleTree, smt_verify

# %% [markdown]
# ## Transaction tree
#
# An unpaired node is promoted to the next level instead of being
# duplicated, so seven leaves give proofs of two or three siblings.

# %%
leaves = [f"tx-{i}".encode() for i in range(7)]
root = merkle_root(leaves)
print("root", root.hex()[:16], "...")
for i in range(len(leaves)):
    p = merkle_prove(leaves, i)
    assert merkle_verify(root, leaves[i], p)
    print(f"leaf {i}: {len(p.siblings)} siblings (expected {proof_length(7, i)}), "
          f"{len(p.encode())} bytes on the wire")

# %% [markdown]
# A proof for one leaf does not verify another leaf, and any flipped bit in
# a sibling breaks it.

# %%
p3 = merkle_prove(leaves, 3)
print("leaf 4 with leaf 3's proof:", merkle_verify(root, leaves[4], p3))

# %% [markdown]
# ## State tree
#
# The sparse tree is persistent: `set` returns a new tree, and the old root
# stays valid.  Proofs cover both membership and absence.

# %%
rng = np.random.default_rng(0)
keys = [rng.bytes(32) for _ in range(1000)]
tree = SparseMerkleTree.empty()
for k in keys:
    tree = tree.set(k, rng.bytes(32))
print("entries:", len(tree), "root:", tree.root.hex()[:16], "...")

present = tree.prove(keys[17])
absent = tree.prove(rng.bytes(32))
print("membership verifies:", smt_verify(tree.root, present),
      "| size", len(present.encode()), "bytes")
print("absence verifies:", smt_verify(tree.root, absent), "| value", absent.value_hash)

# %% [markdown]
# ## Partial trees
#
# A verifier that holds only a root can replay updates if it is handed the
# openings along the touched paths.  This is what scheme-A fraud proofs
# ship.

# %%
record = {}
after = tree.set(keys[5], bytes(32), record=record).remove(keys[6], record)
partial = SparseMerkleTree.from_witness(tree.root, record)
partial = partial.set(keys[5], bytes(32)).remove(keys[6])
print("openings:", len(record), "| partial replay matches:", partial.root == after.root)
