# %% [markdown]
# # The side ledger and its fraud proofs
#
# A side block is a list of UTXO transactions plus intermediate state roots
# every `k` transactions.  Anyone holding the previous state can replay a
# block.  When a replay fails, the failure is compressed into a proof that
# a light client (the bridge contract) can check against headers alone.

# %%
import numpy as np

from sidechain.faults import FAULT_KINDS, inject_fault
from sidechain.fraud import (
    ChainHistory, HeaderChain, generate_best_proof, generate_proof_a, locate_failure,
    verify_fraud_proof,
)
from sidechain.ledger import (
    DepositClaim, LedgerState, Output, PayToKey, Transaction, apply_block, assemble_block,
)

# %% [markdown]
# ## A small valid chain
#
# Deposits registered on the parent chain are claimed on the side chain by
# `DepositClaim` transactions.  Each input later carries a *claim*: the
# output it spends and where that output was created.

# %%
deposits = {0: ("alice", 500), 1: ("bob", 300)}
claims = [Transaction(DepositClaim(i, amt, who), (), (Output(amt, PayToKey(who)),))
          for i, (who, amt) in deposits.items()]
state0 = LedgerState.genesis()
block1, state1 = assemble_block(state0, claims, "prod", bond=100, k=4)
assert apply_block(state0, block1, deposits).smt_root == state1.smt_root
print("height", block1.header.height, "| circulating", state1.circulating)

# %% [markdown]
# ## Injecting each fault
#
# The fault injector builds blocks that decode and Merkleize correctly, so
# only replay can tell them apart from honest ones.

# %%
rng = np.random.default_rng(1)
own = [(op, c) for op, c in state1.utxo_entries() if c.output.predicate == PayToKey("alice")]
victims = [(op, c) for op, c in state1.utxo_entries() if c.output.predicate == PayToKey("bob")]
history = ChainHistory([block1])
for kind in FAULT_KINDS:
    pool = [] if kind != "bad_intermediate_root" else [
        Transaction(DepositClaim(2 + j, 5, "erin"), (), (Output(5, PayToKey("erin")),))
        for j in range(5)]
    deps = dict(deposits) | {2 + j: ("erin", 5) for j in range(len(pool))}
    bad = inject_fault(kind, state1, pool, own=own, victims=victims, deposits=deps,
                       producer_id="mallory", k=4, rng=rng)
    failure = locate_failure(state1, bad, deps)
    best = generate_best_proof(history, state1, bad, deps, failure)
    full = generate_proof_a(state1, bad, deps, failure)
    chain = HeaderChain([block1.header, bad.header], deps)
    verdict = verify_fraud_proof(chain, best.encode())
    print(f"{kind:<22} -> {failure.reason:<24} {type(best).__name__} "
          f"{len(best.encode()):>5} bytes (replay proof {len(full.encode())} bytes), "
          f"verdict {verdict.reason}")
