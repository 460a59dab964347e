# %% [markdown]
# # The bridge contract
#
# The contract is a pure fold: `exec_call(state, call, ctx)` returns a new
# state and events, or raises `CallRejected` leaving the input untouched.
# Here we walk one deposit through a side block, finalization and a
# withdrawal, then roll back an invalid suffix with a fraud proof.

# %%
from dataclasses import replace

from sidechain.bridge import (
    BridgeCall, BridgeParams, BridgeState, CallContext, CallRejected, Deposit, Finalize,
    SubmitBlock, SubmitFraudProof, Withdraw, exec_call,
)
from sidechain.faults import burn_tx, inject_fault
from sidechain.fraud import ChainHistory, generate_best_proof
from sidechain.hashing import merkle_prove
from sidechain.ledger import DepositClaim, LedgerState, Output, PayToKey, SideBlock, Transaction, assemble_block

state = BridgeState.genesis(BridgeParams(bond=100, delay=5, k=4))


def call(sender, action, at):
    global state
    state, events = exec_call(state, BridgeCall(sender, action), CallContext(at))
    for e in events:
        print(f"  parent {at:>2}  {e['kind']:<17}",
              {k: v for k, v in e.items() if k in ("height", "amount", "reward", "burned", "orphaned")})


# %% [markdown]
# ## Deposit, claim, burn

# %%
call("alice@parent", Deposit("alice", 1000), at=1)
claim = Transaction(DepositClaim(0, 1000, "alice"), (), (Output(1000, PayToKey("alice")),))
side0 = LedgerState.genesis()
b1, side1 = assemble_block(side0, [claim], "prod", 100, 4)
call("prod", SubmitBlock(b1.encoded, 100), at=2)
(op, c), = side1.utxo_entries()
burn = burn_tx("alice", op, c, 400, "alice@parent")
b2, side2 = assemble_block(side1, [burn], "prod", 100, 4)
call("prod", SubmitBlock(b2.encoded, 100), at=3)

# %% [markdown]
# Finalization waits `delay` parent blocks after submission.

# %%
try:
    call("anyone", Finalize(b1.hash), at=4)
except CallRejected as exc:
    print("  rejected:", exc.reason)
call("anyone", Finalize(b1.hash), at=7)
call("anyone", Finalize(b2.hash), at=8)
call("alice@parent", Withdraw(burn.encoded, merkle_prove(b2.tx_leaves(), 0), b2.hash), at=9)
print("locked:", state.locked, "| paid out:", state.paid_out)

# %% [markdown]
# ## Rolling back an invalid suffix
#
# Three blocks are pending when a watcher proves the first one invalid.
# All three are orphaned; the prover gets half of the 300 in bonds and the
# rest is burned.

# %%
own = [(o, cl) for o, cl in side2.utxo_entries() if cl.output.predicate == PayToKey("alice")]
bad = inject_fault("value_imbalance", side2, [], own=own, producer_id="mallory", k=4)
call("mallory", SubmitBlock(bad.encoded, 100), at=10)
tip = bad
for _ in range(2):
    child, _ = assemble_block(side0, [], "mallory", 100, 4)
    child = SideBlock(replace(child.header, prev_header_hash=tip.hash, height=tip.header.height + 1), ())
    call("mallory", SubmitBlock(child.encoded, 100), at=11)
    tip = child
proof = generate_best_proof(ChainHistory([b1, b2]), side2, bad, state.authorized_deposits())
call("watcher", SubmitFraudProof(proof.encode()), at=12)
print("bond totals:", state.bonds_submitted, "=", state.bonds_released, "released +",
      state.bonds_rewarded, "rewarded +", state.bonds_burned, "burned +", state.escrowed(), "escrowed")
