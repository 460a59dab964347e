# %% [markdown]
# # Parent-chain forks and the bridge fold
#
# Each miner keeps a fork view: the blocks it knows, a longest-chain tip
# with first-seen tie breaking, and a mempool of bridge calls.  The bridge
# state at any block is the fold of the contract over that block's
# ancestry, so two miners on the same tip always agree bit for bit.

# %%
from sidechain.bridge import BridgeCall, BridgeParams, Deposit
from sidechain.parent import BridgeFold, CensorSender, ForkView, mine, replay_bridge

fold = BridgeFold(BridgeParams())
alice, bob = ForkView("alice", fold), ForkView("bob", fold)


def gossip(block, *views):
    for v in views:
        change = v.deliver(block)
        if change and change.disconnected:
            print(f"  {v.owner} reorg: -{len(change.disconnected)} +{len(change.connected)}")


# %% [markdown]
# ## A tie, then a resolution
#
# Both miners find a block at height 1 at the same time.  Each keeps its
# own until alice extends hers; bob then reorgs and his orphaned call goes
# back into his mempool.

# %%
for v in (alice, bob):
    v.submit(BridgeCall(v.owner, Deposit(v.owner, 10)))
a1, b1 = mine(alice), mine(bob)
gossip(a1, bob)
gossip(b1, alice)
print("tips differ after the tie:", alice.tip != bob.tip)
a2 = mine(alice)
gossip(a2, bob)
print("tips agree:", alice.tip == bob.tip, "| bob's mempool:", [c.sender for c in bob.pending_calls()])
print("bridge digests equal:", alice.bridge().digest() == bob.bridge().digest())

# %% [markdown]
# The memoized fold matches a from-scratch replay of the canonical chain.

# %%
print("fold == replay:", fold.state(alice.tip).digest() == replay_bridge(alice.chain(), fold.params).digest())

# %% [markdown]
# ## Censorship
#
# A censoring policy drops a sender's calls from blocks in a height window.
# The call is included as soon as the window closes.

# %%
censor = CensorSender(frozenset({"bob"}), from_height=alice.height + 1, duration_blocks=3)
alice.submit(BridgeCall("bob", Deposit("bob", 5), 1))
alice.submit(BridgeCall("carol", Deposit("carol", 5)))
for _ in range(5):
    b = mine(alice, [censor])
    print(f"  height {b.height}: calls from {[c.sender for c in b.calls]}")
