from dataclasses import replace

import numpy as np
import pytest

from sidechain.bridge import (
    CHALLENGE_ONLY, FINALIZED, ORPHANED, PENDING, SETTLED, STAKED_SHUFFLE, BridgeCall,
    BridgeParams, BridgeState, CallContext, CallRejected, Deposit, Finalize, RegisterStake,
    SubmitBlock, SubmitFraudProof, Withdraw, apply_calls, decode_call, exec_call, halt_schedule,
    staked_shuffle_leader,
)
from sidechain.faults import burn_tx
from sidechain.fraud import generate_best_proof
from sidechain.hashing import merkle_prove
from sidechain.ledger import Output, PayToKey, SideBlock, assemble_block

from helpers import Chain, faulty_case, grown_chain, pay


class Contract:
    """Bridge state plus a cursor over parent heights."""

    def __init__(self, **params):
        self.state = BridgeState.genesis(BridgeParams(**params))
        self.at = 1

    def call(self, sender, action, at=None, prev=bytes(32)):
        ctx = CallContext(self.at if at is None else at, prev)
        self.state, events = exec_call(self.state, BridgeCall(sender, action), ctx)
        return events

    def reject(self, sender, action, at=None, prev=bytes(32)):
        before = self.state.digest()
        with pytest.raises(CallRejected) as info:
            self.call(sender, action, at, prev)
        assert self.state.digest() == before
        return info.value.reason

    def deposits(self, deposits: dict):
        for did in sorted(deposits)[len(self.state.deposits):]:
            recipient, amount = deposits[did]
            self.call("depositor", Deposit(recipient, amount))

    def submit(self, block: SideBlock, at=None):
        return self.call(block.header.producer_id, SubmitBlock(block.encoded, block.header.bond), at)

    def publish(self, chain: Chain, blocks=None):
        self.deposits(chain.deposits)
        for b in chain.blocks if blocks is None else blocks:
            self.submit(b)


def bonds_balance(st: BridgeState) -> bool:
    return st.bonds_submitted == (st.bonds_released + st.bonds_rewarded + st.bonds_burned
                                  + st.escrowed())


def burning_chain():
    ch = grown_chain(1, blocks=1)
    op, c = ch.owned("bob")[0]
    burn = burn_tx("bob", op, c, 7, "bob@parent")
    cop, cc = ch.owned("carol")[0]
    ch.add([pay("carol", [(cop, cc)], [Output(cc.output.value, PayToKey("dave"))]), burn])
    return ch, burn


def test_deposit_finalize_withdraw_lifecycle():
    ch, burn = burning_chain()
    bridge = Contract(delay=10)
    bridge.publish(ch)
    assert bridge.state.locked == 4000 and bridge.state.height == len(ch.blocks)
    tip = ch.blocks[-1]
    leaves = tip.tx_leaves()
    idx = leaves.index(burn.encoded)
    withdraw = Withdraw(burn.encoded, merkle_prove(leaves, idx), tip.hash)

    assert bridge.reject("bob@parent", withdraw) == "NotFinalized"
    assert bridge.reject("x", Finalize(tip.hash), at=20) == "AncestorNotFinal"
    assert bridge.reject("x", Finalize(ch.blocks[0].hash), at=10) == "TooEarly"
    for b in ch.blocks:
        ev, = bridge.call("x", Finalize(b.hash), at=11)
        assert ev["kind"] == "BlockFinalized" and ev["submitted_at"] == 1
    assert bridge.reject("x", Finalize(tip.hash), at=11) == "AlreadyFinalized"
    assert bridge.state.bonds_released == 100 * len(ch.blocks) and bridge.state.escrowed() == 0

    assert bridge.reject("mallory", withdraw) == "NotRecipient"
    wrong = Withdraw(burn.encoded, merkle_prove(leaves, (idx + 1) % len(leaves)), tip.hash)
    assert bridge.reject("bob@parent", wrong) == "BadInclusionProof"
    other = leaves[(idx + 1) % len(leaves)]
    assert bridge.reject("bob@parent", Withdraw(other, merkle_prove(leaves, (idx + 1) % len(leaves)),
                                                tip.hash)) == "BadInclusionProof"
    ev, = bridge.call("bob@parent", withdraw)
    assert ev["kind"] == "WithdrawalPaid" and ev["amount"] == 7
    assert bridge.state.locked == 4000 - 7 and bridge.state.paid_out == 7
    assert bridge.reject("bob@parent", withdraw) == "AlreadyPaid"


def test_submission_errors():
    ch = grown_chain(2, blocks=1)
    bridge = Contract()
    bridge.deposits(ch.deposits)
    b1, b2 = ch.blocks
    assert bridge.reject("prod", SubmitBlock(b2.encoded, 100)) == "NotExtendingTip"
    assert bridge.reject("prod", SubmitBlock(b1.encoded, 99)) == "WrongBond"
    assert bridge.reject("eve", SubmitBlock(b1.encoded, 100)) == "NotProducer"
    assert bridge.reject("prod", SubmitBlock(b1.encoded[:-3], 100)) == "MalformedBlock"
    shuffled = SideBlock(b1.header, tuple(reversed(b1.transactions)))
    assert bridge.reject("prod", SubmitBlock(shuffled.encoded, 100)) == "BodyRootMismatch"
    assert bridge.reject("depositor", Deposit("x", 0)) == "InvalidAmount"
    bridge.submit(b1)
    assert bridge.reject("prod", SubmitBlock(b1.encoded, 100)) == "NotExtendingTip"
    bridge.submit(b2)

    strict = Contract(k=8)
    strict.deposits(ch.deposits)
    assert strict.reject("prod", SubmitBlock(b1.encoded, 100)) == "MalformedHeader"


def extend(block: SideBlock, producer="alice") -> SideBlock:
    """A structurally valid child of ``block``; its state content is irrelevant to the bridge."""
    child, _ = assemble_block(grown_chain(0, blocks=0).states[0], [], producer, 100, block.header.k)
    hdr = replace(child.header, prev_header_hash=block.hash, height=block.header.height + 1)
    return SideBlock(hdr, child.transactions)


def test_fraud_proof_orphans_the_suffix_and_splits_bonds():
    case = faulty_case(5, "double_spend")
    bad = case.block
    child = extend(bad)
    grandchild = extend(child, producer="carol")
    bridge = Contract()
    bridge.publish(case.chain, case.chain.blocks + [bad, child, grandchild])
    honest_tip = case.chain.blocks[-1].hash
    proof = generate_best_proof(case.chain.history(), case.chain.state, bad,
                                case.chain.deposits).encode()

    assert bridge.reject("w", SubmitFraudProof(proof[:-1])) == "ProofInvalid"
    events = bridge.call("watcher", SubmitFraudProof(proof))
    fp = events[0]
    assert fp["kind"] == "FraudProven" and fp["scheme"] == "B" and fp["orphaned"] == 3
    assert fp["reward"] == 150 and fp["burned"] == 150
    assert [e["kind"] for e in events[1:]] == ["BlockOrphaned"] * 3
    st = bridge.state
    assert st.tip == honest_tip and st.status(bad.hash) == ORPHANED
    assert st.header(bad.hash) is None and st.status(honest_tip) == PENDING
    assert bonds_balance(st)
    assert bridge.reject("watcher", SubmitFraudProof(proof)) == "UnknownHeader"
    # the honest chain can be extended again at the freed height
    bridge.submit(extend(case.chain.blocks[-1]))


def test_fraud_proofs_cannot_touch_valid_or_final_blocks():
    case = faulty_case(6, "value_imbalance")
    bridge = Contract(delay=1)
    bridge.publish(case.chain, case.chain.blocks + [case.block])
    proof = generate_best_proof(case.chain.history(), case.chain.state, case.block,
                                case.chain.deposits).encode()
    # retarget at the valid parent: the header hash field follows the 2-byte tag
    valid = case.chain.blocks[-1].hash
    forged = proof[:2] + valid + proof[34:]
    assert bridge.reject("w", SubmitFraudProof(forged)) == "ProofInvalid"
    bridge.call("x", Finalize(case.chain.blocks[0].hash), at=5)
    # a proof naming a finalized block is refused before verification
    fake = proof[:2] + case.chain.blocks[0].hash + proof[34:]
    assert bridge.reject("w", SubmitFraudProof(fake)) == "AlreadyFinalized"


def test_halting_schedule():
    ch = grown_chain(3, blocks=3)
    bridge = Contract(delay=5, challenge_window=10, halt_height=3)
    bridge.deposits(ch.deposits)
    b1, b2, b3 = ch.blocks[:3]
    bridge.submit(b1, at=1)
    assert halt_schedule(bridge.state, 2) == "Active"
    bridge.submit(b2, at=2)  # height halt_height - 1 starts the halt
    assert bridge.state.halt_started_at == 2
    assert halt_schedule(bridge.state, 11) == CHALLENGE_ONLY
    assert halt_schedule(bridge.state, 12) == SETTLED
    assert bridge.reject("prod", SubmitBlock(b3.encoded, 100), at=3) == "ChainHalted"
    bridge.call("x", Finalize(b1.hash), at=6)
    # the last block waits for settlement even after its own delay
    assert bridge.reject("x", Finalize(b2.hash), at=9) == "TooEarly"
    assert bridge.reject("x", Finalize(b2.hash), at=11) == "TooEarly"
    bridge.call("x", Finalize(b2.hash), at=12)
    assert bridge.state.status(b2.hash) == FINALIZED and bonds_balance(bridge.state)


def test_settlement_releases_blocks_without_waiting_for_delay():
    ch = grown_chain(4, blocks=1)
    bridge = Contract(delay=100, challenge_window=3, halt_height=3)
    bridge.publish(ch)
    assert bridge.state.halt_started_at == 1
    bridge.call("x", Finalize(ch.blocks[0].hash), at=4)
    bridge.call("x", Finalize(ch.blocks[1].hash), at=4)


def test_staked_shuffle_leader():
    ch = grown_chain(7, blocks=0)
    b1 = ch.blocks[0]
    bridge = Contract(leader_mode=STAKED_SHUFFLE)
    bridge.deposits(ch.deposits)
    prev = bytes.fromhex("ab" * 32)
    assert bridge.reject("prod", SubmitBlock(b1.encoded, 100), prev=prev) == "NoStakers"
    for s in ("prod", "zed", "amy"):
        bridge.call(s, RegisterStake())
    assert bridge.reject("amy", RegisterStake()) == "AlreadyStaked"
    leader = staked_shuffle_leader(["zed", "prod", "amy"], prev, 1)
    assert leader == staked_shuffle_leader(["amy", "prod", "zed"], prev, 1)
    # find a parent hash under which "prod" leads, and one where it does not
    hashes = [bytes([i]) * 32 for i in range(64)]
    leads = [h for h in hashes if staked_shuffle_leader(["amy", "prod", "zed"], h, 1) == "prod"]
    others = [h for h in hashes if h not in leads]
    assert leads and others
    assert bridge.reject("prod", SubmitBlock(b1.encoded, 100), prev=others[0]) == "NotLeader"
    bridge.call("prod", SubmitBlock(b1.encoded, 100), prev=leads[0])
    counts = {s: 0 for s in ("amy", "prod", "zed")}
    for i in range(3000):
        counts[staked_shuffle_leader(list(counts), i.to_bytes(32, "big"), 5)] += 1
    assert all(abs(c / 3000 - 1 / 3) < 0.04 for c in counts.values())


def test_calls_roundtrip_and_state_digest():
    ch, burn = burning_chain()
    tip = ch.blocks[-1]
    actions = [SubmitBlock(tip.encoded, 100), Deposit("r", 5), SubmitFraudProof(b"\x01\x02xyz"),
               Finalize(tip.hash), Withdraw(burn.encoded, merkle_prove(tip.tx_leaves(), 0), tip.hash),
               RegisterStake()]
    for nonce, a in enumerate(actions):
        call = BridgeCall("s", a, nonce)
        assert decode_call(call.encoded) == call
    assert len({BridgeCall("s", a).call_id for a in actions}) == len(actions)

    a, b = Contract(), Contract()
    a.call("d", Deposit("r", 5))
    assert a.state.digest() != b.state.digest()
    b.call("d", Deposit("r", 5))
    assert a.state.encode() == b.state.encode()
    copy = a.state.copy()
    a.call("d", Deposit("r", 1))
    assert copy.digest() == b.state.digest()


def test_apply_calls_records_rejections_in_order():
    st = BridgeState.genesis()
    calls = [BridgeCall("d", Deposit("r", 5)), BridgeCall("d", Deposit("r", 0)),
             BridgeCall("x", Finalize(bytes(32)))]
    st2, events = apply_calls(st, calls, CallContext(3))
    assert [e["kind"] for e in events] == ["DepositRegistered", "CallRejected", "CallRejected"]
    assert [e.get("reason") for e in events[1:]] == ["InvalidAmount", "UnknownHeader"]
    assert all(e["call"] == c.call_id.hex() for e, c in zip(events, calls))
    assert st.locked == 0 and st2.locked == 5


@pytest.mark.parametrize("seed", range(6))
def test_bond_and_peg_accounting_under_random_calls(seed):
    """Random interleavings of submissions, finalizations and fraud proofs."""
    rng = np.random.default_rng(seed)
    case = faulty_case(seed, ("value_imbalance", "double_spend", "theft")[seed % 3])
    ch = case.chain
    proof = generate_best_proof(ch.history(), ch.state, case.block, ch.deposits).encode()
    queue = ch.blocks + [case.block, extend(case.block), extend(extend(case.block))]
    bridge = Contract(delay=int(rng.integers(1, 4)))
    bridge.deposits(ch.deposits)
    at = 1
    for _ in range(40):
        at += int(rng.integers(0, 2))
        r = rng.random()
        st = bridge.state
        try:
            if r < 0.4 and st.height < len(queue):
                block = queue[st.height]
                bridge.submit(block, at)
                if block is case.block:
                    # a live watcher answers in the same parent block
                    bridge.call("w", SubmitFraudProof(proof), at)
            elif r < 0.7 and st.pending():
                bridge.call("f", Finalize(st.pending()[0]), at)
            else:
                bridge.call("d", Deposit("late", int(rng.integers(1, 50))), at)
        except CallRejected:
            pass
        st = bridge.state
        assert bonds_balance(st)
        assert st.locked == sum(a for _, a in st.deposits) - st.paid_out
        # a watched invalid block is never finalized, nor anything above it
        assert st.status(case.block.hash) in (None, ORPHANED)
        assert st.finalized_height <= len(ch.blocks)
