"""Forged and corrupted fraud proofs aimed at valid committed blocks."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from sidechain.fraud import (
    FraudProofB, FraudProofError, NoSuchOutput, OutputMismatch, PriorSpend, generate_best_proof,
    generate_proof_a, verify_fraud_proof,
)
from sidechain.hashing import merkle_prove
from sidechain.ledger import BlockInvalid, outpoint_key
from sidechain.smt import SmtProof

from helpers import Chain, faulty_case


def _flip(raw: bytes, rng: np.random.Generator, flips: int = 1) -> bytes:
    b = bytearray(raw)
    for _ in range(flips):
        i = int(rng.integers(len(b)))
        b[i] ^= 1 << int(rng.integers(8))
    return bytes(b)


def _spending_inputs(block):
    return [(ti, ii) for ti, tx in enumerate(block.transactions) for ii, _ in enumerate(tx.inputs)]


def _leaf(block, ti):
    leaves = block.tx_leaves()
    return leaves[ti], merkle_prove(leaves, ti)


class Forger:
    """Produces adversarial proof bytes against the tip of a valid ``chain``.

    ``donor`` is an invalid block on another chain whose genuine proof gets
    retargeted at the valid tip.
    """

    STYLES = ("honest_a", "flip_a", "prior_spend", "output_mismatch", "no_such_output",
              "no_such_output_smt", "transplant", "flip_donor", "garbage", "truncate")

    def __init__(self, chain: Chain, seed: int):
        self.chain = chain
        self.block = chain.blocks[-1]
        self.prestate = chain.states[-2]
        self.committed = chain.committed()
        self.inputs = _spending_inputs(self.block)
        donor = faulty_case(seed, "value_imbalance")
        self.donor = generate_best_proof(donor.chain.history(), donor.chain.state, donor.block,
                                         donor.chain.deposits).encode()

    def honest_a(self, rng) -> bytes:
        h = self.block.header
        seg = int(rng.integers(len(h.intermediate_roots) + 1))
        return generate_proof_a(self.prestate, self.block, self.chain.deposits,
                                BlockInvalid("forced", segment=seg)).encode()

    def _b(self, rng, make_ref) -> bytes:
        ti, ii = self.inputs[int(rng.integers(len(self.inputs)))]
        raw, mp = _leaf(self.block, ti)
        return FraudProofB(self.block.header.hash, ti, raw, mp, ii, make_ref(ti, ii)).encode()

    def prior_spend(self, rng) -> bytes:
        def ref(ti, ii):
            # any committed input at or before this one; none spends the same outpoint
            cands = [(blk, t, i) for blk in self.chain.blocks
                     for t, i in _spending_inputs(blk)
                     if blk is not self.block or (t, i) <= (ti, ii)]
            blk, t, i = cands[int(rng.integers(len(cands)))]
            raw, mp = _leaf(blk, t)
            return PriorSpend(blk.header.height, t, i, raw, mp)
        return self._b(rng, ref)

    def output_mismatch(self, rng) -> bytes:
        def ref(ti, ii):
            claim = self.block.transactions[ti].inputs[ii].claim
            blk = self.chain.blocks[claim.height - 1]
            raw, mp = _leaf(blk, claim.tx_index)
            return OutputMismatch(raw, mp)
        return self._b(rng, ref)

    def no_such_output(self, rng) -> bytes:
        return self._b(rng, lambda ti, ii: NoSuchOutput())

    def no_such_output_smt(self, rng) -> bytes:
        def ref(ti, ii):
            op = self.block.transactions[ti].inputs[ii].outpoint
            p = self.prestate.smt.prove(outpoint_key(op))
            # strip the value so it reads as an absence claim
            return NoSuchOutput(SmtProof(p.key, None, p.siblings))
        return self._b(rng, ref)

    def transplant(self, rng) -> bytes:
        raw = bytearray(self.donor)
        raw[2:34] = self.block.header.hash
        return bytes(raw)

    def flip_a(self, rng) -> bytes:
        return _flip(self.honest_a(rng), rng, int(rng.integers(1, 4)))

    def flip_donor(self, rng) -> bytes:
        return _flip(self.transplant(rng), rng, int(rng.integers(1, 4)))

    def garbage(self, rng) -> bytes:
        head = self.donor[:34] if rng.random() < 0.5 else b""
        return head + rng.bytes(int(rng.integers(0, 300)))

    def truncate(self, rng) -> bytes:
        src = self.honest_a(rng) if rng.random() < 0.5 else self.transplant(rng)
        return src[:int(rng.integers(len(src)))]

    def forge(self, rng) -> tuple[str, bytes]:
        styles = self.STYLES if self.inputs else tuple(
            s for s in self.STYLES if s not in ("prior_spend", "output_mismatch", "no_such_output",
                                                "no_such_output_smt"))
        style = styles[int(rng.integers(len(styles)))]
        return style, getattr(self, style)(rng)

    def accepted(self, raw: bytes) -> bool:
        """True iff the verifier convicts the valid tip (or anything else)."""
        try:
            return verify_fraud_proof(self.committed, raw).valid
        except FraudProofError:
            return False
