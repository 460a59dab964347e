"""Optimistic side chain with a parent-chain bridge, fraud proofs and a simulator.

Modules:

* :mod:`sidechain.hashing`, :mod:`sidechain.smt` - hashes, Merkle trees, sparse Merkle tree
* :mod:`sidechain.ledger` - UTXO transactions and block state transitions
* :mod:`sidechain.fraud` - single-transition fraud proofs (two schemes)
* :mod:`sidechain.bridge` - the parent-chain contract as a pure state machine
* :mod:`sidechain.parent` - parent chain forks, reorgs and censorship
* :mod:`sidechain.consensus` - producers, watchers and leader selection
* :mod:`sidechain.availability` - erasure coding and sampling
* :mod:`sidechain.harness` - scenarios, event log and verdicts
"""

__version__ = "0.1.0"
