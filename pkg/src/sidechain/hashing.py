"""Domain-separated hashing and binary Merkle trees.

Leaves are hashed as ``H(0x00 || data)`` and interior nodes as
``H(0x01 || left || right)``.  Trees pair nodes level by level and promote an
unpaired last node unchanged, which gives the same shape as the
Certificate-Transparency split at the largest power of two below ``n``.

Proof wire format::

    tree_size  u64 big-endian
    leaf_index u64 big-endian
    siblings   32 bytes each, leaf-to-root
"""

from __future__ import annotations

import hashlib
import struct
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Sequence

Digest = bytes

DIGEST_SIZE = 32
LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"

_hash_factory: Callable = hashlib.sha256


def set_hash_function(factory: Callable) -> None:
    """Swap the 256-bit hash used everywhere (e.g. ``hashlib.sha3_256``).

    All pinned test vectors assume SHA-256.
    """
    global _hash_factory
    if factory().digest_size != DIGEST_SIZE:
        raise ValueError("hash function must produce 32-byte digests")
    _hash_factory = factory


def hash_leaf(data: bytes) -> Digest:
    return _hash_factory(LEAF_PREFIX + data).digest()


def hash_node(left: Digest, right: Digest) -> Digest:
    return _hash_factory(NODE_PREFIX + left + right).digest()


EMPTY_TREE_ROOT = hash_leaf(b"")


def _fold_level(level: list[Digest]) -> list[Digest]:
    nxt = [hash_node(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
    if len(level) % 2:
        nxt.append(level[-1])
    return nxt


def merkle_root_of_hashes(hashes: Sequence[Digest]) -> Digest:
    """Root over already-hashed leaves."""
    if not hashes:
        return EMPTY_TREE_ROOT
    level = list(hashes)
    while len(level) > 1:
        level = _fold_level(level)
    return level[0]


def _split_point(n: int) -> int:
    # largest power of two strictly below n
    return 1 << ((n - 1).bit_length() - 1)


def merkle_root(leaves: Sequence[bytes], executor: Executor | None = None,
                chunk: int = 4096) -> Digest:
    """Merkle root over raw leaves; empty input gives ``hash_leaf(b"")``.

    With an ``executor`` the leaves are cut into power-of-two sized subtrees
    whose roots are computed independently and then combined, which yields
    the identical root.
    """
    if executor is None or len(leaves) <= chunk:
        return merkle_root_of_hashes([hash_leaf(x) for x in leaves])
    if chunk & (chunk - 1):
        raise ValueError("chunk must be a power of two")
    parts = [leaves[i:i + chunk] for i in range(0, len(leaves), chunk)]
    sub = list(executor.map(lambda p: merkle_root_of_hashes([hash_leaf(x) for x in p]), parts))
    return merkle_root_of_hashes(sub)


def combine_subtree_roots(roots: Sequence[Digest]) -> Digest:
    """Combine roots of consecutive, equally sized power-of-two subtrees
    (the last one may be smaller)."""
    return merkle_root_of_hashes(roots)


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    siblings: tuple[Digest, ...]
    tree_size: int

    def encode(self) -> bytes:
        return struct.pack(">QQ", self.tree_size, self.leaf_index) + b"".join(self.siblings)

    @classmethod
    def decode(cls, data: bytes) -> "MerkleProof":
        if len(data) < 16 or (len(data) - 16) % DIGEST_SIZE:
            raise ValueError("malformed Merkle proof encoding")
        size, index = struct.unpack_from(">QQ", data)
        sibs = tuple(data[i:i + DIGEST_SIZE] for i in range(16, len(data), DIGEST_SIZE))
        return cls(index, sibs, size)


def merkle_prove_hashes(hashes: Sequence[Digest], index: int) -> MerkleProof:
    n = len(hashes)
    if not 0 <= index < n:
        raise IndexError(f"leaf index {index} out of range for {n} leaves")
    siblings = []
    level = list(hashes)
    i = index
    while len(level) > 1:
        if i % 2 == 1:
            siblings.append(level[i - 1])
        elif i + 1 < len(level):
            siblings.append(level[i + 1])
        # an unpaired last node is promoted without a sibling
        level = _fold_level(level)
        i //= 2
    return MerkleProof(index, tuple(siblings), n)


def merkle_prove(leaves: Sequence[bytes], index: int) -> MerkleProof:
    return merkle_prove_hashes([hash_leaf(x) for x in leaves], index)


def root_from_proof(leaf_hash: Digest, proof: MerkleProof) -> Digest | None:
    """Recompute the root implied by ``proof``; ``None`` if its shape is wrong."""
    n, i = proof.tree_size, proof.leaf_index
    if n < 1 or not 0 <= i < n:
        return None
    node = leaf_hash
    sibs = iter(proof.siblings)
    used = 0
    width = n
    while width > 1:
        if i % 2 == 1:
            s = next(sibs, None)
            if s is None:
                return None
            node = hash_node(s, node)
            used += 1
        elif i + 1 < width:
            s = next(sibs, None)
            if s is None:
                return None
            node = hash_node(node, s)
            used += 1
        i //= 2
        width = (width + 1) // 2
    if used != len(proof.siblings):
        return None
    return node


def merkle_verify(root: Digest, leaf: bytes, proof: MerkleProof) -> bool:
    return root_from_proof(hash_leaf(leaf), proof) == root


def proof_length(tree_size: int, index: int) -> int:
    """Number of siblings on the path of ``index`` in a tree of ``tree_size``."""
    count, width, i = 0, tree_size, index
    while width > 1:
        if i % 2 == 1 or i + 1 < width:
            count += 1
        i //= 2
        width = (width + 1) // 2
    return count
