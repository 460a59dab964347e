"""Sparse Merkle tree over 256-bit keys.

The tree is persistent: every update returns a new tree sharing unchanged
subtrees with the old one.  A subtree holding a single leaf is represented by
that leaf, so an update touches O(log n) nodes instead of 256; empty subtrees
hash to 32 zero bytes.

    leaf digest  = hash_leaf(key || value_hash)
    inner digest = hash_node(left, right)

A tree can also be *partial*: rebuilt from a root digest and a set of
hash-authenticated node openings, with everything else left as opaque stubs.
Reading or updating a partial tree raises :class:`MissingWitness` the moment
it needs a node that was not revealed.  Passing a ``record`` dict to an
operation on a full tree collects exactly the openings a partial tree would
need to repeat it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Any, Iterator, Optional

from .hashing import DIGEST_SIZE, Digest, hash_leaf, hash_node

KEY_BITS = 256
EMPTY_DIGEST = bytes(DIGEST_SIZE)


class MissingWitness(Exception):
    """A partial tree needed a node that the witness did not reveal."""


class _Empty:
    __slots__ = ()
    digest = EMPTY_DIGEST

    def __repr__(self):
        return "Empty"


EMPTY = _Empty()


class Leaf:
    __slots__ = ("key", "value_hash", "payload", "digest")

    def __init__(self, key: bytes, value_hash: bytes, payload: Any = None):
        self.key = key
        self.value_hash = value_hash
        self.payload = payload
        self.digest = hash_leaf(key + value_hash)


class Node:
    __slots__ = ("left", "right", "digest")

    def __init__(self, left, right):
        self.left = left
        self.right = right
        self.digest = hash_node(left.digest, right.digest)


class Stub:
    __slots__ = ("digest",)

    def __init__(self, digest: bytes):
        self.digest = digest


# Opening wire tags
OPEN_LEAF = 0
OPEN_NODE = 1


def _bit(key: bytes, depth: int) -> int:
    return (key[depth >> 3] >> (7 - (depth & 7))) & 1


def _open(node, record):
    if node.__class__ is Stub:
        raise MissingWitness(node.digest.hex())
    if record is not None:
        if node.__class__ is Leaf:
            record[node.digest] = (OPEN_LEAF, node.key, node.value_hash)
        elif node.__class__ is Node:
            record[node.digest] = (OPEN_NODE, node.left.digest, node.right.digest)
    return node


def _get(node, key, record):
    depth = 0
    while True:
        node = _open(node, record)
        cls = node.__class__
        if cls is Node:
            node = node.right if _bit(key, depth) else node.left
            depth += 1
        elif cls is Leaf:
            return node if node.key == key else None
        else:
            return None


def _split(existing: Leaf, new: Leaf, depth: int):
    if depth >= KEY_BITS:
        raise ValueError("distinct keys collided over all 256 bits")
    b_old, b_new = _bit(existing.key, depth), _bit(new.key, depth)
    if b_old == b_new:
        child = _split(existing, new, depth + 1)
        return Node(EMPTY, child) if b_new else Node(child, EMPTY)
    return Node(existing, new) if b_new else Node(new, existing)


def _insert(node, leaf: Leaf, depth: int, record):
    node = _open(node, record)
    cls = node.__class__
    if cls is Node:
        if _bit(leaf.key, depth):
            return Node(node.left, _insert(node.right, leaf, depth + 1, record))
        return Node(_insert(node.left, leaf, depth + 1, record), node.right)
    if cls is Leaf and node.key != leaf.key:
        return _split(node, leaf, depth)
    return leaf


def _collapse(left, right, record):
    if left is EMPTY and right is EMPTY:
        return EMPTY
    if left is EMPTY or right is EMPTY:
        other = _open(right if left is EMPTY else left, record)
        if other.__class__ is Leaf:
            return other
    return Node(left, right)


def _delete(node, key: bytes, depth: int, record):
    node = _open(node, record)
    cls = node.__class__
    if cls is Node:
        if _bit(key, depth):
            new = _delete(node.right, key, depth + 1, record)
            if new is node.right:
                return node
            return _collapse(node.left, new, record)
        new = _delete(node.left, key, depth + 1, record)
        if new is node.left:
            return node
        return _collapse(new, node.right, record)
    if cls is Leaf and node.key == key:
        return EMPTY
    return node


def _check_key(key: bytes) -> None:
    if len(key) != DIGEST_SIZE:
        raise ValueError("SMT keys are 32-byte digests")


@dataclass(frozen=True)
class SmtProof:
    """Single-key membership (``value_hash`` set) or non-membership proof.

    ``siblings`` run from the root down to the terminal position.  A
    non-membership proof ends either in an empty subtree or in a leaf for a
    different key sharing the path (``other_key``/``other_value_hash``).
    """
    key: bytes
    value_hash: Optional[bytes]
    siblings: tuple[bytes, ...]
    other_key: Optional[bytes] = None
    other_value_hash: Optional[bytes] = None

    def encode(self) -> bytes:
        depth = len(self.siblings)
        bitmap = bytearray((depth + 7) // 8)
        dense = []
        for i, s in enumerate(self.siblings):
            if s != EMPTY_DIGEST:
                bitmap[i >> 3] |= 0x80 >> (i & 7)
                dense.append(s)
        out = [self.key]
        if self.value_hash is not None:
            out += [b"\x01", self.value_hash]
        elif self.other_key is not None:
            out += [b"\x02", self.other_key, self.other_value_hash]
        else:
            out.append(b"\x00")
        out += [struct.pack(">H", depth), bytes(bitmap), *dense]
        return b"".join(out)

    @classmethod
    def decode_from(cls, data: bytes, pos: int = 0) -> tuple["SmtProof", int]:
        def take(n):
            nonlocal pos
            if pos + n > len(data):
                raise ValueError("truncated SMT proof")
            chunk = data[pos:pos + n]
            pos += n
            return chunk

        key = take(32)
        tag = take(1)[0]
        value_hash = other_key = other_vh = None
        if tag == 1:
            value_hash = take(32)
        elif tag == 2:
            other_key, other_vh = take(32), take(32)
        elif tag != 0:
            raise ValueError("bad SMT proof terminal tag")
        (depth,) = struct.unpack(">H", take(2))
        if depth > KEY_BITS:
            raise ValueError("SMT proof deeper than key size")
        bitmap = take((depth + 7) // 8)
        if depth % 8 and bitmap[-1] & (0xFF >> (depth % 8)):
            raise ValueError("non-canonical SMT proof bitmap")
        sibs = []
        for i in range(depth):
            if bitmap[i >> 3] & (0x80 >> (i & 7)):
                s = take(32)
                if s == EMPTY_DIGEST:
                    raise ValueError("non-canonical SMT proof sibling")
                sibs.append(s)
            else:
                sibs.append(EMPTY_DIGEST)
        return cls(key, value_hash, tuple(sibs), other_key, other_vh), pos

    @classmethod
    def decode(cls, data: bytes) -> "SmtProof":
        proof, pos = cls.decode_from(data)
        if pos != len(data):
            raise ValueError("trailing bytes after SMT proof")
        return proof


def smt_verify(root: bytes, proof: SmtProof) -> bool:
    """Check a membership or non-membership proof against ``root``."""
    key = proof.key
    depth = len(proof.siblings)
    if len(key) != DIGEST_SIZE or depth > KEY_BITS:
        return False
    if proof.value_hash is not None:
        if proof.other_key is not None:
            return False
        node = hash_leaf(key + proof.value_hash)
    elif proof.other_key is not None:
        other = proof.other_key
        if other == key or proof.other_value_hash is None:
            return False
        if any(_bit(other, d) != _bit(key, d) for d in range(depth)):
            return False
        node = hash_leaf(other + proof.other_value_hash)
    else:
        node = EMPTY_DIGEST
    for d in range(depth - 1, -1, -1):
        sib = proof.siblings[d]
        node = hash_node(sib, node) if _bit(key, d) else hash_node(node, sib)
    return node == root


class SparseMerkleTree:
    """Persistent sparse Merkle tree; all mutators return a new tree."""

    __slots__ = ("_root", "size")

    def __init__(self, root=EMPTY, size: int = 0):
        self._root = root
        self.size = size

    @classmethod
    def empty(cls) -> "SparseMerkleTree":
        return cls()

    @classmethod
    def from_witness(cls, root: bytes, openings: dict) -> "SparseMerkleTree":
        """Partial tree rooted at ``root`` revealing only ``openings``.

        ``openings`` maps a node digest to ``(OPEN_LEAF, key, value_hash)`` or
        ``(OPEN_NODE, left_digest, right_digest)``; every opening is checked
        against its digest.
        """

        def build(digest, depth):
            if digest == EMPTY_DIGEST:
                return EMPTY
            op = openings.get(digest)
            if op is None:
                return Stub(digest)
            if op[0] == OPEN_LEAF:
                leaf = Leaf(op[1], op[2])
                if leaf.digest != digest:
                    raise ValueError("leaf opening does not match its digest")
                return leaf
            if depth >= KEY_BITS:
                raise ValueError("witness deeper than key size")
            node = Node(build(op[1], depth + 1), build(op[2], depth + 1))
            if node.digest != digest:
                raise ValueError("node opening does not match its digest")
            return node

        return cls(build(root, 0), -1)

    @property
    def root(self) -> bytes:
        return self._root.digest

    def __len__(self) -> int:
        return self.size

    def get(self, key: bytes, record: dict | None = None) -> Optional[Leaf]:
        return _get(self._root, key, record)

    def value_hash(self, key: bytes, record: dict | None = None) -> Optional[bytes]:
        leaf = _get(self._root, key, record)
        return None if leaf is None else leaf.value_hash

    def __contains__(self, key: bytes) -> bool:
        return _get(self._root, key, None) is not None

    def set(self, key: bytes, value_hash: bytes, payload: Any = None,
            record: dict | None = None) -> "SparseMerkleTree":
        _check_key(key)
        existed = self.size >= 0 and _get(self._root, key, None) is not None
        root = _insert(self._root, Leaf(key, value_hash, payload), 0, record)
        size = -1 if self.size < 0 else self.size + (0 if existed else 1)
        return SparseMerkleTree(root, size)

    def remove(self, key: bytes, record: dict | None = None) -> "SparseMerkleTree":
        _check_key(key)
        root = _delete(self._root, key, 0, record)
        if root is self._root:
            return self
        return SparseMerkleTree(root, -1 if self.size < 0 else self.size - 1)

    def prove(self, key: bytes) -> SmtProof:
        _check_key(key)
        siblings = []
        node = self._root
        depth = 0
        while True:
            node = _open(node, None)
            if node.__class__ is Node:
                if _bit(key, depth):
                    siblings.append(node.left.digest)
                    node = node.right
                else:
                    siblings.append(node.right.digest)
                    node = node.left
                depth += 1
                continue
            if node.__class__ is Leaf:
                if node.key == key:
                    return SmtProof(key, node.value_hash, tuple(siblings))
                return SmtProof(key, None, tuple(siblings), node.key, node.value_hash)
            return SmtProof(key, None, tuple(siblings))

    def leaves(self) -> Iterator[Leaf]:
        stack = [self._root]
        while stack:
            node = stack.pop()
            if node.__class__ is Node:
                stack.append(node.right)
                stack.append(node.left)
            elif node.__class__ is Leaf:
                yield node
            elif node.__class__ is Stub:
                raise MissingWitness(node.digest.hex())


def smt_update(tree: SparseMerkleTree, key: bytes, value_hash: Optional[bytes]) -> SparseMerkleTree:
    """Insert/overwrite ``key`` or, with ``value_hash=None``, delete it."""
    if value_hash is None:
        return tree.remove(key)
    return tree.set(key, value_hash)


def smt_prove(tree: SparseMerkleTree, key: bytes) -> SmtProof:
    return tree.prove(key)


def encode_openings(openings: dict) -> bytes:
    out = [struct.pack(">I", len(openings))]
    for digest in sorted(openings):
        tag, a, b = openings[digest]
        out += [bytes([tag]), a, b]
    return b"".join(out)


def decode_openings(data: bytes, pos: int = 0) -> tuple[dict, int]:
    if pos + 4 > len(data):
        raise ValueError("truncated openings")
    (count,) = struct.unpack_from(">I", data, pos)
    pos += 4
    if pos + count * 65 > len(data):
        raise ValueError("truncated openings")
    openings = {}
    prev = None
    for _ in range(count):
        tag = data[pos]
        a, b = data[pos + 1:pos + 33], data[pos + 33:pos + 65]
        pos += 65
        if tag == OPEN_LEAF:
            digest = hash_leaf(a + b)
        elif tag == OPEN_NODE:
            digest = hash_node(a, b)
        else:
            raise ValueError("bad opening tag")
        if prev is not None and digest <= prev:
            raise ValueError("openings not in canonical order")
        prev = digest
        openings[digest] = (tag, a, b)
    return openings, pos
