"""Pure-Python hash kernel.

Hot paths of tag maintenance: bulk chunk-leaf hashing and pairwise level
reduction. The compiled kernel (crisp.merkle._core) implements the same
three functions against OpenSSL; outputs must be byte-identical.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Sequence

IMPLEMENTATION = "pure"

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x02"

_DIGEST = 32


def chunk_leaf_digests(path: bytes, start_index: int, chunks: Sequence[bytes]) -> list[bytes]:
    """Leaf digest per chunk: H(0x00 | len(path) u32be | path | index u64be | chunk)."""
    head = LEAF_PREFIX + struct.pack(">I", len(path)) + path
    sha = hashlib.sha256
    out = []
    index = start_index
    for chunk in chunks:
        out.append(sha(head + struct.pack(">Q", index) + chunk).digest())
        index += 1
    return out


def hash_pair(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


def reduce_level(nodes: bytes) -> bytes:
    """One tree level up: hash adjacent pairs, promote an odd tail unchanged."""
    n, rem = divmod(len(nodes), _DIGEST)
    if rem:
        raise ValueError("node buffer not a multiple of 32 bytes")
    sha = hashlib.sha256
    out = bytearray()
    for i in range(n // 2):
        lo = 2 * i * _DIGEST
        out += sha(NODE_PREFIX + nodes[lo : lo + 2 * _DIGEST]).digest()
    if n % 2:
        out += nodes[(n - 1) * _DIGEST :]
    return bytes(out)


def merkle_root(leaves: bytes) -> bytes:
    """Root over a non-empty concatenated leaf buffer."""
    if not leaves:
        raise ValueError("merkle_root requires at least one leaf")
    level = leaves
    while len(level) > _DIGEST:
        level = reduce_level(level)
    return bytes(level)
