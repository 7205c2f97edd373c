"""Volume integrity tag: a binary Merkle tree over the protected file set.

Leaf sequence for a manifest, in entry order (paths sorted byte-wise):
one structural leaf per file followed by that file's chunk leaves. The
structural leaf binds path and size, so deletion and truncation change the
tag even when no surviving chunk does. Interior nodes hash adjacent pairs;
an odd trailing node is promoted unchanged. All digests are SHA-256.

Encodings (big-endian lengths/integers):

    chunk leaf  = H(0x00 | len(path) u32 | path | chunk_index u64 | chunk)
    file leaf   = H(0x01 | len(path) u32 | path | size u64 | n_chunks u64)
    interior    = H(0x02 | left | right)
    empty root  = H(0x03 | "crisp-empty-volume")
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable, Mapping

from ..errors import UnknownPath
from ._kernel import kernel
from .manifest import FileEntry, FileManifest

DIGEST_LEN = 32
DIGEST_NAME = "sha256"

FILE_PREFIX = b"\x01"
_EMPTY_SEED = b"\x03crisp-empty-volume"


def leaf_hash(chunk_plaintext: bytes, path: str, chunk_index: int) -> bytes:
    """Digest of one plaintext chunk, bound to its path and position."""
    if chunk_index < 0:
        raise ValueError("chunk_index must be >= 0")
    return kernel.chunk_leaf_digests(path.encode("utf-8"), chunk_index, (chunk_plaintext,))[0]


def leaf_hashes(path: str, start_index: int, chunks: Iterable[bytes]) -> list[bytes]:
    """Bulk form of leaf_hash for consecutive chunks starting at start_index."""
    return kernel.chunk_leaf_digests(path.encode("utf-8"), start_index, tuple(chunks))


def file_leaf(path: str, size: int, n_chunks: int) -> bytes:
    raw = path.encode("utf-8")
    return hashlib.sha256(
        FILE_PREFIX + struct.pack(">I", len(raw)) + raw + struct.pack(">QQ", size, n_chunks)
    ).digest()


def empty_root() -> bytes:
    return hashlib.sha256(_EMPTY_SEED).digest()


def manifest_leaves(manifest: FileManifest) -> list[bytes]:
    leaves: list[bytes] = []
    for entry in manifest.entries:
        leaves.append(file_leaf(entry.path, entry.size, len(entry.chunk_hashes)))
        leaves.extend(entry.chunk_hashes)
    return leaves


def compute_tag(manifest: FileManifest) -> bytes:
    """Root hash over the full manifest. Deterministic in content and structure."""
    leaves = manifest_leaves(manifest)
    if not leaves:
        return empty_root()
    return kernel.merkle_root(b"".join(leaves))


def update_tag(
    manifest: FileManifest,
    changed: Iterable[tuple[str, int]],
    new_hashes: Mapping[tuple[str, int], bytes],
    new_sizes: Mapping[str, int] | None = None,
) -> bytes:
    """Apply chunk-digest changes to `manifest` in place and return the new tag.

    Each (path, chunk_index) in `changed` either replaces an existing digest
    or extends the file by exactly one chunk (index == current count, applied
    in index order). A path absent from the manifest must appear in
    `new_sizes`, which acts as the creation flag; `new_sizes` also updates
    sizes of existing files. The result is identical to compute_tag over the
    fully updated manifest.
    """
    new_sizes = dict(new_sizes or {})
    by_path: dict[str, list[int]] = {}
    for path, index in changed:
        by_path.setdefault(path, []).append(index)

    for path, indices in by_path.items():
        entry = manifest.find(path)
        if entry is None:
            if path not in new_sizes:
                raise UnknownPath(f"{path}: not in manifest and no creation size given")
            entry = FileEntry(path=path, size=0, chunk_hashes=[])
            manifest.insert(entry)
        for index in sorted(indices):
            if index < 0:
                raise UnknownPath(f"{path}[{index}]: negative chunk index")
            try:
                digest = new_hashes[(path, index)]
            except KeyError:
                raise UnknownPath(f"{path}[{index}]: changed but no new digest supplied")
            if len(digest) != DIGEST_LEN:
                raise ValueError("chunk digest must be 32 bytes")
            if index < len(entry.chunk_hashes):
                entry.chunk_hashes[index] = digest
            elif index == len(entry.chunk_hashes):
                entry.chunk_hashes.append(digest)
            else:
                raise UnknownPath(
                    f"{path}[{index}]: does not extend file of {len(entry.chunk_hashes)} chunks"
                )

    for path, size in new_sizes.items():
        entry = manifest.find(path)
        if entry is None:
            raise UnknownPath(f"{path}: size given for unknown path")
        entry.size = size

    return compute_tag(manifest)


class TagTree:
    """All tree levels held in memory for O(log n) point updates.

    Level 0 is the leaf sequence; each higher level is the pairwise
    reduction of the one below. Mutations keep every level consistent, so
    `root` is always equal to compute_tag over the equivalent manifest.
    """

    def __init__(self, leaves: Iterable[bytes] = ()):
        self._levels: list[bytearray] = [bytearray(b"".join(leaves))]
        self._build_above(0)

    def __len__(self) -> int:
        return len(self._levels[0]) // DIGEST_LEN

    @property
    def root(self) -> bytes:
        if not self._levels[0]:
            return empty_root()
        return bytes(self._levels[-1][:DIGEST_LEN])

    def rebuild(self, leaves: Iterable[bytes]) -> None:
        self._levels = [bytearray(b"".join(leaves))]
        self._build_above(0)

    def leaf(self, index: int) -> bytes:
        lo = index * DIGEST_LEN
        return bytes(self._levels[0][lo : lo + DIGEST_LEN])

    def set_leaf(self, index: int, digest: bytes) -> None:
        if not 0 <= index < len(self):
            raise IndexError(index)
        if len(digest) != DIGEST_LEN:
            raise ValueError("digest must be 32 bytes")
        self._levels[0][index * DIGEST_LEN : (index + 1) * DIGEST_LEN] = digest
        self._refresh(index, to_end=False)

    def append(self, digest: bytes) -> None:
        if len(digest) != DIGEST_LEN:
            raise ValueError("digest must be 32 bytes")
        self._levels[0] += digest
        self._refresh(len(self) - 1, to_end=True)

    def extend(self, digests: Iterable[bytes]) -> None:
        blob = b"".join(digests)
        if not blob:
            return
        start = len(self)
        self._levels[0] += blob
        self._refresh(start, to_end=True)

    def truncate(self, count: int) -> None:
        """Keep the first `count` leaves."""
        if not 0 <= count <= len(self):
            raise IndexError(count)
        del self._levels[0][count * DIGEST_LEN :]
        self._refresh(max(count - 1, 0), to_end=True)

    # -- internals --

    def _build_above(self, level: int) -> None:
        del self._levels[level + 1 :]
        while len(self._levels[-1]) > DIGEST_LEN:
            self._levels.append(bytearray(kernel.reduce_level(bytes(self._levels[-1]))))

    def _node(self, level: bytearray, j: int) -> bytes:
        """Parent node j over `level`: pair hash, or promotion of an odd tail."""
        lo = 2 * j * DIGEST_LEN
        if lo + 2 * DIGEST_LEN <= len(level):
            return kernel.hash_pair(
                bytes(level[lo : lo + DIGEST_LEN]),
                bytes(level[lo + DIGEST_LEN : lo + 2 * DIGEST_LEN]),
            )
        return bytes(level[lo : lo + DIGEST_LEN])

    def _refresh(self, index: int, to_end: bool) -> None:
        """Recompute ancestors of the leaf at `index` (and, when `to_end`, of
        every following leaf; used after appends/truncation, which shift the
        tail shape)."""
        if not self._levels[0]:
            self._levels = [bytearray()]
            return
        k = 0
        while len(self._levels[k]) > DIGEST_LEN:
            child = self._levels[k]
            first = index // 2
            if k + 1 == len(self._levels):
                self._levels.append(bytearray())
            parent = self._levels[k + 1]
            if to_end:
                del parent[first * DIGEST_LEN :]
                parent += kernel.reduce_level(bytes(child[2 * first * DIGEST_LEN :]))
            else:
                parent[first * DIGEST_LEN : (first + 1) * DIGEST_LEN] = self._node(child, first)
            index = first
            k += 1
        del self._levels[k + 1 :]
