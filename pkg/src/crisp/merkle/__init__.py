"""Merkle-tree integrity tags over the protected file set."""

from ._kernel import active_implementation, kernel
from .manifest import FileEntry, FileManifest
from .tags import (
    DIGEST_LEN,
    DIGEST_NAME,
    TagTree,
    compute_tag,
    empty_root,
    file_leaf,
    leaf_hash,
    leaf_hashes,
    manifest_leaves,
    update_tag,
)

__all__ = [
    "DIGEST_LEN",
    "DIGEST_NAME",
    "FileEntry",
    "FileManifest",
    "TagTree",
    "active_implementation",
    "compute_tag",
    "empty_root",
    "file_leaf",
    "kernel",
    "leaf_hash",
    "leaf_hashes",
    "manifest_leaves",
    "update_tag",
]
