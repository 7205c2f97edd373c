"""Tag computation against an independent brute-force oracle."""

import copy
import hashlib
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crisp.errors import UnknownPath
from crisp.merkle import (
    FileEntry,
    FileManifest,
    TagTree,
    compute_tag,
    empty_root,
    file_leaf,
    leaf_hash,
    manifest_leaves,
    update_tag,
)

from conftest import random_manifest


# --- independent oracle: recomputes the tag with its own encoding code ---

def oracle_leaf(chunk: bytes, path: str, index: int) -> bytes:
    raw = path.encode("utf-8")
    return hashlib.sha256(
        b"\x00" + struct.pack(">I", len(raw)) + raw + struct.pack(">Q", index) + chunk
    ).digest()


def oracle_tag(manifest: FileManifest) -> bytes:
    level = []
    for entry in manifest.entries:
        raw = entry.path.encode("utf-8")
        level.append(
            hashlib.sha256(
                b"\x01"
                + struct.pack(">I", len(raw))
                + raw
                + struct.pack(">QQ", entry.size, len(entry.chunk_hashes))
            ).digest()
        )
        level.extend(entry.chunk_hashes)
    if not level:
        return hashlib.sha256(b"\x03crisp-empty-volume").digest()
    while len(level) > 1:
        nxt = [
            hashlib.sha256(b"\x02" + level[i] + level[i + 1]).digest()
            for i in range(0, len(level) - 1, 2)
        ]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


# --- pinned vectors (computed with plain hashlib, independent of the package) ---

def test_leaf_hash_pinned_vector():
    assert leaf_hash(b"", "a", 0).hex() == (
        "cc058c12987ecee878d35cd090cee10475a875fe7c5c97aebd17d331feb72e77"
    )
    assert leaf_hash(b"chunk-bytes", "héllo", 7).hex() == (
        "69e1bce5857784c2eb3022ee923b3f4a258e80ad18f4f75258d2673ea68461cf"
    )


def test_file_leaf_pinned_vector():
    assert file_leaf("file", 12345, 4).hex() == (
        "89b7bd3915445427bd2c0aafe95deed96e57bc4e8a3c3e6a94b1dd87f6d14cc4"
    )


def test_empty_root_pinned_vector():
    assert empty_root().hex() == (
        "2214ff4a1edcf630855267676ad62a1377b9cdf8071fcb2cab1b9c926130ecdb"
    )


# --- leaf hashing basics ---

def test_leaf_hash_deterministic():
    assert leaf_hash(b"", "a", 0) == leaf_hash(b"", "a", 0)


def test_leaf_hash_domain_separation():
    assert leaf_hash(b"x", "a", 0) != leaf_hash(b"x", "a", 1)
    assert leaf_hash(b"x", "a", 0) != leaf_hash(b"x", "b", 0)
    assert leaf_hash(b"x", "a", 0) != leaf_hash(b"y", "a", 0)
    # length framing: path boundary cannot be shifted into the index
    assert leaf_hash(b"x", "ab", 0) != leaf_hash(b"bx", "a", 0)


def test_leaf_hash_rejects_negative_index():
    with pytest.raises(ValueError):
        leaf_hash(b"", "a", -1)


# --- compute_tag ---

def test_empty_manifest_tag_stable():
    assert compute_tag(FileManifest()) == empty_root()
    assert compute_tag(FileManifest()) == compute_tag(FileManifest())


def test_single_chunk_file_is_interior_of_file_and_chunk_leaf():
    chunk_digest = leaf_hash(b"data", "f", 0)
    manifest = FileManifest(entries=[FileEntry("f", 4, [chunk_digest])])
    expected = hashlib.sha256(b"\x02" + file_leaf("f", 4, 1) + chunk_digest).digest()
    assert compute_tag(manifest) == expected


def test_five_leaf_manifest_matches_oracle():
    rng = random.Random(5)
    manifest = FileManifest(
        entries=[FileEntry("f", 4096 * 4 + 100, [rng.randbytes(32) for _ in range(5)])]
    )
    assert compute_tag(manifest) == oracle_tag(manifest)


@pytest.mark.parametrize("seed", range(25))
def test_compute_tag_matches_oracle_random(seed):
    manifest = random_manifest(random.Random(seed))
    assert compute_tag(manifest) == oracle_tag(manifest)


# --- update_tag ---

def test_update_tag_empty_change_is_identity():
    manifest = random_manifest(random.Random(1))
    before = compute_tag(manifest)
    assert update_tag(manifest, [], {}) == before


def test_update_tag_unknown_path():
    manifest = FileManifest()
    with pytest.raises(UnknownPath):
        update_tag(manifest, [("ghost", 0)], {("ghost", 0): b"\x00" * 32})


def test_update_tag_gap_rejected():
    manifest = FileManifest(entries=[FileEntry("f", 4096, [b"\x01" * 32])])
    with pytest.raises(UnknownPath):
        update_tag(manifest, [("f", 5)], {("f", 5): b"\x02" * 32})


def test_update_tag_change_one_chunk_equals_recompute():
    rng = random.Random(7)
    manifest = random_manifest(rng)
    while not any(e.chunk_hashes for e in manifest.entries):
        manifest = random_manifest(rng)
    entry = rng.choice([e for e in manifest.entries if e.chunk_hashes])
    index = rng.randrange(len(entry.chunk_hashes))
    digest = rng.randbytes(32)
    tag = update_tag(manifest, [(entry.path, index)], {(entry.path, index): digest})
    assert entry.chunk_hashes[index] == digest
    assert tag == compute_tag(manifest) == oracle_tag(manifest)


def test_update_tag_add_new_file_equals_recompute():
    rng = random.Random(8)
    manifest = random_manifest(rng)
    digests = {("zz/new.bin", i): rng.randbytes(32) for i in range(3)}
    tag = update_tag(
        manifest,
        list(digests),
        digests,
        new_sizes={"zz/new.bin": 3 * 4096},
    )
    assert manifest.find("zz/new.bin") is not None
    assert tag == compute_tag(manifest) == oracle_tag(manifest)


@pytest.mark.parametrize("seed", range(15))
def test_update_tag_random_changes_match_full_recompute(seed):
    rng = random.Random(1000 + seed)
    manifest = random_manifest(rng)
    changed = []
    new_hashes = {}
    new_sizes = {}
    for entry in manifest.entries:
        if entry.chunk_hashes and rng.random() < 0.6:
            idx = rng.randrange(len(entry.chunk_hashes))
            changed.append((entry.path, idx))
            new_hashes[(entry.path, idx)] = rng.randbytes(32)
        if rng.random() < 0.3:  # extend by one chunk
            idx = len(entry.chunk_hashes)
            changed.append((entry.path, idx))
            new_hashes[(entry.path, idx)] = rng.randbytes(32)
            new_sizes[entry.path] = (idx + 1) * 4096
    if rng.random() < 0.5:
        path = "zzz/created.bin"
        for idx in range(rng.randrange(1, 4)):
            changed.append((path, idx))
            new_hashes[(path, idx)] = rng.randbytes(32)
            new_sizes[path] = (idx + 1) * 4096
    tag = update_tag(manifest, changed, new_hashes, new_sizes=new_sizes)
    manifest.validate()
    assert tag == compute_tag(manifest) == oracle_tag(manifest)


# --- mutation sensitivity (second-preimage sanity at unit scale; the full
# 1000-case sweep runs in the acceptance suite) ---

def _mutate(manifest: FileManifest, rng: random.Random) -> str:
    """Apply one structural or content mutation; returns its kind."""
    kinds = ["add_file"]
    if manifest.entries:
        kinds += ["remove_file", "rename", "resize"]
        if any(e.chunk_hashes for e in manifest.entries):
            kinds += ["chunk_content", "chunk_reorder_or_swap"]
    kind = rng.choice(kinds)
    if kind == "add_file":
        path = f"zz/added-{rng.randrange(10**6)}.bin"
        manifest.insert(FileEntry(path, 1, [rng.randbytes(32)]))
    elif kind == "remove_file":
        manifest.entries.pop(rng.randrange(len(manifest.entries)))
    elif kind == "rename":
        entry = rng.choice(manifest.entries)
        manifest.entries.remove(entry)
        manifest.insert(FileEntry(entry.path + ".renamed", entry.size, entry.chunk_hashes))
    elif kind == "resize":
        entry = rng.choice(manifest.entries)
        entry.size += 1
    elif kind == "chunk_content":
        entry = rng.choice([e for e in manifest.entries if e.chunk_hashes])
        entry.chunk_hashes[rng.randrange(len(entry.chunk_hashes))] = rng.randbytes(32)
    else:  # chunk_reorder_or_swap
        entry = rng.choice([e for e in manifest.entries if e.chunk_hashes])
        if len(entry.chunk_hashes) >= 2:
            i, j = rng.sample(range(len(entry.chunk_hashes)), 2)
            hashes = entry.chunk_hashes
            hashes[i], hashes[j] = hashes[j], hashes[i]
            if hashes[i] == hashes[j]:
                hashes[i] = rng.randbytes(32)
        else:
            entry.chunk_hashes[0] = rng.randbytes(32)
    return kind


@pytest.mark.parametrize("seed", range(30))
def test_any_single_mutation_changes_tag(seed):
    rng = random.Random(2000 + seed)
    manifest = random_manifest(rng)
    before = compute_tag(manifest)
    mutated = copy.deepcopy(manifest)
    kind = _mutate(mutated, rng)
    after = compute_tag(mutated)
    assert after != before, f"mutation {kind} left the tag unchanged"


# --- TagTree incremental maintenance ---

def test_tagtree_matches_compute_tag_under_edit_sequences():
    rng = random.Random(99)
    for _ in range(40):
        manifest = random_manifest(rng, max_files=6, max_chunks=8)
        tree = TagTree(manifest_leaves(manifest))
        assert tree.root == compute_tag(manifest)
        leaves = list(manifest_leaves(manifest))
        for _ in range(rng.randrange(1, 12)):
            op = rng.choice(["set", "append", "extend", "truncate"])
            if op == "set" and leaves:
                i = rng.randrange(len(leaves))
                leaves[i] = rng.randbytes(32)
                tree.set_leaf(i, leaves[i])
            elif op == "append":
                leaves.append(rng.randbytes(32))
                tree.append(leaves[-1])
            elif op == "extend":
                new = [rng.randbytes(32) for _ in range(rng.randrange(1, 5))]
                leaves.extend(new)
                tree.extend(new)
            else:
                keep = rng.randrange(0, len(leaves) + 1)
                del leaves[keep:]
                tree.truncate(keep)
            reference = TagTree(leaves)
            assert tree.root == reference.root
            assert len(tree) == len(leaves)


@given(st.lists(st.binary(min_size=32, max_size=32), max_size=40), st.data())
@settings(max_examples=60, deadline=None)
def test_tagtree_point_update_equals_rebuild(leaves, data):
    tree = TagTree(leaves)
    if leaves:
        i = data.draw(st.integers(min_value=0, max_value=len(leaves) - 1))
        digest = data.draw(st.binary(min_size=32, max_size=32))
        tree.set_leaf(i, digest)
        leaves = list(leaves)
        leaves[i] = digest
    assert tree.root == TagTree(leaves).root


def test_manifest_validation():
    manifest = FileManifest(entries=[FileEntry("b", 0, []), FileEntry("a", 0, [])])
    with pytest.raises(ValueError):
        manifest.validate()
    ok = FileManifest(entries=[FileEntry("a", 4096, [b"\x00" * 32])])
    ok.validate(chunk_size=4096)
    bad = FileManifest(entries=[FileEntry("a", 4097, [b"\x00" * 32])])
    with pytest.raises(ValueError):
        bad.validate(chunk_size=4096)
