"""Volume behaviour: encryption at rest, startup verdicts, commit binding."""

import os
import random
import shutil

import pytest

from crisp.errors import (
    CounterIdentityMismatch,
    DecryptFailure,
    IncompleteCommit,
    NotEmpty,
    PipelineHalted,
    RollbackDetected,
    SnapshotNotFound,
    TagMismatch,
    VaultAuthFailure,
)
from crisp.mcounter import LatencyProfile, MonotonicCounter, provision
from crisp.pipeline import PipelineConfig
from crisp.checker import CheckerConfig
from crisp import volume as vol
from crisp.volume import (
    Volume,
    list_snapshots,
    restore_volume,
    snapshot_volume,
)

MASTER = bytes(range(100, 132))
CKEY = bytes(range(32))
FAST = LatencyProfile(0, 0, None)


@pytest.fixture
def env(tmp_path):
    counter_path = tmp_path / "counter.state"
    provision(counter_path, CKEY, FAST)

    class Env:
        dir = tmp_path / "volume"
        counter_file = counter_path

        @staticmethod
        def counter():
            return MonotonicCounter(counter_path, CKEY, FAST)

        @staticmethod
        def create(**kwargs):
            return Volume.create(Env.dir, MASTER, Env.counter(), **kwargs)

        @staticmethod
        def open(**kwargs):
            return Volume.open(Env.dir, MASTER, Env.counter(), **kwargs)

        @staticmethod
        def verify():
            return Volume.verify(Env.dir, MASTER, Env.counter())

    return Env


def write_and_commit(volume, path="f.dat", data=b"payload", close=False):
    handle = volume.open_file(path, "rw")
    handle.seek(handle.size())
    handle.write(data)
    handle.fsync()
    volume.pipeline.wait_stable(volume.pipeline.local, deadline_s=30)
    if close:
        handle.close()
    return handle


# --- creation ---

def test_create_binds_current_counter_value(env):
    volume = env.create()
    volume.close()
    tag, mc = env.verify()
    assert mc == 0
    from crisp.merkle import empty_root

    assert tag == empty_root()


def test_create_on_reused_counter_binds_its_value(env):
    counter = env.counter()
    for _ in range(7):
        counter.increment()
    volume = env.create()
    volume.close()
    _, mc = env.verify()
    assert mc == 7


def test_create_nonempty_dir_rejected(env):
    env.dir.mkdir()
    (env.dir / "junk").write_text("x")
    with pytest.raises(NotEmpty):
        env.create()


# --- file API ---

def test_read_your_writes_before_fsync(env):
    volume = env.create()
    handle = volume.open_file("a/b.txt", "rw")
    handle.write(b"hello")
    handle.seek(0)
    assert handle.read(5) == b"hello"
    volume.close()


def test_write_spanning_chunks_roundtrip(env):
    volume = env.create(chunk_size=4096)
    rng = random.Random(3)
    data = rng.randbytes(4096 * 3 + 123)
    handle = volume.open_file("big.bin", "rw")
    handle.write(data)
    handle.fsync()
    handle.seek(0)
    assert handle.read(len(data)) == data
    volume.close()
    volume = env.open()
    handle = volume.open_file("big.bin", "r")
    assert handle.read(len(data) + 100) == data
    volume.close()


def test_varied_buffer_sizes_roundtrip(env):
    volume = env.create()
    rng = random.Random(9)
    payload = rng.randbytes(256 * 1024)
    handle = volume.open_file("f.bin", "rw")
    offset = 0
    for buf in (512, 4096, 32768):
        end = min(offset + buf * 8, len(payload))
        while offset < end:
            offset += handle.write(payload[offset : offset + buf])
    handle.write(payload[offset:])
    handle.fsync()
    handle.seek(0)
    assert handle.read(len(payload)) == payload
    volume.close()
    volume = env.open()
    handle = volume.open_file("f.bin", "r")
    chunks = []
    while True:
        piece = handle.read(32768)
        if not piece:
            break
        chunks.append(piece)
    assert b"".join(chunks) == payload
    volume.close()


def test_overwrite_in_place(env):
    volume = env.create()
    handle = volume.open_file("f.bin", "rw")
    handle.write(b"A" * 10000)
    handle.fsync()
    handle.seek(4000)
    handle.write(b"B" * 200)
    handle.fsync()
    volume.close()
    volume = env.open()
    handle = volume.open_file("f.bin", "r")
    data = handle.read(10000)
    assert data[:4000] == b"A" * 4000
    assert data[4000:4200] == b"B" * 200
    assert data[4200:] == b"A" * 5800
    volume.close()


def test_read_only_mode_enforced(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x")
    handle = volume.open_file("f.dat", "r")
    with pytest.raises(PermissionError):
        handle.write(b"nope")
    with pytest.raises(FileNotFoundError):
        volume.open_file("missing.dat", "r")
    volume.close()


def test_path_validation(env):
    volume = env.create()
    for bad in ("/abs", "a/../b", "", "a//b", "."):
        with pytest.raises(ValueError):
            volume.open_file(bad, "rw")
    volume.close()


def test_empty_file_tracked_in_manifest(env):
    volume = env.create()
    volume.open_file("empty.dat", "rw")
    handle = volume.open_file("data.dat", "rw")
    handle.write(b"z")
    handle.fsync()
    volume.close()
    volume = env.open()
    handle = volume.open_file("empty.dat", "r")
    assert handle.read(10) == b""
    assert handle.size() == 0
    volume.close()


# --- confidentiality ---

def test_no_plaintext_on_disk(env):
    sentinel = bytes.fromhex("f00dfaceb00c5eed") * 4  # high-entropy marker
    volume = env.create()
    handle = volume.open_file("secret.bin", "rw")
    handle.write(sentinel * 64)
    handle.fsync()
    volume.close()
    for path in env.dir.rglob("*"):
        if path.is_file():
            blob = path.read_bytes()
            for lo in range(0, len(sentinel) - 15):
                assert sentinel[lo : lo + 16] not in blob


def test_fsync_without_dirty_data_still_commits(env):
    volume = env.create()
    handle = volume.open_file("f.dat", "rw")
    ticket = handle.fsync()
    assert ticket.request_id is not None
    volume.pipeline.wait_stable(volume.pipeline.local, deadline_s=30)
    assert sum(r.fsync_count for r in volume.pipeline.metrics()) == 1
    volume.close()


# --- read-time integrity ---

def test_corrupted_chunk_read_fails(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"D" * 5000)
    chunk = next((env.dir / "data").rglob("*.chk"))
    blob = bytearray(chunk.read_bytes())
    blob[20] ^= 0xFF
    chunk.write_bytes(bytes(blob))
    handle = volume.open_file("f.dat", "r")
    with pytest.raises(DecryptFailure):
        handle.read(5000)
    volume.close()


def test_chunk_files_swapped_rejected_on_read(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"0" * 4096 + b"1" * 4096)
    fid_dir = next((env.dir / "data").iterdir())
    a, b = fid_dir / "00000000.chk", fid_dir / "00000001.chk"
    blob_a, blob_b = a.read_bytes(), b.read_bytes()
    a.write_bytes(blob_b)
    b.write_bytes(blob_a)
    handle = volume.open_file("f.dat", "r")
    with pytest.raises(DecryptFailure):
        handle.read(8192)
    volume.close()


# --- startup verdicts ---

def test_clean_close_then_open(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"hello world")
    volume.close()
    volume = env.open()
    handle = volume.open_file("f.dat", "r")
    assert handle.read(100) == b"hello world"
    volume.close()


def test_open_success_requires_exact_counter_equality(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x")
    volume.close()
    tag, mc = env.verify()
    counter = env.counter()
    assert counter.read() == mc


def test_whole_volume_rollback_detected(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"gen1")
    volume.close()
    snapshot_id = snapshot_volume(env.dir)
    volume = env.open()
    write_and_commit(volume, "f.dat", b"gen2")
    volume.close()
    restore_volume(env.dir, snapshot_id)
    with pytest.raises(RollbackDetected):
        env.open()


def test_benign_snapshot_restore_opens(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"gen1")
    volume.close()
    snapshot_id = snapshot_volume(env.dir)
    restore_volume(env.dir, snapshot_id)
    volume = env.open()  # no commits in between: not a rollback
    volume.close()


def test_restore_unknown_snapshot(env):
    volume = env.create()
    volume.close()
    with pytest.raises(SnapshotNotFound):
        restore_volume(env.dir, "9999")
    assert list_snapshots(env.dir) == []


def test_data_only_restore_is_tag_mismatch(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"gen1" * 1000)
    volume.close()
    snapshot_id = snapshot_volume(env.dir)
    volume = env.open()
    write_and_commit(volume, "f.dat", b"gen2" * 1000)
    volume.close()
    # adversary restores chunk files only, leaving the current vault+manifest
    snap_dir = env.dir.parent / (env.dir.name + ".snapshots") / snapshot_id
    shutil.rmtree(env.dir / "data")
    shutil.copytree(snap_dir / "data", env.dir / "data")
    with pytest.raises(TagMismatch):
        env.open()


def test_vault_ahead_of_counter_is_incomplete_commit(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x")
    # Craft the post-crash state: vault promising value+1 was written
    # durably, but the increment never happened.
    with volume._lock:
        blob = volume._seal_vault(volume._tree.root, volume.pipeline.local + 1,
                                  volume._next_seq)
    volume.close()
    (env.dir / "vault.sealed").write_bytes(blob)
    with pytest.raises(IncompleteCommit):
        env.open()


def test_counter_vault_trichotomy(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x")
    volume.close()
    # equal -> opens
    env.open().close()
    # counter ahead -> rollback detected
    env.counter().increment()
    with pytest.raises(RollbackDetected):
        env.open()


def test_tampered_vault_rejected(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x")
    volume.close()
    vault = env.dir / "vault.sealed"
    blob = bytearray(vault.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    vault.write_bytes(bytes(blob))
    with pytest.raises(VaultAuthFailure):
        env.open()


def test_tampered_manifest_rejected(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x")
    volume.close()
    manifest = env.dir / "manifest.sealed"
    blob = bytearray(manifest.read_bytes())
    blob[-1] ^= 0x01
    manifest.write_bytes(bytes(blob))
    with pytest.raises(TagMismatch):
        env.open()


def test_wrong_master_key_rejected(env):
    volume = env.create()
    volume.close()
    with pytest.raises(VaultAuthFailure):
        Volume.open(env.dir, bytes(32), env.counter())


def test_foreign_counter_rejected(env, tmp_path):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x")
    volume.close()
    other_path = tmp_path / "other.state"
    provision(other_path, CKEY, FAST)
    other = MonotonicCounter(other_path, CKEY, FAST)
    other.increment()  # same value as the bound counter
    with pytest.raises(CounterIdentityMismatch):
        Volume.open(env.dir, MASTER, other)


def test_orphan_chunk_file_rejected(env):
    volume = env.create()
    write_and_commit(volume, "f.dat", b"x" * 5000)
    volume.close()
    fid_dir = next((env.dir / "data").iterdir())
    (fid_dir / "00000099.chk").write_bytes(b"junk")
    with pytest.raises(TagMismatch):
        env.open()


# --- close semantics ---

def test_close_without_changes_no_increment(env):
    volume = env.create()
    volume.close()
    before = env.counter().read()
    volume = env.open()
    volume.close()
    assert env.counter().read() == before


def test_close_commits_unflushed_writes(env):
    volume = env.create()
    handle = volume.open_file("f.dat", "rw")
    handle.write(b"not fsynced")
    volume.close()  # final commit must cover the flushed data
    volume = env.open()
    handle = volume.open_file("f.dat", "r")
    assert handle.read(100) == b"not fsynced"
    volume.close()


def test_close_file_blocks_until_stable(env):
    volume = env.create()
    handle = volume.open_file("f.dat", "rw")
    handle.write(b"y")
    handle.close()
    assert volume.pipeline.stable == volume.pipeline.local
    volume.close()


def test_close_idempotent(env):
    volume = env.create()
    volume.close()
    volume.close()


def test_halt_surfaces_on_close(env):
    provisioned = LatencyProfile(5, 0, None)
    counter_path = env.counter_file
    counter = MonotonicCounter(counter_path, CKEY, provisioned)
    volume = Volume.create(
        env.dir, MASTER, counter,
        pipeline_config=PipelineConfig(queue_timeout_ms=100),
    )
    handle = volume.open_file("f.dat", "rw")
    handle.write(b"1")
    handle.fsync()
    volume.pipeline.wait_stable(volume.pipeline.local, deadline_s=30)
    counter.set_slowdown(100)  # 500 ms per increment now
    handle.write(b"2")
    handle.fsync()
    handle.write(b"3")
    handle.fsync()
    with pytest.raises(PipelineHalted):
        volume.close()
    assert "queue timeout" in (volume.pipeline.halted_reason or "")


# --- sync commit modes ---

def test_sync_mode_increments_per_fsync(env):
    volume = env.create(commit_mode="sync")
    handle = volume.open_file("f.dat", "rw")
    for i in range(3):
        handle.write(b"x")
        handle.fsync()
    volume.close()
    assert env.counter().read() == 3
    env.open().close()  # consistent state


def test_sync_no_counter_mode_never_increments(env):
    volume = env.create(commit_mode="sync-no-counter")
    handle = volume.open_file("f.dat", "rw")
    for _ in range(3):
        handle.write(b"x")
        handle.fsync()
    volume.close()
    assert env.counter().read() == 0
    env.open().close()


# --- internal checker hook ---

def test_internal_probability_one_makes_fsync_synchronous(env):
    volume = env.create(checker_config=CheckerConfig(internal_probability=1.0))
    handle = volume.open_file("f.dat", "rw")
    for _ in range(5):
        handle.write(b"x")
        handle.fsync()
        assert volume.pipeline.stable == volume.pipeline.local
    volume.close()


def test_internal_probability_zero_never_blocks(env):
    volume = env.create(checker_config=CheckerConfig(internal_probability=0.0))
    checker = volume._internal_checker
    assert checker.maybe_wait() is None
    volume.close()
