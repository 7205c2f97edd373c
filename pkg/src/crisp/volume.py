"""Encrypted chunked volume with vault-bound rollback protection.

Directory layout:

    header.crisp     plain JSON: format version, hash/cipher ids, chunk size, epoch
    manifest.sealed  AEAD-sealed file table: path, size, chunk digests, generations
    vault.sealed     AEAD-sealed binding of {tag, counter value, counter identity,
                     epoch, sequence number}
    data/<fid>/<index>.chk   AEAD chunk records: 12-byte nonce + ciphertext

Every chunk is encrypted under a per-file key derived from the master key
and the path; associated data binds (path, chunk index, write generation),
so a chunk moved between positions or files, or an old generation slipped
back in, fails authenticated decryption. The Merkle tag is computed over
plaintext chunk digests plus structural file leaves; the vault binds each
committed tag to a promised counter value.

Opening a volume re-verifies everything: vault authenticity, counter
identity, every chunk against the manifest, the recomputed tag against the
vault, and finally the live counter value against the vault's promise.
Counter ahead of vault means an older committed state was restored; vault
ahead of counter means a commit was interrupted before its increment.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import re
import shutil
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import _faults
from ._fsutil import fsync_dir, write_atomic, write_fsync
from .checker import CheckerConfig, InternalChecker
from .errors import (
    CounterIdentityMismatch,
    DecryptFailure,
    IncompleteCommit,
    NotEmpty,
    RollbackDetected,
    SnapshotNotFound,
    TagMismatch,
    VaultAuthFailure,
    VolumeError,
)
from .mcounter import CounterIdentity, MonotonicCounter
from .merkle import FileEntry, FileManifest, TagTree, empty_root, file_leaf, leaf_hashes
from .merkle.tags import DIGEST_NAME
from .pipeline import CommitPipeline, CommitSource, PipelineConfig

HEADER_NAME = "header.crisp"
MANIFEST_NAME = "manifest.sealed"
VAULT_NAME = "vault.sealed"
DATA_DIR = "data"
DEFAULT_CHUNK_SIZE = 4096
FORMAT_VERSION = 1
CIPHER_NAME = "aes-256-gcm"

_CHUNK_FILE_RE = re.compile(r"^(\d{8})\.chk$")


# --- key schedule and sealing ---


def _derive(master_key: bytes, label: bytes, *parts: bytes) -> bytes:
    mac = hmac.new(master_key, label, hashlib.sha256)
    for part in parts:
        mac.update(struct.pack(">I", len(part)))
        mac.update(part)
    return mac.digest()


def _seal(key: bytes, payload: bytes, aad: bytes) -> bytes:
    nonce = os.urandom(12)
    return nonce + AESGCM(key).encrypt(nonce, payload, aad)


def _unseal(key: bytes, blob: bytes, aad: bytes) -> bytes:
    if len(blob) < 12 + 16:
        raise InvalidTag()
    return AESGCM(key).decrypt(blob[:12], blob[12:], aad)


def _file_id(path: str) -> str:
    return hashlib.sha256(b"crisp-file-id\x00" + path.encode("utf-8")).hexdigest()[:16]


def _chunk_aad(path: str, index: int, generation: int) -> bytes:
    raw = path.encode("utf-8")
    return (
        b"crisp-chunk\x00"
        + struct.pack(">I", len(raw))
        + raw
        + struct.pack(">QQ", index, generation)
    )


# --- on-disk records ---


@dataclass(frozen=True)
class VaultRecord:
    volume_tag: bytes
    mc_value: int
    counter_identity: CounterIdentity
    epoch: bytes
    seq: int


def _encode_vault(record: VaultRecord) -> bytes:
    return struct.pack(
        ">32sQ16s32s16sQ",
        record.volume_tag,
        record.mc_value,
        record.counter_identity.uid,
        record.counter_identity.key_fingerprint,
        record.epoch,
        record.seq,
    )


def _decode_vault(blob: bytes) -> VaultRecord:
    tag, mc, uid, fingerprint, epoch, seq = struct.unpack(">32sQ16s32s16sQ", blob)
    return VaultRecord(
        volume_tag=tag,
        mc_value=mc,
        counter_identity=CounterIdentity(uid=uid, key_fingerprint=fingerprint),
        epoch=epoch,
        seq=seq,
    )


def _encode_manifest(manifest: FileManifest, gens: dict[str, list[int]]) -> bytes:
    out = [struct.pack(">I", len(manifest.entries))]
    for entry in manifest.entries:
        raw = entry.path.encode("utf-8")
        file_gens = gens[entry.path]
        out.append(struct.pack(">H", len(raw)))
        out.append(raw)
        out.append(struct.pack(">QI", entry.size, len(entry.chunk_hashes)))
        for digest, gen in zip(entry.chunk_hashes, file_gens):
            out.append(digest)
            out.append(struct.pack(">Q", gen))
    return b"".join(out)


def _decode_manifest(blob: bytes) -> tuple[FileManifest, dict[str, list[int]]]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("manifest truncated")
        out = view[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack(">I", take(4))
    entries: list[FileEntry] = []
    gens: dict[str, list[int]] = {}
    for _ in range(count):
        (path_len,) = struct.unpack(">H", take(2))
        path = bytes(take(path_len)).decode("utf-8")
        size, n_chunks = struct.unpack(">QI", take(12))
        hashes: list[bytes] = []
        file_gens: list[int] = []
        for _ in range(n_chunks):
            hashes.append(bytes(take(32)))
            (gen,) = struct.unpack(">Q", take(8))
            file_gens.append(gen)
        entries.append(FileEntry(path=path, size=size, chunk_hashes=hashes))
        gens[path] = file_gens
    if pos != len(view):
        raise ValueError("manifest has trailing bytes")
    manifest = FileManifest(entries=entries)
    manifest.validate()
    return manifest, gens


@dataclass(frozen=True)
class VolumeHeader:
    chunk_size: int
    epoch: bytes
    format_version: int = FORMAT_VERSION
    digest: str = DIGEST_NAME
    cipher: str = CIPHER_NAME

    def encode(self) -> bytes:
        return json.dumps(
            {
                "format_version": self.format_version,
                "digest": self.digest,
                "cipher": self.cipher,
                "chunk_size": self.chunk_size,
                "epoch": self.epoch.hex(),
            },
            indent=0,
        ).encode("ascii")

    @classmethod
    def decode(cls, raw: bytes) -> "VolumeHeader":
        try:
            doc = json.loads(raw)
            header = cls(
                chunk_size=int(doc["chunk_size"]),
                epoch=bytes.fromhex(doc["epoch"]),
                format_version=int(doc["format_version"]),
                digest=doc["digest"],
                cipher=doc["cipher"],
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise VolumeError(f"volume header unreadable: {exc}") from exc
        if header.format_version != FORMAT_VERSION:
            raise VolumeError(f"unsupported volume format {header.format_version}")
        if header.digest != DIGEST_NAME or header.cipher != CIPHER_NAME:
            raise VolumeError("unsupported digest/cipher combination")
        if header.chunk_size <= 0 or len(header.epoch) != 16:
            raise VolumeError("volume header invalid")
        return header


@dataclass(frozen=True)
class FlushTicket:
    enqueued_at: float
    request_id: int | None = None
    source: CommitSource = CommitSource.EXPLICIT_FSYNC


# --- verification shared by open() and verify() ---


def _load_header(directory: Path) -> VolumeHeader:
    try:
        raw = (directory / HEADER_NAME).read_bytes()
    except FileNotFoundError:
        raise VolumeError(f"not a volume (missing {HEADER_NAME}): {directory}")
    return VolumeHeader.decode(raw)


def _load_vault(directory: Path, master_key: bytes, header: VolumeHeader) -> VaultRecord:
    key = _derive(master_key, b"vault-key", header.epoch)
    try:
        blob = (directory / VAULT_NAME).read_bytes()
    except FileNotFoundError:
        raise VaultAuthFailure("vault file missing")
    try:
        payload = _unseal(key, blob, b"crisp-vault\x00" + header.epoch)
        record = _decode_vault(payload)
    except (InvalidTag, struct.error, ValueError):
        raise VaultAuthFailure("vault cannot be unsealed")
    if record.epoch != header.epoch:
        raise VaultAuthFailure("vault epoch mismatch")
    return record


def _load_manifest(
    directory: Path, master_key: bytes, header: VolumeHeader
) -> tuple[FileManifest, dict[str, list[int]]]:
    key = _derive(master_key, b"manifest-key", header.epoch)
    try:
        blob = (directory / MANIFEST_NAME).read_bytes()
    except FileNotFoundError:
        raise TagMismatch("manifest file missing")
    try:
        payload = _unseal(key, blob, b"crisp-manifest\x00" + header.epoch)
        return _decode_manifest(payload)
    except (InvalidTag, ValueError):
        raise TagMismatch("manifest cannot be authenticated")


def _verify_contents(
    directory: Path,
    master_key: bytes,
    header: VolumeHeader,
    manifest: FileManifest,
    gens: dict[str, list[int]],
    vault: VaultRecord,
) -> bytes:
    """Re-derive the tag from chunk files and compare with the vault's.

    Any divergence between disk state and the manifest, or between the
    recomputed root and the vault tag, is a TagMismatch.
    """
    chunk_size = header.chunk_size
    data_root = directory / DATA_DIR
    expected_dirs: dict[str, str] = {}
    tree = TagTree()
    for entry in manifest.entries:
        fid = _file_id(entry.path)
        expected_dirs[fid] = entry.path
        file_key = _derive(master_key, b"file-key", entry.path.encode("utf-8"))
        aes = AESGCM(file_key)
        n_chunks = len(entry.chunk_hashes)
        if n_chunks != -(-entry.size // chunk_size):
            raise TagMismatch(f"{entry.path}: chunk count inconsistent with size")
        tree.append(file_leaf(entry.path, entry.size, n_chunks))
        plain_chunks: list[bytes] = []
        for index in range(n_chunks):
            chunk_path = data_root / fid / f"{index:08d}.chk"
            try:
                blob = chunk_path.read_bytes()
            except FileNotFoundError:
                raise TagMismatch(f"{entry.path}[{index}]: chunk file missing")
            try:
                plain = aes.decrypt(
                    blob[:12], blob[12:], _chunk_aad(entry.path, index, gens[entry.path][index])
                )
            except (InvalidTag, ValueError):
                raise TagMismatch(f"{entry.path}[{index}]: chunk fails authentication")
            expected_len = min(chunk_size, entry.size - index * chunk_size)
            if len(plain) != expected_len:
                raise TagMismatch(f"{entry.path}[{index}]: chunk length mismatch")
            plain_chunks.append(plain)
        digests = leaf_hashes(entry.path, 0, plain_chunks)
        if digests != entry.chunk_hashes:
            raise TagMismatch(f"{entry.path}: chunk digests do not match manifest")
        tree.extend(digests)

    if data_root.exists():
        for fid_dir in data_root.iterdir():
            path = expected_dirs.get(fid_dir.name)
            if path is None:
                raise TagMismatch(f"unexpected data directory {fid_dir.name}")
            n_chunks = len(manifest.find(path).chunk_hashes)  # type: ignore[union-attr]
            for chunk_file in fid_dir.iterdir():
                m = _CHUNK_FILE_RE.match(chunk_file.name)
                if m is None or int(m.group(1)) >= n_chunks:
                    raise TagMismatch(f"unexpected chunk file {fid_dir.name}/{chunk_file.name}")

    tag = tree.root
    if tag != vault.volume_tag:
        raise TagMismatch("recomputed tag does not match vault")
    return tag


def _check_counter_binding(vault: VaultRecord, counter: MonotonicCounter) -> int:
    if vault.counter_identity != counter.identity:
        raise CounterIdentityMismatch("vault is bound to a different counter")
    value = counter.read()
    if value > vault.mc_value:
        raise RollbackDetected(
            f"counter at {value}, vault promises {vault.mc_value}: state was rolled back"
        )
    if value < vault.mc_value:
        raise IncompleteCommit(
            f"vault promises {vault.mc_value}, counter at {value}: interrupted commit"
        )
    return value


def _validate_volume_path(path: str) -> str:
    if not path or path.startswith("/") or "\x00" in path:
        raise ValueError(f"invalid volume path: {path!r}")
    parts = path.split("/")
    if any(part in ("", ".", "..") for part in parts):
        raise ValueError(f"invalid volume path: {path!r}")
    return path


class FileHandle:
    """Cursor-based access to one file in the volume.

    Reads observe the handle's own completed writes through the dirty cache
    before anything is flushed. Operations on a single handle must be
    serialized by the caller; distinct handles may run concurrently.
    """

    def __init__(self, volume: "Volume", path: str, mode: str):
        self._volume = volume
        self.path = path
        self.mode = mode
        self.cursor = 0
        self._dirty: dict[int, bytearray] = {}
        self._clean_cache: tuple[int, int, bytes] | None = None  # (index, gen, plaintext)
        self.closed = False

    # cursor management

    def seek(self, position: int) -> int:
        if position < 0 or position > self.size():
            raise ValueError(f"seek out of range: {position}")
        self.cursor = position
        return self.cursor

    def tell(self) -> int:
        return self.cursor

    def size(self) -> int:
        return self._volume._file_size(self.path, self._dirty)

    # I/O

    def read(self, buf_len: int) -> bytes:
        if self.closed:
            raise ValueError("handle closed")
        if buf_len < 0:
            raise ValueError("buf_len must be >= 0")
        data = self._volume._read_at(self, self.cursor, buf_len)
        self.cursor += len(data)
        return data

    def write(self, data: bytes) -> int:
        if self.closed:
            raise ValueError("handle closed")
        if "w" not in self.mode:
            raise PermissionError(f"{self.path}: handle opened read-only")
        self._volume._write_at(self, self.cursor, bytes(data))
        self.cursor += len(data)
        return len(data)

    def fsync(self) -> FlushTicket:
        if self.closed:
            raise ValueError("handle closed")
        return self._volume._fsync_handle(self)

    def close(self) -> None:
        if not self.closed:
            self._volume._close_handle(self)


class Volume:
    """An open volume. Construct via Volume.create / Volume.open.

    commit_mode:
      "batched"          fsync enqueues into the commit pipeline (default)
      "sync"             every fsync seals manifest+vault and increments inline
      "sync-no-counter"  every fsync seals manifest+vault, counter untouched
    """

    def __init__(
        self,
        directory: Path,
        master_key: bytes,
        counter: MonotonicCounter,
        header: VolumeHeader,
        manifest: FileManifest,
        gens: dict[str, list[int]],
        vault_seq: int,
        counter_value: int,
        pipeline_config: PipelineConfig,
        checker_config: CheckerConfig,
        commit_mode: str,
    ):
        if commit_mode not in ("batched", "sync", "sync-no-counter"):
            raise ValueError(f"unknown commit mode: {commit_mode}")
        self.directory = directory
        self._master_key = master_key
        self._counter = counter
        self.header = header
        self.chunk_size = header.chunk_size
        self.commit_mode = commit_mode
        self._manifest = manifest
        self._gens = gens
        self._lock = threading.RLock()
        self._handles: set[FileHandle] = set()
        self._aes_cache: dict[str, AESGCM] = {}
        self._tree = TagTree(self._manifest_leaves())
        self._offsets = self._compute_offsets()
        self._manifest_version = 0
        self._committed_version = 0
        self._next_seq = vault_seq + 1
        self._sync_value = counter_value
        self._closed = False
        self.pipeline: CommitPipeline | None = None
        self._internal_checker: InternalChecker | None = None
        if commit_mode == "batched":
            self.pipeline = CommitPipeline(
                counter,
                self._commit_batch,
                config=pipeline_config,
                initial_value=counter_value,
            )
            self._internal_checker = InternalChecker(
                self.pipeline, checker_config.internal_probability, checker_config.seed
            )
            self.pipeline.start()

    # --- constructors ---

    @classmethod
    def create(
        cls,
        directory: str | Path,
        master_key: bytes,
        counter: MonotonicCounter,
        chunk_size: int = DEFAULT_CHUNK_SIZE,
        pipeline_config: PipelineConfig = PipelineConfig(),
        checker_config: CheckerConfig = CheckerConfig(),
        commit_mode: str = "batched",
    ) -> "Volume":
        if len(master_key) != 32:
            raise ValueError("master key must be 32 bytes")
        directory = Path(directory)
        if directory.exists() and any(directory.iterdir()):
            raise NotEmpty(f"volume directory not empty: {directory}")
        directory.mkdir(parents=True, exist_ok=True)
        header = VolumeHeader(chunk_size=chunk_size, epoch=os.urandom(16))
        counter_value = counter.read()
        vault = VaultRecord(
            volume_tag=empty_root(),
            mc_value=counter_value,
            counter_identity=counter.identity,
            epoch=header.epoch,
            seq=0,
        )
        write_atomic(directory / HEADER_NAME, header.encode())
        manifest_key = _derive(master_key, b"manifest-key", header.epoch)
        write_atomic(
            directory / MANIFEST_NAME,
            _seal(manifest_key, _encode_manifest(FileManifest(), {}), b"crisp-manifest\x00" + header.epoch),
        )
        vault_key = _derive(master_key, b"vault-key", header.epoch)
        write_atomic(
            directory / VAULT_NAME,
            _seal(vault_key, _encode_vault(vault), b"crisp-vault\x00" + header.epoch),
        )
        (directory / DATA_DIR).mkdir()
        fsync_dir(directory)
        return cls(
            directory,
            master_key,
            counter,
            header,
            FileManifest(),
            {},
            vault_seq=0,
            counter_value=counter_value,
            pipeline_config=pipeline_config,
            checker_config=checker_config,
            commit_mode=commit_mode,
        )

    @classmethod
    def open(
        cls,
        directory: str | Path,
        master_key: bytes,
        counter: MonotonicCounter,
        pipeline_config: PipelineConfig = PipelineConfig(),
        checker_config: CheckerConfig = CheckerConfig(),
        commit_mode: str = "batched",
    ) -> "Volume":
        directory = Path(directory)
        header = _load_header(directory)
        vault = _load_vault(directory, master_key, header)
        manifest, gens = _load_manifest(directory, master_key, header)
        _verify_contents(directory, master_key, header, manifest, gens, vault)
        counter_value = _check_counter_binding(vault, counter)
        return cls(
            directory,
            master_key,
            counter,
            header,
            manifest,
            gens,
            vault_seq=vault.seq,
            counter_value=counter_value,
            pipeline_config=pipeline_config,
            checker_config=checker_config,
            commit_mode=commit_mode,
        )

    @staticmethod
    def verify(directory: str | Path, master_key: bytes, counter: MonotonicCounter) -> tuple[bytes, int]:
        """Run the full startup checks without opening for use.

        Returns (tag, counter value) on success; raises the same error
        classes as open().
        """
        directory = Path(directory)
        header = _load_header(directory)
        vault = _load_vault(directory, master_key, header)
        manifest, gens = _load_manifest(directory, master_key, header)
        tag = _verify_contents(directory, master_key, header, manifest, gens, vault)
        value = _check_counter_binding(vault, counter)
        return tag, value

    # --- manifest/tree bookkeeping (all under self._lock) ---

    def _manifest_leaves(self) -> list[bytes]:
        leaves: list[bytes] = []
        for entry in self._manifest.entries:
            leaves.append(file_leaf(entry.path, entry.size, len(entry.chunk_hashes)))
            leaves.extend(entry.chunk_hashes)
        return leaves

    def _compute_offsets(self) -> dict[str, int]:
        offsets: dict[str, int] = {}
        position = 0
        for entry in self._manifest.entries:
            offsets[entry.path] = position
            position += 1 + len(entry.chunk_hashes)
        return offsets

    def _rebuild_tree(self) -> None:
        self._tree.rebuild(self._manifest_leaves())
        self._offsets = self._compute_offsets()

    def _aes(self, path: str) -> AESGCM:
        aes = self._aes_cache.get(path)
        if aes is None:
            aes = AESGCM(_derive(self._master_key, b"file-key", path.encode("utf-8")))
            self._aes_cache[path] = aes
        return aes

    def _chunk_path(self, path: str, index: int) -> Path:
        return self.directory / DATA_DIR / _file_id(path) / f"{index:08d}.chk"

    def _file_size(self, path: str, dirty: dict[int, bytearray]) -> int:
        with self._lock:
            entry = self._manifest.find(path)
            size = entry.size if entry else 0
        if dirty:
            top = max(dirty)
            size = max(size, top * self.chunk_size + len(dirty[top]))
        return size

    # --- file API internals ---

    def open_file(self, path: str, mode: str = "rw") -> FileHandle:
        if mode not in ("r", "rw"):
            raise ValueError(f"mode must be 'r' or 'rw', got {mode!r}")
        path = _validate_volume_path(path)
        with self._lock:
            self._ensure_open()
            entry = self._manifest.find(path)
            if entry is None:
                if mode == "r":
                    raise FileNotFoundError(f"{path}: not in volume")
                self._manifest.insert(FileEntry(path=path, size=0, chunk_hashes=[]))
                self._gens[path] = []
                self._manifest_version += 1
                self._insert_structural(path)
            handle = FileHandle(self, path, mode)
            self._handles.add(handle)
            return handle

    def _insert_structural(self, path: str) -> None:
        """Tree update for a newly created (empty) file."""
        index = next(i for i, e in enumerate(self._manifest.entries) if e.path == path)
        if index == len(self._manifest.entries) - 1:
            self._offsets[path] = len(self._tree)
            self._tree.append(file_leaf(path, 0, 0))
        else:
            self._rebuild_tree()

    def _read_chunk_plain(self, handle: FileHandle, path: str, index: int, entry: FileEntry) -> bytes:
        dirty = handle._dirty.get(index)
        if dirty is not None:
            return bytes(dirty)
        gen = self._gens[path][index]
        cache = handle._clean_cache
        if cache is not None and cache[0] == index and cache[1] == gen:
            return cache[2]
        blob_path = self._chunk_path(path, index)
        try:
            blob = blob_path.read_bytes()
        except FileNotFoundError:
            raise DecryptFailure(f"{path}[{index}]: chunk file missing")
        try:
            plain = self._aes(path).decrypt(blob[:12], blob[12:], _chunk_aad(path, index, gen))
        except (InvalidTag, ValueError):
            raise DecryptFailure(f"{path}[{index}]: chunk fails authentication")
        if entry.chunk_hashes[index] != leaf_hashes(path, index, (plain,))[0]:
            raise DecryptFailure(f"{path}[{index}]: chunk does not match manifest digest")
        handle._clean_cache = (index, gen, plain)
        return plain

    def _read_at(self, handle: FileHandle, offset: int, length: int) -> bytes:
        with self._lock:
            self._ensure_open()
            path = handle.path
            entry = self._manifest.find(path)
            size = self._file_size(path, handle._dirty)
            end = min(offset + length, size)
            if offset >= end:
                return b""
            out = bytearray()
            index = offset // self.chunk_size
            position = offset
            while position < end:
                base = index * self.chunk_size
                committed = len(entry.chunk_hashes) if entry else 0
                if index < committed or index in handle._dirty:
                    chunk = self._read_chunk_plain(handle, path, index, entry)  # type: ignore[arg-type]
                else:
                    chunk = b""
                lo = position - base
                hi = min(end - base, self.chunk_size)
                piece = chunk[lo:hi]
                if len(piece) < hi - lo:
                    # Bytes past what the chunk holds read as zeros only when a
                    # later dirty chunk extends the file; contiguous writes make
                    # this unreachable in practice, but keep reads total.
                    piece = piece + bytes(hi - lo - len(piece))
                out += piece
                position = base + hi
                index += 1
            return bytes(out)

    def _write_at(self, handle: FileHandle, offset: int, data: bytes) -> None:
        if not data:
            return
        with self._lock:
            self._ensure_open()
            path = handle.path
            entry = self._manifest.find(path)
            committed = len(entry.chunk_hashes) if entry else 0
            size = self._file_size(path, handle._dirty)
            if offset > size:
                raise ValueError("write would leave a hole (offset beyond EOF)")
            position = offset
            remaining = memoryview(data)
            while remaining.nbytes:
                index = position // self.chunk_size
                lo = position - index * self.chunk_size
                take = min(self.chunk_size - lo, remaining.nbytes)
                chunk = handle._dirty.get(index)
                if chunk is None:
                    if index < committed:
                        chunk = bytearray(self._read_chunk_plain(handle, path, index, entry))  # type: ignore[arg-type]
                    else:
                        chunk = bytearray()
                    handle._dirty[index] = chunk
                if len(chunk) < lo:
                    chunk += bytes(lo - len(chunk))
                chunk[lo : lo + take] = remaining[:take]
                remaining = remaining[take:]
                position += take

    def _fsync_handle(self, handle: FileHandle) -> FlushTicket:
        with self._lock:
            self._ensure_open()
            self._flush_handle_locked(handle)
            _faults.hit(_faults.AFTER_DATA_FLUSH)
            if self.commit_mode != "batched":
                self._commit_inline_locked()
                return FlushTicket(enqueued_at=time.monotonic())
        assert self.pipeline is not None
        request = self.pipeline.enqueue(CommitSource.EXPLICIT_FSYNC)
        ticket = FlushTicket(
            enqueued_at=request.enqueue_time,
            request_id=request.request_id,
            source=CommitSource.EXPLICIT_FSYNC,
        )
        if self._internal_checker is not None:
            self._internal_checker.maybe_wait()
        return ticket

    def _flush_handle_locked(self, handle: FileHandle) -> None:
        """Encrypt and durably write the handle's dirty chunks, then fold the
        new digests into the manifest and tag tree (in memory)."""
        if not handle._dirty:
            return
        path = handle.path
        entry = self._manifest.find(path)
        if entry is None:  # handle to a file created by this handle
            entry = FileEntry(path=path, size=0, chunk_hashes=[])
            self._manifest.insert(entry)
            self._gens[path] = []
            self._insert_structural(path)
        gens = self._gens[path]
        aes = self._aes(path)
        fid_dir = self.directory / DATA_DIR / _file_id(path)
        new_dir = not fid_dir.exists()
        if new_dir:
            fid_dir.mkdir(parents=True)
        appended: list[bytes] = []
        dirty_indices = sorted(handle._dirty)
        for index in dirty_indices:
            plain = bytes(handle._dirty[index])
            if index < len(gens):
                gen = gens[index] + 1
                gens[index] = gen
            elif index == len(gens):
                gen = 1
                gens.append(gen)
            else:
                raise VolumeError(f"{path}: non-contiguous dirty chunk {index}")
            nonce = os.urandom(12)
            blob = nonce + aes.encrypt(nonce, plain, _chunk_aad(path, index, gen))
            write_fsync(self._chunk_path(path, index), blob)
            digest = leaf_hashes(path, index, (plain,))[0]
            if index < len(entry.chunk_hashes):
                entry.chunk_hashes[index] = digest
                self._tree.set_leaf(self._offsets[path] + 1 + index, digest)
            else:
                entry.chunk_hashes.append(digest)
                appended.append(digest)
            entry.size = max(entry.size, index * self.chunk_size + len(plain))
        if new_dir:
            fsync_dir(fid_dir)
            fsync_dir(self.directory / DATA_DIR)
        if appended:
            if self._offsets[path] + 1 + len(entry.chunk_hashes) - len(appended) == len(self._tree):
                self._tree.extend(appended)  # file is the tail of the leaf sequence
            else:
                self._rebuild_tree()
        self._tree.set_leaf(
            self._offsets[path], file_leaf(path, entry.size, len(entry.chunk_hashes))
        )
        self._manifest_version += 1
        handle._dirty.clear()
        handle._clean_cache = None

    # --- commit paths ---

    def _seal_manifest_locked(self) -> bytes:
        key = _derive(self._master_key, b"manifest-key", self.header.epoch)
        return _seal(
            key,
            _encode_manifest(self._manifest, self._gens),
            b"crisp-manifest\x00" + self.header.epoch,
        )

    def _seal_vault(self, tag: bytes, mc_value: int, seq: int) -> bytes:
        key = _derive(self._master_key, b"vault-key", self.header.epoch)
        record = VaultRecord(
            volume_tag=tag,
            mc_value=mc_value,
            counter_identity=self._counter.identity,
            epoch=self.header.epoch,
            seq=seq,
        )
        return _seal(key, _encode_vault(record), b"crisp-vault\x00" + self.header.epoch)

    def _commit_batch(self, promised_value: int) -> bytes:
        """Pipeline callback: durably persist manifest + vault promising
        `promised_value`. Runs on the committer thread, before the increment."""
        with self._lock:
            tag = self._tree.root
            manifest_blob = self._seal_manifest_locked()
            vault_blob = self._seal_vault(tag, promised_value, self._next_seq)
            self._next_seq += 1
            version = self._manifest_version
        write_atomic(self.directory / MANIFEST_NAME, manifest_blob)
        write_atomic(self.directory / VAULT_NAME, vault_blob)
        with self._lock:
            self._committed_version = max(self._committed_version, version)
        return tag

    def _commit_inline_locked(self) -> None:
        """Synchronous commit used by the sync modes."""
        tag = self._tree.root
        if self.commit_mode == "sync":
            promised = self._sync_value + 1
        else:
            promised = self._sync_value
        manifest_blob = self._seal_manifest_locked()
        vault_blob = self._seal_vault(tag, promised, self._next_seq)
        self._next_seq += 1
        write_atomic(self.directory / MANIFEST_NAME, manifest_blob)
        write_atomic(self.directory / VAULT_NAME, vault_blob)
        _faults.hit(_faults.AFTER_VAULT_WRITE)
        if self.commit_mode == "sync":
            self._counter.increment()
            _faults.hit(_faults.AFTER_INCREMENT)
            self._sync_value = promised
        self._committed_version = self._manifest_version

    # --- close ---

    def _close_handle(self, handle: FileHandle) -> None:
        with self._lock:
            if handle.closed:
                return
            had_dirty = bool(handle._dirty)
            if had_dirty:
                self._flush_handle_locked(handle)
                _faults.hit(_faults.AFTER_DATA_FLUSH)
                if self.commit_mode != "batched":
                    self._commit_inline_locked()
            handle.closed = True
            self._handles.discard(handle)
        if self.commit_mode == "batched":
            assert self.pipeline is not None
            if had_dirty:
                self.pipeline.enqueue(CommitSource.CLOSE)
            self.pipeline.wait_stable(self.pipeline.local)

    def close(self) -> None:
        """Flush everything, force a final commit for any uncommitted tag
        change, and block until all promised increments are acknowledged."""
        with self._lock:
            if self._closed:
                return
            for handle in list(self._handles):
                if handle._dirty:
                    self._flush_handle_locked(handle)
                handle.closed = True
            self._handles.clear()
            if self.commit_mode != "batched":
                if self._manifest_version != self._committed_version:
                    self._commit_inline_locked()
                self._closed = True
                return
            needs_final = self._manifest_version != self._committed_version
        assert self.pipeline is not None
        try:
            if needs_final:
                self.pipeline.enqueue(CommitSource.SHUTDOWN)
            self.pipeline.wait_stable(self.pipeline.local)
        finally:
            self.pipeline.stop()
            with self._lock:
                self._closed = True

    def _ensure_open(self) -> None:
        if self._closed:
            raise VolumeError("volume is closed")

    # context manager convenience

    def __enter__(self) -> "Volume":
        return self

    def __exit__(self, *exc) -> None:
        if not self._closed:
            try:
                self.close()
            except Exception:
                if exc[0] is None:
                    raise


# --- whole-volume snapshot and restore (attack-harness support) ---


def _snapshots_dir(directory: Path, snapshots_dir: Path | None) -> Path:
    if snapshots_dir is not None:
        return Path(snapshots_dir)
    return directory.parent / (directory.name + ".snapshots")


def snapshot_volume(directory: str | Path, snapshots_dir: str | Path | None = None) -> str:
    """Byte-level copy of the volume directory. Never touches counter state."""
    directory = Path(directory)
    root = _snapshots_dir(directory, Path(snapshots_dir) if snapshots_dir else None)
    root.mkdir(parents=True, exist_ok=True)
    existing = [int(p.name) for p in root.iterdir() if p.name.isdigit()]
    snapshot_id = f"{(max(existing) + 1) if existing else 1:04d}"
    shutil.copytree(directory, root / snapshot_id)
    return snapshot_id


def restore_volume(
    directory: str | Path, snapshot_id: str, snapshots_dir: str | Path | None = None
) -> None:
    directory = Path(directory)
    root = _snapshots_dir(directory, Path(snapshots_dir) if snapshots_dir else None)
    source = root / snapshot_id
    if not source.is_dir():
        raise SnapshotNotFound(f"no snapshot {snapshot_id!r} under {root}")
    if directory.exists():
        shutil.rmtree(directory)
    shutil.copytree(source, directory)


def list_snapshots(directory: str | Path, snapshots_dir: str | Path | None = None) -> list[str]:
    directory = Path(directory)
    root = _snapshots_dir(directory, Path(snapshots_dir) if snapshots_dir else None)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if p.is_dir())
