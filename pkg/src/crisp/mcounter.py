"""Authenticated persistent monotonic counter with a simulated latency model.

Stands in for hardware counters (RPMB, TPM, SGX). The state file carries a
MAC under the provisioning key, so tampering or swapping the counter is
detected; trust in the counter itself (it cannot be rolled back by the
adversary) is an assumption of the surrounding protocol, and the MAC makes
violations of it visible in tests. Latency is modelled by sleeping for the
profile's read/write latency in the calling thread.

State file layout (fixed): magic "CRMC", version u8, identity 16 bytes,
value u64 big-endian, HMAC-SHA256 tag over everything before it.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from ._fsutil import write_atomic
from .errors import AuthFailure, Exhausted, StateExists

MAGIC = b"CRMC"
VERSION = 1
STATE_LEN = 4 + 1 + 16 + 8 + 32


@dataclass(frozen=True)
class CounterIdentity:
    """Fixed at provisioning: random id plus a fingerprint of the key."""

    uid: bytes  # 16 bytes
    key_fingerprint: bytes  # sha256 of the provisioning key

    def __post_init__(self):
        if len(self.uid) != 16:
            raise ValueError("counter id must be 16 bytes")
        if len(self.key_fingerprint) != 32:
            raise ValueError("key fingerprint must be 32 bytes")


@dataclass(frozen=True)
class LatencyProfile:
    write_latency_ms: float = 0.0
    read_latency_ms: float = 0.0
    usage_limit: int | None = None

    def __post_init__(self):
        if self.write_latency_ms < 0 or self.read_latency_ms < 0:
            raise ValueError("latencies must be >= 0")
        if self.usage_limit is not None and self.usage_limit <= 0:
            raise ValueError("usage_limit must be > 0 when set")


# Published latencies of common counter hardware; emmc-rpmb is the default
# deployment model, the rest are provided for experiments.
PROFILES: dict[str, LatencyProfile] = {
    "emmc-rpmb": LatencyProfile(19.97, 3.8, 2**32 - 1),
    "tpm": LatencyProfile(25.0, 15.0, 1_400_000),
    "sgx": LatencyProfile(165.0, 100.0, 1_050_000),
    "rote": LatencyProfile(2.0, 15.0, None),
    "instant": LatencyProfile(0.0, 0.0, None),
}

DEFAULT_PROFILE = PROFILES["emmc-rpmb"]


def _mac(key: bytes, identity_uid: bytes, value: int) -> bytes:
    body = MAGIC + struct.pack(">B", VERSION) + identity_uid + struct.pack(">Q", value)
    return hmac.new(key, body, hashlib.sha256).digest()


def _encode_state(key: bytes, identity_uid: bytes, value: int) -> bytes:
    return (
        MAGIC
        + struct.pack(">B", VERSION)
        + identity_uid
        + struct.pack(">Q", value)
        + _mac(key, identity_uid, value)
    )


def _decode_state(key: bytes, blob: bytes) -> tuple[bytes, int]:
    if len(blob) != STATE_LEN or blob[:4] != MAGIC or blob[4] != VERSION:
        raise AuthFailure("counter state file malformed")
    uid = blob[5:21]
    (value,) = struct.unpack(">Q", blob[21:29])
    if not hmac.compare_digest(blob[29:], _mac(key, uid, value)):
        raise AuthFailure("counter state MAC verification failed")
    return uid, value


def provision(
    state_path: str | Path,
    provisioning_key: bytes,
    profile: LatencyProfile = DEFAULT_PROFILE,
) -> CounterIdentity:
    """Create a fresh counter at value 0. Never silently resets an existing one."""
    if len(provisioning_key) != 32:
        raise ValueError("provisioning key must be 32 bytes")
    path = Path(state_path)
    if path.exists() and path.stat().st_size > 0:
        raise StateExists(f"counter state already present: {path}")
    uid = os.urandom(16)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_atomic(path, _encode_state(provisioning_key, uid, 0))
    return CounterIdentity(uid=uid, key_fingerprint=hashlib.sha256(provisioning_key).digest())


class MonotonicCounter:
    """Handle to a provisioned counter state file.

    Thread-safe: increments are serialized internally; reads may run
    concurrently and observe either the pre- or post-increment value
    (state replacement is an atomic rename, so never a torn value).
    """

    def __init__(
        self,
        state_path: str | Path,
        provisioning_key: bytes,
        profile: LatencyProfile = DEFAULT_PROFILE,
    ):
        if len(provisioning_key) != 32:
            raise ValueError("provisioning key must be 32 bytes")
        self._path = Path(state_path)
        self._key = provisioning_key
        self.profile = profile
        self._write_lock = threading.Lock()
        self._slowdown = 1.0
        uid, _ = self._load()
        self._identity = CounterIdentity(
            uid=uid, key_fingerprint=hashlib.sha256(provisioning_key).digest()
        )

    @property
    def identity(self) -> CounterIdentity:
        return self._identity

    @property
    def state_path(self) -> Path:
        return self._path

    def _load(self) -> tuple[bytes, int]:
        blob = self._path.read_bytes()
        return _decode_state(self._key, blob)

    def read(self) -> int:
        """Current value, after the profile's read latency."""
        if self.profile.read_latency_ms:
            time.sleep(self.profile.read_latency_ms / 1000.0)
        _, value = self._load()
        return value

    def increment(self) -> int:
        """Persist value+1 durably and return it. The new value is on stable
        storage before this returns."""
        with self._write_lock:
            delay = self.profile.write_latency_ms * self._slowdown
            if delay:
                time.sleep(delay / 1000.0)
            uid, value = self._load()
            limit = self.profile.usage_limit
            if limit is not None and value >= limit:
                raise Exhausted(f"counter reached usage limit {limit}")
            value += 1
            write_atomic(self._path, _encode_state(self._key, uid, value))
            return value

    def set_slowdown(self, factor: float) -> None:
        """Multiply write latency; models an adversary throttling the device."""
        if factor < 1:
            raise ValueError("slowdown factor must be >= 1")
        self._slowdown = float(factor)
