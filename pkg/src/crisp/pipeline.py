"""Optimistic commit batching.

fsync-driven commit requests are acknowledged immediately and parked in a
time-aware queue. A single committer thread drains the queue, writes one
sealed manifest + vault record promising counter value local+1, then
performs one counter increment. `local` is the latest promised value,
`stable` the latest acknowledged by the counter; a single batch is in
flight at any time, so stable <= local <= stable + 1 always holds.

The queue timeout bounds how long a request may wait (defence against an
adversary throttling the counter): a breach halts the pipeline permanently.
When a rate limit is configured, the effective timeout is the base timeout
plus the rate-limit delay.
"""

from __future__ import annotations

import enum
import itertools
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from . import _faults
from .errors import DeadlineExceeded, PipelineHalted


class CommitSource(enum.Enum):
    EXPLICIT_FSYNC = "explicit_fsync"
    CLOSE = "close"
    SHUTDOWN = "shutdown"


@dataclass(frozen=True)
class CommitRequest:
    request_id: int
    enqueue_time: float  # monotonic seconds
    source: CommitSource


@dataclass(frozen=True)
class BatchRecord:
    batch_seq: int
    mc_value: int
    tag: bytes
    fsync_count: int
    formed_at: float
    committed_at: float
    request_enqueue_times: tuple[float, ...] = ()

    @property
    def duration_ms(self) -> float:
        return (self.committed_at - self.formed_at) * 1000.0

    def as_dict(self) -> dict:
        return {
            "batch_seq": self.batch_seq,
            "mc_value": self.mc_value,
            "fsync_count": self.fsync_count,
            "duration_ms": round(self.duration_ms, 3),
        }


@dataclass(frozen=True)
class PipelineConfig:
    batch_interval_ms: float = 0.0
    mc_rate_limit_ms: float = 0.0  # 0 disables
    queue_timeout_ms: float | None = None  # None disables

    def __post_init__(self):
        if self.batch_interval_ms < 0 or self.mc_rate_limit_ms < 0:
            raise ValueError("intervals must be >= 0")
        if self.queue_timeout_ms is not None and self.queue_timeout_ms <= 0:
            raise ValueError("queue_timeout_ms must be > 0 when set")

    @property
    def effective_queue_timeout_s(self) -> float | None:
        """Base timeout plus the rate-limit delay when rate limiting is on."""
        if self.queue_timeout_ms is None:
            return None
        return (self.queue_timeout_ms + self.mc_rate_limit_ms) / 1000.0


class CommitPipeline:
    """Owns the local/stable pair and the committer thread for one volume.

    `commit_fn(promised_value)` must durably persist the sealed manifest and
    a vault record carrying `promised_value`, returning the committed tag.
    It runs on the committer thread, strictly before the counter increment.
    """

    def __init__(
        self,
        counter,
        commit_fn: Callable[[int], bytes],
        config: PipelineConfig = PipelineConfig(),
        initial_value: int = 0,
    ):
        self._counter = counter
        self._commit_fn = commit_fn
        self.config = config
        self._lock = threading.Lock()
        self._work = threading.Condition(self._lock)
        self._progress = threading.Condition(self._lock)
        self._queue: list[CommitRequest] = []
        self._ids = itertools.count(1)
        self._local = initial_value
        self._stable = initial_value
        self._halted: str | None = None
        self._stop = False
        self._last_batch_end: float | None = None
        self._records: list[BatchRecord] = []
        self._thread: threading.Thread | None = None

    # -- state views --

    @property
    def local(self) -> int:
        with self._lock:
            return self._local

    @property
    def stable(self) -> int:
        with self._lock:
            return self._stable

    @property
    def halted_reason(self) -> str | None:
        with self._lock:
            return self._halted

    def queue_length(self) -> int:
        with self._lock:
            return len(self._queue)

    def metrics(self) -> tuple[BatchRecord, ...]:
        with self._lock:
            return tuple(self._records)

    # -- lifecycle --

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("pipeline already started")
        self._thread = threading.Thread(target=self._run, name="crisp-committer", daemon=True)
        self._thread.start()

    def stop(self, timeout: float | None = 10.0) -> None:
        """Ask the committer to exit once the queue is drained and join it."""
        with self._lock:
            self._stop = True
            self._work.notify_all()
            self._progress.notify_all()
        if self._thread is not None:
            self._thread.join(timeout)

    # -- client operations --

    def enqueue(self, source: CommitSource) -> CommitRequest:
        """Optimistic acknowledgment: appends a request and returns at once."""
        with self._lock:
            if self._halted is not None:
                raise PipelineHalted(self._halted)
            if self._stop:
                raise PipelineHalted("pipeline stopped")
            request = CommitRequest(
                request_id=next(self._ids),
                enqueue_time=time.monotonic(),
                source=source,
            )
            self._queue.append(request)
            self._work.notify()
            return request

    def wait_stable(self, target: int, deadline_s: float | None = None) -> int:
        """Block until stable >= target; returns the stable value observed."""
        limit = None if deadline_s is None else time.monotonic() + deadline_s
        with self._lock:
            while self._stable < target and self._halted is None:
                if limit is not None:
                    remaining = limit - time.monotonic()
                    if remaining <= 0:
                        raise DeadlineExceeded(f"stable did not reach {target}")
                    self._progress.wait(remaining)
                else:
                    self._progress.wait()
            if self._stable >= target:
                return self._stable
            raise PipelineHalted(self._halted)

    # -- committer --

    def _halt_locked(self, reason: str) -> None:
        self._halted = reason
        self._work.notify_all()
        self._progress.notify_all()

    def _gate_s(self) -> float:
        return max(self.config.batch_interval_ms, self.config.mc_rate_limit_ms) / 1000.0

    def _run(self) -> None:
        while True:
            with self._lock:
                batch = self._await_batch_locked()
                if batch is None:
                    return
            formed_at = time.monotonic()
            try:
                tag = self._commit_fn(self._local + 1)
            except Exception as exc:
                with self._lock:
                    self._halt_locked(f"commit failed: {exc}")
                return
            with self._lock:
                self._local += 1
                promised = self._local
            _faults.hit(_faults.AFTER_VAULT_WRITE)
            try:
                value = self._counter.increment()
            except Exception as exc:
                with self._lock:
                    self._halt_locked(f"counter increment failed: {exc}")
                return
            _faults.hit(_faults.AFTER_INCREMENT)
            committed_at = time.monotonic()
            with self._lock:
                if value != promised:
                    self._halt_locked(f"counter skew: got {value}, promised {promised}")
                    return
                self._stable = promised
                self._last_batch_end = committed_at
                self._records.append(
                    BatchRecord(
                        batch_seq=len(self._records) + 1,
                        mc_value=value,
                        tag=tag,
                        fsync_count=len(batch),
                        formed_at=formed_at,
                        committed_at=committed_at,
                        request_enqueue_times=tuple(r.enqueue_time for r in batch),
                    )
                )
                self._progress.notify_all()

    def _await_batch_locked(self) -> list[CommitRequest] | None:
        """Wait until a batch may form, then drain the queue atomically.

        Returns None when the pipeline should exit (halted, or stopped with
        an empty queue). Enforces the batch-interval / rate-limit gate and
        the queue timeout, including breaches that occur while gated.
        """
        eff_timeout = self.config.effective_queue_timeout_s
        while True:
            if self._halted is not None:
                return None
            if not self._queue:
                if self._stop:
                    return None
                self._work.wait()
                continue
            now = time.monotonic()
            oldest = self._queue[0].enqueue_time
            if eff_timeout is not None and now - oldest >= eff_timeout:
                self._halt_locked(
                    f"queue timeout: request waited {(now - oldest) * 1000:.1f} ms"
                )
                return None
            gate = (self._last_batch_end or 0.0) + self._gate_s()
            if now >= gate:
                batch = self._queue
                self._queue = []
                return batch
            deadline = gate if eff_timeout is None else min(gate, oldest + eff_timeout)
            self._work.wait(max(deadline - now, 0.0001))
