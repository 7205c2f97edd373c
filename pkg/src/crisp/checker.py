"""Blocking checker: wait until promised counter values are stable.

Exposed two ways: a line-oriented TCP endpoint ("CHECK\\n" or
"CHECK <timeout_ms>\\n" -> "OK <stable>\\n" / "ERR <reason>\\n", one request
per connection), and an in-process hook invoked at the end of fsync that
blocks the calling thread with a configured probability. Both snapshot the
pipeline's local value once at call receipt and wait until stable reaches
it; neither ever causes a counter increment.
"""

from __future__ import annotations

import random
import socket
import socketserver
import threading
from dataclasses import dataclass

from .errors import DeadlineExceeded, PipelineHalted
from .pipeline import CommitPipeline


@dataclass(frozen=True)
class CheckerConfig:
    listen: str = "127.0.0.1:0"
    # Probability that an fsync blocks until its promise is stable. Settable
    # only through trusted configuration, never by external input.
    internal_probability: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.internal_probability <= 1.0:
            raise ValueError("internal_probability must be within [0, 1]")

    def address(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        if not host:
            raise ValueError(f"listen address must be host:port, got {self.listen!r}")
        return host, int(port)


class InternalChecker:
    """Probabilistic fsync interception; blocks the caller, no TCP involved."""

    def __init__(self, pipeline: CommitPipeline, probability: float, seed: int | None = None):
        self._pipeline = pipeline
        self.probability = probability
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def maybe_wait(self) -> int | None:
        """With the configured probability, wait for the current local value
        to become stable. Returns the stable value when it blocked."""
        if self.probability <= 0.0:
            return None
        with self._lock:
            fire = self._rng.random() < self.probability
        if not fire:
            return None
        return self._pipeline.wait_stable(self._pipeline.local)


class _CheckHandler(socketserver.StreamRequestHandler):
    def handle(self):
        try:
            line = self.rfile.readline(128).decode("ascii", "replace").strip()
        except OSError:
            return
        parts = line.split()
        timeout_ms: float | None = None
        if not parts or parts[0] != "CHECK" or len(parts) > 2:
            self._reply("ERR bad-request")
            return
        if len(parts) == 2:
            try:
                timeout_ms = float(parts[1])
            except ValueError:
                self._reply("ERR bad-request")
                return
        pipeline: CommitPipeline = self.server.pipeline  # type: ignore[attr-defined]
        target = pipeline.local  # snapshot at call receipt
        try:
            stable = pipeline.wait_stable(
                target, None if timeout_ms is None else timeout_ms / 1000.0
            )
        except PipelineHalted:
            self._reply("ERR halted")
            return
        except DeadlineExceeded:
            self._reply("ERR deadline")
            return
        self._reply(f"OK {stable}")

    def _reply(self, text: str) -> None:
        try:
            self.wfile.write((text + "\n").encode("ascii"))
        except OSError:
            pass


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class CheckerServer:
    """TCP front end for the checker; one request per connection."""

    def __init__(self, pipeline: CommitPipeline, config: CheckerConfig = CheckerConfig()):
        self._server = _Server(config.address(), _CheckHandler)
        self._server.pipeline = pipeline  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="crisp-checker", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(5.0)


def check(address: tuple[str, int], timeout_ms: float | None = None, connect_timeout: float = 10.0) -> int:
    """Client helper: dial, send one CHECK, return the stable value."""
    request = "CHECK\n" if timeout_ms is None else f"CHECK {timeout_ms:g}\n"
    with socket.create_connection(address, timeout=connect_timeout) as sock:
        sock.sendall(request.encode("ascii"))
        sock.settimeout(None)
        data = b""
        while not data.endswith(b"\n"):
            more = sock.recv(256)
            if not more:
                break
            data += more
    text = data.decode("ascii", "replace").strip()
    if text.startswith("OK "):
        return int(text[3:])
    if text == "ERR halted":
        raise PipelineHalted("checker: pipeline halted")
    if text == "ERR deadline":
        raise DeadlineExceeded("checker: deadline exceeded")
    raise OSError(f"checker protocol error: {text!r}")
