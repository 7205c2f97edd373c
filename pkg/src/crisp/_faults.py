"""Crash-fault injection points for the attack harness.

A fault point names one boundary in the commit sequence. When armed (via
`arm()` or the CRISP_FAULT_POINT environment variable), reaching that
boundary kills the process with SIGKILL, modelling a hard crash whose
on-disk state is exactly what had been flushed so far.
"""

from __future__ import annotations

import os
import signal

AFTER_DATA_FLUSH = "after_data_flush_before_vault_write"
AFTER_VAULT_WRITE = "after_vault_write_before_increment"
AFTER_INCREMENT = "after_increment_before_ack_processing"

FAULT_POINTS = frozenset({AFTER_DATA_FLUSH, AFTER_VAULT_WRITE, AFTER_INCREMENT})

ENV_VAR = "CRISP_FAULT_POINT"

_armed: str | None = os.environ.get(ENV_VAR) or None


def arm(point: str) -> None:
    if point not in FAULT_POINTS:
        raise ValueError(f"unknown fault point: {point}")
    global _armed
    _armed = point


def disarm() -> None:
    global _armed
    _armed = None


def armed() -> str | None:
    return _armed


def hit(point: str) -> None:
    """Kill the process if `point` is the armed fault point."""
    if _armed is not None and _armed == point:
        os.kill(os.getpid(), signal.SIGKILL)
