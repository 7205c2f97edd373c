"""Adversary and fault-injection toolkit.

Scripts drive a volume inside a forked child process so that crashes are
real process kills whose surviving state is exactly what reached disk.
The parent orchestrates: it provisions the counter, forks children, copies
and restores the volume directory (never the counter state), arms fault
points, and records the outcome of every reopen attempt.

Script JSON: {"actions": [{"op": "write"}, {"op": "fsync"},
{"op": "snapshot"}, {"op": "restore", "snapshot": 1}, {"op": "reopen"},
{"op": "expect", "outcome": "RollbackDetected"},
{"op": "crash", "point": "after_vault_write_before_increment"}, ...]}
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import _faults
from .errors import (
    CounterIdentityMismatch,
    CrispError,
    IncompleteCommit,
    PipelineHalted,
    RollbackDetected,
    ScriptError,
    SnapshotNotFound,
    TagMismatch,
    VaultAuthFailure,
)
from .mcounter import LatencyProfile, MonotonicCounter, provision
from .pipeline import PipelineConfig

OUTCOME_OPEN = "Open"
EXPECTED_OUTCOMES = frozenset(
    {"Open", "RollbackDetected", "IncompleteCommit", "TagMismatch", "PipelineHalted"}
)

_OUTCOME_CLASSES = (
    (RollbackDetected, "RollbackDetected"),
    (IncompleteCommit, "IncompleteCommit"),
    (TagMismatch, "TagMismatch"),
    (VaultAuthFailure, "VaultAuthFailure"),
    (CounterIdentityMismatch, "CounterIdentityMismatch"),
    (PipelineHalted, "PipelineHalted"),
)

SCRIPT_OPS = frozenset(
    {"write", "fsync", "check", "snapshot", "restore", "crash", "slowdown", "reopen", "expect", "close"}
)


def _outcome_name(exc: BaseException) -> str | None:
    for cls, name in _OUTCOME_CLASSES:
        if isinstance(exc, cls):
            return name
    return None


def classify(fn) -> str:
    """Run fn() and name its outcome: 'Open' or the detection class."""
    try:
        fn()
    except CrispError as exc:
        name = _outcome_name(exc)
        if name is None:
            raise
        return name
    return OUTCOME_OPEN


@dataclass(frozen=True)
class HarnessConfig:
    workdir: Path
    master_key: bytes
    counter_key: bytes
    write_latency_ms: float = 0.0
    read_latency_ms: float = 0.0
    chunk_size: int = 4096
    pipeline: PipelineConfig = PipelineConfig()

    @property
    def volume_dir(self) -> Path:
        return self.workdir / "volume"

    @property
    def counter_path(self) -> Path:
        return self.workdir / "counter.state"

    @property
    def snapshots_dir(self) -> Path:
        return self.workdir / "snapshots"

    @property
    def profile(self) -> LatencyProfile:
        return LatencyProfile(self.write_latency_ms, self.read_latency_ms, None)

    @classmethod
    def fresh(cls, workdir: str | Path, seed: int = 0, **kwargs) -> "HarnessConfig":
        rng = random.Random(seed)
        return cls(
            workdir=Path(workdir),
            master_key=rng.randbytes(32),
            counter_key=rng.randbytes(32),
            **kwargs,
        )


# --- child driver (runs in a forked process) ---


def _child_main(conn, cfg: HarnessConfig) -> None:
    from .volume import Volume  # after fork; parent never opens the volume

    counter = None
    volume = None
    handles: dict[str, object] = {}

    def get_counter() -> MonotonicCounter:
        nonlocal counter
        if counter is None:
            counter = MonotonicCounter(cfg.counter_path, cfg.counter_key, cfg.profile)
        return counter

    while True:
        try:
            cmd = conn.recv()
        except EOFError:
            return
        op = cmd["op"]
        try:
            if op == "create":
                volume = Volume.create(
                    cfg.volume_dir,
                    cfg.master_key,
                    get_counter(),
                    chunk_size=cfg.chunk_size,
                    pipeline_config=cfg.pipeline,
                )
                conn.send({"ok": True})
            elif op == "open":
                try:
                    volume = Volume.open(
                        cfg.volume_dir,
                        cfg.master_key,
                        get_counter(),
                        pipeline_config=cfg.pipeline,
                    )
                    conn.send({"ok": True, "outcome": OUTCOME_OPEN})
                except CrispError as exc:
                    name = _outcome_name(exc)
                    if name is None:
                        raise
                    conn.send({"ok": True, "outcome": name})
            elif op == "write":
                path = cmd.get("path", "app.dat")
                handle = handles.get(path)
                if handle is None:
                    handle = volume.open_file(path, "rw")
                    handles[path] = handle
                handle.seek(handle.size())
                handle.write(cmd["data"])
                conn.send({"ok": True})
            elif op == "fsync":
                path = cmd.get("path", "app.dat")
                handle = handles.get(path)
                if handle is None:
                    handle = volume.open_file(path, "rw")
                    handles[path] = handle
                ticket = handle.fsync()
                conn.send({"ok": True, "request_id": ticket.request_id})
            elif op == "check":
                stable = volume.pipeline.wait_stable(volume.pipeline.local)
                conn.send({"ok": True, "stable": stable})
            elif op == "slowdown":
                get_counter().set_slowdown(float(cmd["factor"]))
                conn.send({"ok": True})
            elif op == "arm":
                _faults.arm(cmd["point"])
                conn.send({"ok": True})
            elif op == "close":
                handles.clear()
                if volume is not None:
                    volume.close()
                    volume = None
                conn.send({"ok": True})
            elif op == "exit":
                conn.send({"ok": True})
                return
            else:
                conn.send({"ok": False, "error": "BadCommand", "message": op})
        except CrispError as exc:
            conn.send({"ok": False, "error": type(exc).__name__, "message": str(exc)})
        except Exception as exc:  # surface unexpected failures to the parent
            conn.send({"ok": False, "error": type(exc).__name__, "message": repr(exc)})


class ChildSession:
    """One forked child holding (at most) one open volume."""

    def __init__(self, cfg: HarnessConfig):
        ctx = multiprocessing.get_context("fork")
        self._conn, child_conn = ctx.Pipe()
        self.process = ctx.Process(target=_child_main, args=(child_conn, cfg), daemon=True)
        self.process.start()
        child_conn.close()
        self.alive = True

    def call(self, timeout: float = 60.0, **cmd) -> dict:
        """Send one command; {"ok": False, "error": "ChildDied"} if it crashed."""
        if not self.alive:
            return {"ok": False, "error": "ChildGone", "message": "session closed"}
        try:
            self._conn.send(cmd)
            if not self._conn.poll(timeout):
                self.kill()
                return {"ok": False, "error": "ChildTimeout", "message": str(cmd)}
            return self._conn.recv()
        except (EOFError, BrokenPipeError, ConnectionResetError):
            self._reap()
            return {"ok": False, "error": "ChildDied", "message": str(cmd)}

    def wait_dead(self, timeout: float = 60.0) -> bool:
        self.process.join(timeout)
        dead = not self.process.is_alive()
        if dead:
            self._reap()
        return dead

    def kill(self) -> None:
        if self.process.is_alive():
            self.process.kill()
        self._reap()

    def _reap(self) -> None:
        self.process.join(5.0)
        self._conn.close()
        self.alive = False


# --- script execution ---


@dataclass
class StepResult:
    index: int
    op: str
    ok: bool
    detail: str = ""


@dataclass
class ScriptReport:
    steps: list[StepResult] = field(default_factory=list)
    outcomes: list[str] = field(default_factory=list)  # one per reopen

    @property
    def passed(self) -> bool:
        return all(step.ok for step in self.steps)

    def failures(self) -> list[StepResult]:
        return [s for s in self.steps if not s.ok]


def validate_script(script: dict) -> list[dict]:
    if not isinstance(script, dict) or not isinstance(script.get("actions"), list):
        raise ScriptError("script must be an object with an 'actions' list")
    actions = script["actions"]
    for i, action in enumerate(actions):
        if not isinstance(action, dict) or "op" not in action:
            raise ScriptError(f"action {i}: must be an object with an 'op'")
        op = action["op"]
        if op not in SCRIPT_OPS:
            raise ScriptError(f"action {i}: unknown op {op!r}")
        if op == "crash" and action.get("point") not in _faults.FAULT_POINTS:
            raise ScriptError(f"action {i}: crash needs a valid fault point")
        if op == "expect" and action.get("outcome") not in EXPECTED_OUTCOMES:
            raise ScriptError(f"action {i}: expect needs one of {sorted(EXPECTED_OUTCOMES)}")
        if op == "slowdown" and not (isinstance(action.get("factor"), (int, float)) and action["factor"] >= 1):
            raise ScriptError(f"action {i}: slowdown needs factor >= 1")
        if op == "restore" and "snapshot" not in action:
            raise ScriptError(f"action {i}: restore needs a snapshot reference")
    return actions


def _step_data(seed: int, index: int, length: int = 1024) -> bytes:
    block = hashlib.sha256(f"crisp-script:{seed}:{index}".encode()).digest()
    return (block * (length // len(block) + 1))[:length]


def run_script(script: dict, cfg: HarnessConfig, data_seed: int = 0) -> ScriptReport:
    """Execute a script against a fresh counter + volume under cfg.workdir.

    The volume is created implicitly before the first action. Crashes kill
    the child process at the armed fault point; reopen forks a fresh child
    and records the outcome of the open attempt.
    """
    actions = validate_script(script)
    report = ScriptReport()
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    if cfg.counter_path.exists():
        raise ScriptError(f"workdir already used: {cfg.workdir}")
    provision(cfg.counter_path, cfg.counter_key, cfg.profile)

    child = ChildSession(cfg)
    snapshots: list[str] = []
    last_outcome = OUTCOME_OPEN
    try:
        response = child.call(op="create")
        if not response.get("ok"):
            raise ScriptError(f"volume creation failed: {response}")

        def quiesce_if_alive() -> None:
            if child.alive:
                child.call(op="check")

        for i, action in enumerate(actions):
            op = action["op"]
            ok, detail = True, ""
            if op in ("write", "fsync", "check", "slowdown", "close"):
                if op == "write":
                    cmd = dict(op="write", path=action.get("path", "app.dat"),
                               data=_step_data(data_seed, i, int(action.get("length", 1024))))
                elif op == "fsync":
                    cmd = dict(op="fsync", path=action.get("path", "app.dat"))
                elif op == "slowdown":
                    cmd = dict(op="slowdown", factor=action["factor"])
                else:
                    cmd = dict(op=op)
                response = child.call(**cmd)
                if not response.get("ok"):
                    ok = response.get("error") == "PipelineHalted"
                    detail = f"{response.get('error')}: {response.get('message', '')}"
                    if response.get("error") == "PipelineHalted":
                        last_outcome = "PipelineHalted"
            elif op == "snapshot":
                quiesce_if_alive()
                from .volume import snapshot_volume

                snapshots.append(snapshot_volume(cfg.volume_dir, cfg.snapshots_dir))
                detail = f"snapshot {snapshots[-1]}"
            elif op == "restore":
                ref = action["snapshot"]
                from .volume import restore_volume

                if child.alive:
                    child.kill()
                try:
                    sid = snapshots[ref - 1] if isinstance(ref, int) else str(ref)
                    restore_volume(cfg.volume_dir, sid, cfg.snapshots_dir)
                    detail = f"restored {sid}"
                except (SnapshotNotFound, IndexError) as exc:
                    ok, detail = False, f"restore failed: {exc}"
            elif op == "crash":
                point = action["point"]
                quiesce_if_alive()
                child.call(op="arm", point=point)
                child.call(op="write", path="crash.dat", data=_step_data(data_seed, i))
                child.call(op="fsync", path="crash.dat", timeout=120.0)
                if not child.wait_dead(120.0):
                    ok, detail = False, "child survived armed fault point"
                    child.kill()
                else:
                    detail = f"crashed at {point}"
            elif op == "reopen":
                if child.alive:
                    quiesce_if_alive()
                    child.kill()
                child = ChildSession(cfg)
                response = child.call(op="open", timeout=120.0)
                if response.get("ok"):
                    last_outcome = response["outcome"]
                    detail = last_outcome
                    report.outcomes.append(last_outcome)
                    if last_outcome != OUTCOME_OPEN:
                        child.kill()
                else:
                    ok, detail = False, f"reopen errored: {response}"
            elif op == "expect":
                expected = action["outcome"]
                ok = last_outcome == expected
                detail = f"expected {expected}, observed {last_outcome}"
            report.steps.append(StepResult(index=i, op=op, ok=ok, detail=detail))
    finally:
        if child.alive:
            child.call(op="close", timeout=120.0)
            child.call(op="exit")
            child.kill()
    return report


# --- random adversary generation with an exact outcome oracle ---


def random_adversary(seed: int, steps: int) -> dict:
    """Generate a random benign/adversarial interleaving with oracle-derived
    expectations embedded as expect actions.

    The oracle tracks commit groups: every fsync+check pair advances a
    generation counter g shared by the live volume and the real counter;
    snapshots record g; a restore rewinds the volume's generation only. A
    reopen must yield Open exactly when the volume generation equals g.
    """
    if steps <= 0:
        raise ValueError("steps must be > 0")
    rng = random.Random(seed)
    actions: list[dict] = []
    g = 0
    volume_g = 0
    snap_g: list[int] = []
    is_open = True

    for _ in range(steps):
        if not is_open:
            op = rng.choice(["restore", "reopen"]) if snap_g else "reopen"
        else:
            choices = ["mutate", "mutate", "write", "snapshot", "reopen"]
            if snap_g:
                choices += ["restore", "restore"]
            op = rng.choice(choices)

        if op == "mutate":
            actions += [{"op": "write"}, {"op": "fsync"}, {"op": "check"}]
            g += 1
            volume_g = g
        elif op == "write":
            actions.append({"op": "write"})
        elif op == "snapshot":
            actions.append({"op": "snapshot"})
            snap_g.append(volume_g)
        elif op == "restore":
            pick = rng.randrange(len(snap_g))
            actions.append({"op": "restore", "snapshot": pick + 1})
            volume_g = snap_g[pick]
            is_open = False
        elif op == "reopen":
            expected = OUTCOME_OPEN if volume_g == g else "RollbackDetected"
            actions += [{"op": "reopen"}, {"op": "expect", "outcome": expected}]
            if expected == OUTCOME_OPEN:
                is_open = True
            else:
                break

    if is_open:
        actions += [{"op": "reopen"}, {"op": "expect", "outcome": OUTCOME_OPEN}]
    elif actions[-1]["op"] != "expect":
        expected = OUTCOME_OPEN if volume_g == g else "RollbackDetected"
        actions += [{"op": "reopen"}, {"op": "expect", "outcome": expected}]
    return {"seed": seed, "actions": actions}


def load_script(path: str | Path) -> dict:
    try:
        with open(path, "r") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScriptError(f"cannot load script {path}: {exc}") from exc
