"""Run one analysis command under a wall-clock timeout and a memory ceiling.

The child starts in its own session so the whole process tree can be killed
with one signal. A monitor loop samples the tree's resident set every
``sample_period`` seconds and kills the group when the sum exceeds the
spaceout, or when the wall clock passes the timeout.

On Linux the calling process marks itself a child subreaper, so descendants
orphaned by the kill are re-parented here and reaped instead of lingering
as zombies under an init that may never collect them.
"""

from __future__ import annotations

import ctypes
import json
import logging
import os
import shlex
import signal
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import psutil

from verifarm.model import Outcome, OutcomeKind, ResourceLimits

log = logging.getLogger(__name__)

KILL_GRACE = 0.5
SAMPLE_PERIOD = 0.05
CAPTURE_LIMIT = 64 * 1024
OUTCOME_FILE = "outcome.json"

_PR_SET_CHILD_SUBREAPER = 36
_subreaper_lock = threading.Lock()
_subreaper_set = False


def _become_subreaper() -> None:
    global _subreaper_set
    if _subreaper_set or not sys.platform.startswith("linux"):
        return
    with _subreaper_lock:
        if _subreaper_set:
            return
        try:
            libc = ctypes.CDLL(None, use_errno=True)
            libc.prctl(_PR_SET_CHILD_SUBREAPER, 1, 0, 0, 0)
        except (OSError, AttributeError):
            log.debug("prctl unavailable; orphaned descendants reaped by init")
        _subreaper_set = True


class ExitKind(str, Enum):
    COMPLETED = "Completed"
    KILLED_TIMEOUT = "KilledTimeout"
    KILLED_SPACEOUT = "KilledSpaceout"
    SPAWN_FAILURE = "SpawnFailure"


@dataclass(frozen=True)
class ExecutionReport:
    exit_kind: ExitKind
    wall_time: float
    peak_memory: float  # MB
    exit_code: int | None = None
    stdout: str = ""
    stderr: str = ""
    pids: tuple[int, ...] = ()

    @property
    def crashed(self) -> bool:
        """Terminated by a signal we did not send."""
        return self.exit_kind is ExitKind.COMPLETED and self.exit_code is not None and self.exit_code < 0


def _tree(proc: psutil.Process) -> list[psutil.Process]:
    try:
        return [proc, *proc.children(recursive=True)]
    except psutil.NoSuchProcess:
        return []


def _rss_mb(procs: list[psutil.Process]) -> float:
    total = 0
    for p in procs:
        try:
            total += p.memory_info().rss
        except (psutil.NoSuchProcess, psutil.AccessDenied, psutil.ZombieProcess):
            pass
    return total / (1024 * 1024)


def _kill_tree(pgid: int, known: set[int]) -> None:
    try:
        os.killpg(pgid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass
    # descendants that called setsid escape the group
    for pid in known:
        try:
            os.kill(pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass


def _reap(pids: set[int], deadline: float) -> None:
    pending = set(pids)
    while pending and time.monotonic() < deadline:
        for pid in list(pending):
            try:
                done, _ = os.waitpid(pid, os.WNOHANG)
            except ChildProcessError:
                # not our child: gone, or reaped by its own parent
                if not psutil.pid_exists(pid) or _is_zombie_elsewhere(pid):
                    pending.discard(pid)
                continue
            if done:
                pending.discard(pid)
        if pending:
            time.sleep(0.01)


def _is_zombie_elsewhere(pid: int) -> bool:
    try:
        return psutil.Process(pid).ppid() != os.getpid() and psutil.Process(pid).status() == psutil.STATUS_ZOMBIE
    except psutil.NoSuchProcess:
        return True


def _tail(path: Path) -> str:
    try:
        with open(path, "rb") as fh:
            fh.seek(0, os.SEEK_END)
            size = fh.tell()
            fh.seek(max(0, size - CAPTURE_LIMIT))
            return fh.read().decode("utf-8", "replace")
    except FileNotFoundError:
        return ""


def execute_with_limits(
    command: str | list[str],
    workdir: str | os.PathLike,
    limits: ResourceLimits,
    env: dict[str, str] | None = None,
    sample_period: float = SAMPLE_PERIOD,
) -> ExecutionReport:
    """Run ``command`` in ``workdir`` and classify how it ended.

    ``command`` is split with shell quoting rules but no shell runs it.
    stdout/stderr go to ``.stdout``/``.stderr`` files in the workdir and the
    last 64 KiB of each is returned in the report.
    """
    _become_subreaper()
    workdir = Path(workdir)
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    out_path, err_path = workdir / ".stdout", workdir / ".stderr"
    start = time.monotonic()
    try:
        with open(out_path, "wb") as out, open(err_path, "wb") as err:
            proc = subprocess.Popen(
                argv,
                cwd=workdir,
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=out,
                stderr=err,
                start_new_session=True,
            )
    except (OSError, ValueError) as exc:
        return ExecutionReport(ExitKind.SPAWN_FAILURE, time.monotonic() - start, 0.0, stderr=str(exc))

    root = psutil.Process(proc.pid)
    seen: set[int] = {proc.pid}
    peak = 0.0
    kind = ExitKind.COMPLETED
    limit_mb = float(limits.spaceout)
    while True:
        procs = _tree(root)
        seen.update(p.pid for p in procs)
        peak = max(peak, _rss_mb(procs))
        elapsed = time.monotonic() - start
        if peak > limit_mb:
            kind = ExitKind.KILLED_SPACEOUT
            break
        if elapsed >= limits.timeout:
            kind = ExitKind.KILLED_TIMEOUT
            break
        try:
            proc.wait(timeout=min(sample_period, max(0.0, limits.timeout - elapsed)))
        except subprocess.TimeoutExpired:
            continue
        break

    if kind is not ExitKind.COMPLETED:
        seen.update(p.pid for p in _tree(root))
        _kill_tree(proc.pid, seen - {proc.pid})
    else:
        # the root exited on its own; anything it left running is killed too
        leftovers = {p.pid for p in psutil.process_iter() if _in_group(p, proc.pid)}
        seen |= leftovers
        if leftovers:
            _kill_tree(proc.pid, leftovers)
    proc.wait()
    wall = time.monotonic() - start
    _reap(seen - {proc.pid}, time.monotonic() + KILL_GRACE)
    return ExecutionReport(
        exit_kind=kind,
        wall_time=wall,
        peak_memory=peak,
        exit_code=proc.returncode if kind is ExitKind.COMPLETED else None,
        stdout=_tail(out_path),
        stderr=_tail(err_path),
        pids=tuple(sorted(seen)),
    )


def _in_group(p: psutil.Process, pgid: int) -> bool:
    try:
        return p.pid != pgid and os.getpgid(p.pid) == pgid and p.status() != psutil.STATUS_ZOMBIE
    except (ProcessLookupError, psutil.NoSuchProcess, psutil.ZombieProcess):
        return False


def classify(report: ExecutionReport, workdir: str | os.PathLike) -> Outcome:
    """Map an execution report (plus the tool's outcome file) to an Outcome.

    Completed(0) reads ``outcome.json`` from the workdir: ``{"kind": "Pass"}``
    or ``{"kind": "Defect", "detail": ..., "trace": <file>}``; no file means
    Pass. Any other exit code, a spawn failure, or an unreadable outcome file
    is a ToolError.
    """
    if report.exit_kind is ExitKind.KILLED_TIMEOUT:
        return Outcome(OutcomeKind.TIMEOUT, f"exceeded timeout after {report.wall_time:.2f}s")
    if report.exit_kind is ExitKind.KILLED_SPACEOUT:
        return Outcome(OutcomeKind.SPACEOUT, f"peak resident memory {report.peak_memory:.0f} MB")
    if report.exit_kind is ExitKind.SPAWN_FAILURE:
        return Outcome(OutcomeKind.TOOL_ERROR, f"spawn failure: {report.stderr}")
    if report.exit_code != 0:
        return Outcome(OutcomeKind.TOOL_ERROR, f"exit code {report.exit_code}")
    path = Path(workdir) / OUTCOME_FILE
    if not path.exists():
        return Outcome(OutcomeKind.PASS)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        kind = OutcomeKind(data["kind"])
    except (ValueError, KeyError, TypeError) as exc:
        return Outcome(OutcomeKind.TOOL_ERROR, f"unreadable {OUTCOME_FILE}: {exc}")
    if kind not in (OutcomeKind.PASS, OutcomeKind.DEFECT):
        return Outcome(OutcomeKind.TOOL_ERROR, f"tool reported reserved kind {kind.value}")
    return Outcome(kind, data.get("detail"))


def trace_file(workdir: str | os.PathLike) -> Path | None:
    """Defect trace named by the outcome file, if it exists inside workdir."""
    path = Path(workdir) / OUTCOME_FILE
    try:
        name = json.loads(path.read_text(encoding="utf-8")).get("trace")
    except (OSError, ValueError, AttributeError):
        return None
    if not name:
        return None
    trace = (Path(workdir) / name).resolve()
    if Path(workdir).resolve() not in trace.parents or not trace.is_file():
        return None
    return trace
