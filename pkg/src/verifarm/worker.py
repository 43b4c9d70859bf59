"""Worker agent: poll the queue, provision the tool version, run the task under
limits, publish the result and delete the entry.

A worker handles one task at a time. ``fabric`` may be an in-process
:class:`~verifarm.store.Fabric` or a :class:`~verifarm.service.FabricClient`.
"""

from __future__ import annotations

import io
import logging
import os
import shlex
import shutil
import socket
import stat
import tempfile
import threading
import time
import zipfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from verifarm.executor import ExecutionReport, classify, execute_with_limits, trace_file
from verifarm.model import (
    Outcome,
    OutcomeKind,
    ResultRecord,
    TaskId,
    TaskSpec,
    TelemetryRecord,
)
from verifarm.queue import DeleteReport, Dequeued, Exhausted, QueueEntry
from verifarm.service import Unreachable
from verifarm.store import ENTRY_POINT, MalformedArchive, check_version_archive

log = logging.getLogger(__name__)


class VersionMissing(Exception):
    pass


def install_archive(data: bytes, dest: Path) -> Path:
    """Unpack a version archive into ``dest`` atomically and mark the entry
    point executable."""
    check_version_archive(data)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{dest.name}-", dir=dest.parent))
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            zf.extractall(tmp)
        entry = tmp / ENTRY_POINT
        entry.chmod(entry.stat().st_mode | stat.S_IXUSR | stat.S_IXGRP | stat.S_IXOTH)
        if dest.exists():
            shutil.rmtree(dest)
        os.replace(tmp, dest)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return dest


def stage_payload(fabric: Any, task: TaskSpec, workdir: Path) -> None:
    """Fetch every payload blob into ``workdir``; zip blobs are unpacked."""
    for ref in task.payload:
        data = fabric.get_blob(ref)
        if ref.name.endswith(".zip"):
            with zipfile.ZipFile(io.BytesIO(data)) as zf:
                zf.extractall(workdir)
        else:
            (workdir / Path(ref.name).name).write_bytes(data)


def expand_command(command: str, tool_dir: Path, workdir: Path) -> str:
    return (command.replace("{tool}", shlex.quote(str(tool_dir)))
                   .replace("{workdir}", shlex.quote(str(workdir))))


def task_env(task: TaskSpec, tool_dir: Path) -> dict[str, str]:
    env = dict(os.environ)
    env.update({
        "VERIFARM_TOOL": str(tool_dir),
        "VERIFARM_TASK_ID": task.id,
        "VERIFARM_MODULE": task.module_name,
        "VERIFARM_RULE": task.rule_name,
        "VERIFARM_VERSION": task.version,
    })
    return env


def run_task(
    task: TaskSpec,
    tool_dir: Path,
    workdir: Path,
    fabric: Any = None,
    blobs: dict | None = None,
) -> tuple[Outcome, ExecutionReport | None]:
    """Stage, execute and classify one task. Shared by workers and the local backend.

    Payload comes from ``fabric`` when given, otherwise from the ``blobs``
    mapping of (container, name) to bytes.
    """
    try:
        if fabric is not None:
            stage_payload(fabric, task, workdir)
        else:
            stage_payload(_DictBlobs(blobs or {}), task, workdir)
    except Exception as exc:  # noqa: BLE001 - any staging failure is a tool error
        return Outcome(OutcomeKind.TOOL_ERROR, f"payload staging failed: {exc}"), None
    cmd = expand_command(task.command, tool_dir, workdir)
    report = execute_with_limits(cmd, workdir, task.limits, env=task_env(task, tool_dir))
    return classify(report, workdir), report


class _DictBlobs:
    def __init__(self, blobs: dict):
        self.blobs = blobs

    def get_blob(self, ref):
        return self.blobs[(ref.container, ref.name)]


class Disposition(str, Enum):
    PUBLISHED = "published"
    DISCARDED = "discarded"


@dataclass
class WorkerState:
    id: str
    cache_dir: Path
    poll_interval: float = 1.0
    version_cache: dict[str, Path] = field(default_factory=dict)
    current_task: TaskId | None = None


@dataclass(frozen=True)
class StepResult:
    task: TaskId
    action: str  # "published" | "discarded" | "exhausted" | "abandoned"
    outcome: Outcome | None = None
    delete_report: DeleteReport | None = None


def default_worker_id() -> str:
    return f"{socket.gethostname()}-{os.getpid()}"


class WorkerAgent:
    def __init__(self, fabric: Any, state: WorkerState, keep_workdirs: bool = False):
        self.fabric = fabric
        self.state = state
        self.keep_workdirs = keep_workdirs
        self.downloads = 0
        self._cache_lock = threading.Lock()
        state.cache_dir = Path(state.cache_dir)
        state.cache_dir.mkdir(parents=True, exist_ok=True)

    @property
    def id(self) -> str:
        return self.state.id

    def ensure_version(self, version: str) -> Path:
        """Local install directory for ``version``, downloading it on first use.

        Raises VersionMissing when the repository has no such package or the
        archive is unusable.
        """
        with self._cache_lock:
            cached = self.state.version_cache.get(version)
            if cached is not None and cached.is_dir():
                return cached
            dest = self.state.cache_dir / version
            if (dest / ENTRY_POINT).exists():
                # installed by an earlier process sharing this cache dir
                self.state.version_cache[version] = dest
                return dest
            data = self.fabric.download_version(version)
            self.downloads += 1
            if data is None:
                raise VersionMissing(f"version {version!r} not found in repository")
            try:
                path = install_archive(data, dest)
            except (MalformedArchive, zipfile.BadZipFile, OSError) as exc:
                raise VersionMissing(f"version {version!r} archive unusable: {exc}") from exc
            self.state.version_cache[version] = path
            log.info("%s installed %s", self.id, version)
            return path

    def step(self) -> StepResult | None:
        """One poll of the queue. None when nothing was available."""
        got = self.fabric.dequeue(self.id)
        if got is None:
            return None
        if isinstance(got, Exhausted):
            return self._report_exhausted(got.entry)
        return self.process(got)

    def process(self, claim: Dequeued) -> StepResult:
        """Run a claimed entry through to publish-or-discard."""
        entry, task = claim.entry, claim.entry.task
        self.state.current_task = task.id
        started = time.monotonic()
        workdir = Path(tempfile.mkdtemp(prefix=f"task-{task.id[:8]}-"))
        try:
            try:
                tool_dir = self.ensure_version(task.version)
            except VersionMissing as exc:
                outcome, report = Outcome(OutcomeKind.VERSION_NOT_FOUND, str(exc)), None
            else:
                outcome, report = run_task(task, tool_dir, workdir, fabric=self.fabric)
            processing = time.monotonic() - started
            if report is not None and report.crashed:
                # leave the entry invisible; it reappears after the visibility
                # window and the dequeue limit eventually turns it into a ToolError
                log.warning("%s: tool crashed on %s (exit %s); abandoning attempt",
                            self.id, task.id, report.exit_code)
                self._telemetry(entry, processing, "Abandoned")
                return StepResult(task.id, "abandoned")
            if outcome.kind is OutcomeKind.DEFECT:
                outcome = self._attach_trace(task, outcome, workdir)
            record = self._record(entry, outcome, processing)
            disposition, delete_report = self.publish_or_discard(task, record, claim.receipt)
            self._telemetry(entry, processing, outcome.kind.value)
            return StepResult(task.id, disposition.value, outcome, delete_report)
        finally:
            self.state.current_task = None
            if not self.keep_workdirs:
                shutil.rmtree(workdir, ignore_errors=True)

    def publish_or_discard(
        self, task: TaskSpec, record: ResultRecord, receipt: str
    ) -> tuple[Disposition, DeleteReport | None]:
        if not self.fabric.exists(task.id):
            log.info("%s: %s already completed elsewhere; discarding result", self.id, task.id)
            return Disposition.DISCARDED, None
        self.fabric.publish(task.client, record)
        report = self.fabric.delete(task.id, receipt)
        if report is DeleteReport.STALE_RECEIPT:
            log.warning("%s: stale receipt deleting %s; result already published", self.id, task.id)
        return Disposition.PUBLISHED, report

    def run(self, stop: threading.Event | None = None, max_backoff: float = 30.0) -> None:
        """Poll until ``stop`` is set. Fabric outages back off exponentially;
        task failures are logged and never end the loop."""
        stop = stop or threading.Event()
        backoff = 0.0
        while not stop.is_set():
            try:
                result = self.step()
            except Unreachable as exc:
                backoff = min(max_backoff, backoff * 2 if backoff else 0.5)
                log.warning("%s: fabric unreachable (%s); retry in %.1fs", self.id, exc, backoff)
                stop.wait(backoff)
                continue
            except Exception:  # noqa: BLE001
                log.exception("%s: task handling failed", self.id)
                stop.wait(self.state.poll_interval)
                continue
            backoff = 0.0
            if result is None:
                stop.wait(self.state.poll_interval)

    # -- helpers -------------------------------------------------------------

    def _record(self, entry: QueueEntry, outcome: Outcome, processing: float) -> ResultRecord:
        task = entry.task
        first = entry.first_dequeued_at if entry.first_dequeued_at is not None else entry.enqueued_at
        return ResultRecord(
            task=task.id,
            client=task.client,
            outcome=outcome,
            worker=self.id,
            queue_wait=max(0.0, (first - entry.enqueued_at) / 1000),
            processing_time=processing,
            completed_at=time.time_ns() // 1_000_000,
            module_name=task.module_name,
            rule_name=task.rule_name,
        )

    def _telemetry(self, entry: QueueEntry, processing: float, outcome: str) -> None:
        first = entry.first_dequeued_at if entry.first_dequeued_at is not None else entry.enqueued_at
        self.fabric.record_telemetry(TelemetryRecord(
            task=entry.task.id,
            queue_wait=max(0.0, (first - entry.enqueued_at) / 1000),
            processing_time=processing,
            dequeue_count=entry.dequeue_count,
            visibility_transitions=entry.reversions,
            worker=self.id,
            outcome=outcome,
        ))

    def _report_exhausted(self, entry: QueueEntry) -> StepResult:
        task = entry.task
        outcome = Outcome(
            OutcomeKind.TOOL_ERROR,
            f"dequeue limit reached after {entry.dequeue_count} attempts",
        )
        self.fabric.publish(task.client, self._record(entry, outcome, 0.0))
        self._telemetry(entry, 0.0, outcome.kind.value)
        return StepResult(task.id, "exhausted", outcome)

    def _attach_trace(self, task: TaskSpec, outcome: Outcome, workdir: Path) -> Outcome:
        path = trace_file(workdir)
        if path is None:
            return outcome
        ref = self.fabric.put_blob(task.client, f"traces/{task.id}", path.read_bytes())
        return Outcome(outcome.kind, outcome.detail, ref)


def run_worker_loop(fabric: Any, state: WorkerState, stop: threading.Event | None = None) -> None:
    WorkerAgent(fabric, state).run(stop)
