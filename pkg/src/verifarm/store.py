"""Fabric services other than the queue: blobs, result topics, telemetry,
tool-version packages and the worker registry, plus :class:`Fabric`, the
in-process facade that hosts all of them over one state root.

On-disk layout under the state root::

    blobs/<container>/<name>
    queue.journal
    topics/<client>.jsonl
    telemetry.jsonl
    versions/index.json      (archives live in blobs/versions/)

Passing ``root=None`` keeps everything in memory.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import re
import threading
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from verifarm.model import (
    BlobRef,
    Clock,
    Counter,
    ResultRecord,
    SystemClock,
    TaskId,
    TaskSpec,
    TelemetryRecord,
    WaitStats,
    summarize,
)
from verifarm.queue import (
    DeleteReport,
    Dequeued,
    Exhausted,
    QueueConfig,
    SnapshotRow,
    WorkQueue,
)

log = logging.getLogger(__name__)

ENTRY_POINT = "run-analysis"
VERSIONS_CONTAINER = "versions"

_SEGMENT = re.compile(r"^[A-Za-z0-9._+-]+$")


class FabricError(Exception):
    pass


class NotFound(FabricError):
    pass


class HashMismatch(FabricError):
    pass


class MalformedArchive(FabricError):
    pass


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _check_path(container: str, name: str) -> None:
    if not container or not name:
        raise ValueError("container and name must be non-empty")
    if not _SEGMENT.match(container):
        raise ValueError(f"bad container name {container!r}")
    for seg in name.split("/"):
        if not _SEGMENT.match(seg) or seg in (".", ".."):
            raise ValueError(f"bad blob name {name!r}")


class BlobStore:
    def __init__(self, root: Path | None = None):
        self.root = root
        self._mem: dict[tuple[str, str], bytes] = {}
        self._lock = threading.Lock()

    def put(self, container: str, name: str, data: bytes) -> BlobRef:
        _check_path(container, name)
        ref = BlobRef(container, name, digest(data))
        with self._lock:
            if self.root is None:
                self._mem[(container, name)] = bytes(data)
            else:
                path = self.root / container / name
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_name(path.name + ".part")
                tmp.write_bytes(data)
                os.replace(tmp, path)
        return ref

    def read(self, container: str, name: str) -> bytes:
        _check_path(container, name)
        with self._lock:
            if self.root is None:
                try:
                    return self._mem[(container, name)]
                except KeyError:
                    raise NotFound(f"{container}/{name}") from None
            try:
                return (self.root / container / name).read_bytes()
            except FileNotFoundError:
                raise NotFound(f"{container}/{name}") from None

    def get(self, ref: BlobRef) -> bytes:
        data = self.read(ref.container, ref.name)
        if digest(data) != ref.content_hash:
            raise HashMismatch(f"{ref.container}/{ref.name}")
        return data

    def count(self) -> int:
        with self._lock:
            if self.root is None:
                return len(self._mem)
            if not self.root.exists():
                return 0
            return sum(1 for p in self.root.rglob("*") if p.is_file() and not p.name.endswith(".part"))


class TopicBus:
    """Append-only per-client result channels read by cursor."""

    def __init__(self, root: Path | None = None):
        self.root = root
        self._topics: dict[str, list[ResultRecord]] = {}
        self._lock = threading.Lock()
        if root is not None:
            root.mkdir(parents=True, exist_ok=True)
            for path in sorted(root.glob("*.jsonl")):
                self._topics[path.stem] = [
                    ResultRecord.from_json(json.loads(line))
                    for line in path.read_text(encoding="utf-8").splitlines()
                    if line.strip()
                ]

    def publish(self, topic: str, record: ResultRecord) -> int:
        if topic != record.client:
            raise ValueError(f"record for client {record.client} published to topic {topic}")
        _check_path("topics", topic)
        with self._lock:
            msgs = self._topics.setdefault(topic, [])
            msgs.append(record)
            if self.root is not None:
                with open(self.root / f"{topic}.jsonl", "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json()) + "\n")
            return len(msgs)

    def poll(self, topic: str, cursor: int = 0) -> tuple[list[ResultRecord], int]:
        if cursor < 0:
            raise ValueError("cursor must be non-negative")
        with self._lock:
            msgs = self._topics.get(topic, [])
            batch = msgs[cursor:]
            return batch, cursor + len(batch)

    def close_topic(self, topic: str) -> bool:
        with self._lock:
            found = self._topics.pop(topic, None) is not None
            if self.root is not None:
                (self.root / f"{topic}.jsonl").unlink(missing_ok=True)
            return found


class TelemetryTable:
    def __init__(self, path: Path | None = None):
        self.path = path
        self._rows: list[TelemetryRecord] = []
        self._lock = threading.Lock()
        if path is not None and path.exists():
            self._rows = [
                TelemetryRecord.from_json(json.loads(line))
                for line in path.read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]

    def record(self, rec: TelemetryRecord) -> None:
        with self._lock:
            self._rows.append(rec)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec.to_json()) + "\n")

    def query(self, task: TaskId) -> list[TelemetryRecord]:
        with self._lock:
            return [r for r in self._rows if r.task == task]

    def all(self) -> list[TelemetryRecord]:
        with self._lock:
            return list(self._rows)

    def stats(self) -> WaitStats:
        """Queue-wait statistics over every recorded attempt."""
        with self._lock:
            return summarize([r.queue_wait for r in self._rows])


@dataclass(frozen=True)
class VersionPackage:
    id: str
    archive: BlobRef
    uploaded_at: int

    def to_json(self) -> dict[str, Any]:
        return {"id": self.id, "archive": self.archive.to_json(), "uploaded_at": self.uploaded_at}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> VersionPackage:
        return cls(d["id"], BlobRef.from_json(d["archive"]), int(d["uploaded_at"]))


def check_version_archive(data: bytes) -> None:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            names = zf.namelist()
            bad = zf.testzip()
    except zipfile.BadZipFile as exc:
        raise MalformedArchive(f"not a zip archive: {exc}") from None
    if bad is not None:
        raise MalformedArchive(f"corrupt member {bad}")
    if ENTRY_POINT not in names:
        raise MalformedArchive(f"archive root lacks {ENTRY_POINT!r}")


class VersionRepository:
    """Tool-version packages; re-uploading an id replaces its package."""

    def __init__(self, blobs: BlobStore, index_path: Path | None = None):
        self.blobs = blobs
        self.index_path = index_path
        self._lock = threading.Lock()
        self._index: dict[str, VersionPackage] = {}
        if index_path is not None and index_path.exists():
            raw = json.loads(index_path.read_text(encoding="utf-8"))
            self._index = {k: VersionPackage.from_json(v) for k, v in raw.items()}

    def upload(self, version_id: str, data: bytes, now: int) -> VersionPackage:
        if not version_id:
            raise ValueError("version id must be non-empty")
        check_version_archive(data)
        ref = self.blobs.put(VERSIONS_CONTAINER, version_id, data)
        pkg = VersionPackage(version_id, ref, now)
        with self._lock:
            self._index[version_id] = pkg
            self._save()
        return pkg

    def get(self, version_id: str) -> VersionPackage | None:
        with self._lock:
            return self._index.get(version_id)

    def download(self, version_id: str) -> bytes:
        pkg = self.get(version_id)
        if pkg is None:
            raise NotFound(f"version {version_id}")
        return self.blobs.get(pkg.archive)

    def list(self) -> list[str]:
        with self._lock:
            return sorted(self._index)

    def _save(self) -> None:
        if self.index_path is None:
            return
        self.index_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({k: v.to_json() for k, v in self._index.items()}, indent=1))
        os.replace(tmp, self.index_path)


@dataclass
class WorkerInfo:
    id: str
    state: str  # "pending" | "active"
    launched: bool
    last_seen: int
    ready_at: int = 0


class WorkerRegistry:
    """Which workers exist. Launched workers are registered by the autoscaler;
    any other worker becomes known the first time it polls the queue.
    Observed-only workers drop out after ``liveness_ms`` without a poll."""

    def __init__(self, liveness_ms: int = 30_000):
        self.liveness_ms = liveness_ms
        self._workers: dict[str, WorkerInfo] = {}
        self._lock = threading.Lock()

    def register_pending(self, worker_id: str, ready_at: int, now: int) -> None:
        with self._lock:
            self._workers[worker_id] = WorkerInfo(worker_id, "pending", True, now, ready_at)

    def mark_active(self, worker_id: str, now: int) -> None:
        with self._lock:
            w = self._workers.get(worker_id)
            if w is None:
                self._workers[worker_id] = WorkerInfo(worker_id, "active", True, now, now)
            else:
                w.state = "active"
                w.last_seen = now

    def observe(self, worker_id: str, now: int) -> None:
        with self._lock:
            w = self._workers.get(worker_id)
            if w is None:
                self._workers[worker_id] = WorkerInfo(worker_id, "active", False, now, now)
            else:
                w.state = "active"
                w.last_seen = now

    def remove(self, worker_id: str) -> None:
        with self._lock:
            self._workers.pop(worker_id, None)

    def _live(self, now: int) -> list[WorkerInfo]:
        return [
            w for w in self._workers.values()
            if w.launched or now - w.last_seen <= self.liveness_ms
        ]

    def active_count(self, now: int) -> int:
        with self._lock:
            return sum(1 for w in self._live(now) if w.state == "active")

    def pending_count(self, now: int) -> int:
        with self._lock:
            return sum(1 for w in self._live(now) if w.state == "pending")

    def ids(self, now: int) -> list[str]:
        with self._lock:
            return sorted(w.id for w in self._live(now))


@dataclass(frozen=True)
class MonitorSnapshot:
    deployment: str
    active_workers: int
    pending_workers: int
    queue: list[SnapshotRow] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "deployment": self.deployment,
            "active_workers": self.active_workers,
            "pending_workers": self.pending_workers,
            "queue": [r.to_json() for r in self.queue],
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> MonitorSnapshot:
        return cls(
            deployment=d["deployment"],
            active_workers=int(d["active_workers"]),
            pending_workers=int(d.get("pending_workers", 0)),
            queue=[SnapshotRow.from_json(r) for r in d["queue"]],
        )


class Fabric:
    """All fabric services behind one object.

    This is the in-process implementation; :class:`verifarm.service.FabricClient`
    exposes the same methods over HTTP, so workers and clients accept either.
    """

    def __init__(
        self,
        root: str | os.PathLike | None = None,
        queue_config: QueueConfig | None = None,
        clock: Clock | None = None,
        deployment: str = "local",
        liveness_ms: int = 30_000,
    ):
        self.root = Path(root) if root is not None else None
        self.clock = clock or SystemClock()
        self.deployment = deployment
        self.requests = Counter()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        sub = (lambda name: self.root / name) if self.root is not None else (lambda name: None)
        self.queue = WorkQueue(queue_config, journal=sub("queue.journal"))
        self.blobs = BlobStore(sub("blobs"))
        self.topics = TopicBus(sub("topics"))
        self.telemetry = TelemetryTable(sub("telemetry.jsonl"))
        self.versions = VersionRepository(self.blobs, sub("versions") / "index.json" if self.root else None)
        self.registry = WorkerRegistry(liveness_ms)

    def now(self) -> int:
        return self.clock.now_ms()

    # queue
    def enqueue(self, task: TaskSpec) -> int:
        self.requests.incr("enqueue")
        return self.queue.enqueue(task, self.now())

    def dequeue(self, worker: str | None = None) -> Dequeued | Exhausted | None:
        self.requests.incr("dequeue")
        now = self.now()
        if worker:
            self.registry.observe(worker, now)
        return self.queue.dequeue(now)

    def delete(self, task_id: TaskId, receipt: str) -> DeleteReport:
        self.requests.incr("delete")
        return self.queue.delete(task_id, receipt)

    def exists(self, task_id: TaskId) -> bool:
        self.requests.incr("exists")
        return self.queue.exists(task_id)

    def snapshot(self) -> list[SnapshotRow]:
        return self.queue.snapshot()

    def sweep(self) -> int:
        return self.queue.revert_expired(self.now())

    # blobs
    def put_blob(self, container: str, name: str, data: bytes) -> BlobRef:
        self.requests.incr("put_blob")
        return self.blobs.put(container, name, data)

    def get_blob(self, ref: BlobRef) -> bytes:
        self.requests.incr("get_blob")
        return self.blobs.get(ref)

    # results
    def publish(self, topic: str, record: ResultRecord) -> int:
        self.requests.incr("publish")
        return self.topics.publish(topic, record)

    def poll(self, topic: str, cursor: int = 0) -> tuple[list[ResultRecord], int]:
        return self.topics.poll(topic, cursor)

    def record_telemetry(self, rec: TelemetryRecord) -> None:
        self.requests.incr("telemetry")
        self.telemetry.record(rec)

    def telemetry_stats(self) -> WaitStats:
        return self.telemetry.stats()

    def query_telemetry(self, task: TaskId) -> list[TelemetryRecord]:
        return self.telemetry.query(task)

    # versions
    def upload_version(self, version_id: str, data: bytes) -> VersionPackage:
        self.requests.incr("upload_version")
        return self.versions.upload(version_id, data, self.now())

    def download_version(self, version_id: str) -> bytes | None:
        self.requests.incr("download_version")
        try:
            return self.versions.download(version_id)
        except NotFound:
            return None

    def list_versions(self) -> list[str]:
        return self.versions.list()

    # monitor
    def monitor_snapshot(self) -> MonitorSnapshot:
        now = self.now()
        return MonitorSnapshot(
            deployment=self.deployment,
            active_workers=self.registry.active_count(now),
            pending_workers=self.registry.pending_count(now),
            queue=self.queue.snapshot(),
        )

    def close(self) -> None:
        self.queue.close()
