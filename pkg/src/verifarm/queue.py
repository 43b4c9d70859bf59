"""Work-request queue with visibility timeouts.

Entries move between three states: visible (S0), invisible while a consumer
holds them (S1), and deleted (S2, i.e. absent). A dequeue hides the oldest
visible entry for ``timeout + invisibility_buffer`` seconds; if no delete
arrives in that window the entry becomes visible again. Every dequeue bumps
the entry's dequeue count, and a dequeue that would push it past
``dequeue_limit`` removes the entry and hands the task back as
:class:`Exhausted` so the caller can report a ToolError.

The queue never reads a clock: callers pass ``now`` in integer milliseconds.
The live fabric passes wall time, the simulator passes virtual time.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import os
import secrets
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterator

from verifarm.model import TaskId, TaskSpec, validate_task

log = logging.getLogger(__name__)


class EntryState(str, Enum):
    VISIBLE = "Visible"
    INVISIBLE = "Invisible"


class DeleteReport(str, Enum):
    DELETED = "deleted"
    ALREADY_GONE = "already_gone"
    STALE_RECEIPT = "stale_receipt"


class QueueError(Exception):
    pass


class DuplicateTask(QueueError):
    pass


class InvalidTask(QueueError):
    pass


@dataclass(frozen=True)
class QueueConfig:
    invisibility_buffer: int = 300  # seconds added to the task timeout
    dequeue_limit: int = 3

    def __post_init__(self):
        if self.invisibility_buffer < 0:
            raise ValueError("invisibility_buffer must be >= 0")
        if self.dequeue_limit < 1:
            raise ValueError("dequeue_limit must be >= 1")


@dataclass(frozen=True)
class QueueEntry:
    """Point-in-time copy of a live entry."""

    task: TaskSpec
    state: EntryState
    invisible_until: int
    dequeue_count: int
    enqueued_at: int
    first_dequeued_at: int | None = None
    reversions: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "task": self.task.to_json(),
            "state": self.state.value,
            "invisible_until": self.invisible_until,
            "dequeue_count": self.dequeue_count,
            "enqueued_at": self.enqueued_at,
            "first_dequeued_at": self.first_dequeued_at,
            "reversions": self.reversions,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> QueueEntry:
        return cls(
            task=TaskSpec.from_json(d["task"]),
            state=EntryState(d["state"]),
            invisible_until=int(d["invisible_until"]),
            dequeue_count=int(d["dequeue_count"]),
            enqueued_at=int(d["enqueued_at"]),
            first_dequeued_at=d.get("first_dequeued_at"),
            reversions=int(d.get("reversions", 0)),
        )


@dataclass(frozen=True)
class Dequeued:
    entry: QueueEntry
    receipt: str


@dataclass(frozen=True)
class Exhausted:
    """The entry hit its dequeue limit and has been removed."""

    entry: QueueEntry


@dataclass(frozen=True)
class SnapshotRow:
    task_id: TaskId
    module_name: str
    rule_name: str
    version: str
    submitted_at: int
    command: str
    state: EntryState
    dequeue_count: int

    def to_json(self) -> dict[str, Any]:
        return {
            "task_id": self.task_id,
            "module_name": self.module_name,
            "rule_name": self.rule_name,
            "version": self.version,
            "submitted_at": self.submitted_at,
            "command": self.command,
            "state": self.state.value,
            "dequeue_count": self.dequeue_count,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> SnapshotRow:
        return cls(**{**d, "state": EntryState(d["state"])})


class _Entry:
    __slots__ = (
        "task", "seq", "enqueued_at", "state", "invisible_until",
        "dequeue_count", "receipt", "first_dequeued_at", "reversions",
    )

    def __init__(self, task: TaskSpec, seq: int, enqueued_at: int):
        self.task = task
        self.seq = seq
        self.enqueued_at = enqueued_at
        self.state = EntryState.VISIBLE
        self.invisible_until = 0
        self.dequeue_count = 0
        self.receipt: str | None = None
        self.first_dequeued_at: int | None = None
        self.reversions = 0

    def freeze(self) -> QueueEntry:
        return QueueEntry(
            task=self.task,
            state=self.state,
            invisible_until=self.invisible_until,
            dequeue_count=self.dequeue_count,
            enqueued_at=self.enqueued_at,
            first_dequeued_at=self.first_dequeued_at,
            reversions=self.reversions,
        )


class WorkQueue:
    """Linearizable visibility-timeout queue, optionally journaled to disk.

    With ``journal`` set, every mutation is appended as one JSON line before
    the call returns, and constructing a queue over an existing journal
    replays it. The journal is compacted to one record per live entry once it
    grows well past the live set.
    """

    def __init__(
        self,
        config: QueueConfig | None = None,
        journal: str | os.PathLike | None = None,
        receipt_factory: Callable[[], str] | None = None,
        fsync: bool = False,
    ):
        self.config = config or QueueConfig()
        self._receipt_factory = receipt_factory or (lambda: secrets.token_hex(16))
        self._lock = threading.RLock()
        self._entries: dict[TaskId, _Entry] = {}
        self._visible: list[tuple[int, TaskId]] = []
        self._invisible: list[tuple[int, int, TaskId, int]] = []
        self._seq = itertools.count()
        self._n_visible = 0
        self._journal_path = Path(journal) if journal is not None else None
        self._journal = None
        self._fsync = fsync
        self._ops_since_compact = 0
        if self._journal_path is not None:
            self._replay()
            self._journal = open(self._journal_path, "a", encoding="utf-8")

    # -- public operations -------------------------------------------------

    def enqueue(self, task: TaskSpec, now: int) -> int:
        problems = validate_task(task)
        if problems:
            raise InvalidTask("; ".join(problems))
        with self._lock:
            if task.id in self._entries:
                raise DuplicateTask(task.id)
            self._add(task, next(self._seq), now)
            self._log({"op": "enqueue", "task": task.to_json(), "at": now})
            return now

    def dequeue(self, now: int) -> Dequeued | Exhausted | None:
        with self._lock:
            self._revert_expired(now)
            while self._visible:
                seq, tid = heapq.heappop(self._visible)
                e = self._entries.get(tid)
                if e is None or e.seq != seq or e.state is not EntryState.VISIBLE:
                    continue
                if e.dequeue_count + 1 > self.config.dequeue_limit:
                    self._remove(e)
                    self._log({"op": "exhaust", "id": tid})
                    return Exhausted(e.freeze())
                receipt = self._receipt_factory()
                until = now + (e.task.limits.timeout + self.config.invisibility_buffer) * 1000
                self._mark_dequeued(e, receipt, now, until)
                self._log({"op": "dequeue", "id": tid, "receipt": receipt, "at": now, "until": until})
                return Dequeued(e.freeze(), receipt)
            return None

    def revert_expired(self, now: int) -> int:
        with self._lock:
            return self._revert_expired(now)

    def delete(self, task_id: TaskId, receipt: str) -> DeleteReport:
        with self._lock:
            e = self._entries.get(task_id)
            if e is None:
                return DeleteReport.ALREADY_GONE
            if e.receipt is None or not secrets.compare_digest(e.receipt, receipt):
                return DeleteReport.STALE_RECEIPT
            self._remove(e)
            self._log({"op": "delete", "id": task_id})
            return DeleteReport.DELETED

    def exists(self, task_id: TaskId) -> bool:
        with self._lock:
            return task_id in self._entries

    def get(self, task_id: TaskId) -> QueueEntry | None:
        with self._lock:
            e = self._entries.get(task_id)
            return e.freeze() if e else None

    def snapshot(self) -> list[SnapshotRow]:
        with self._lock:
            return [
                SnapshotRow(
                    task_id=e.task.id,
                    module_name=e.task.module_name,
                    rule_name=e.task.rule_name,
                    version=e.task.version,
                    submitted_at=e.task.submitted_at,
                    command=e.task.command,
                    state=e.state,
                    dequeue_count=e.dequeue_count,
                )
                for e in self._ordered()
            ]

    def entries(self) -> list[QueueEntry]:
        with self._lock:
            return [e.freeze() for e in self._ordered()]

    def visible_count(self) -> int:
        return self._n_visible

    def next_expiry(self) -> int | None:
        """Earliest invisible_until among S1 entries, if any."""
        with self._lock:
            times = [e.invisible_until for e in self._entries.values()
                     if e.state is EntryState.INVISIBLE]
            return min(times) if times else None

    def __len__(self) -> int:
        return len(self._entries)

    def close(self) -> None:
        with self._lock:
            if self._journal is not None:
                self._journal.flush()
                if self._fsync:
                    os.fsync(self._journal.fileno())
                self._journal.close()
                self._journal = None

    def compact(self) -> None:
        if self._journal_path is None:
            return
        with self._lock:
            tmp = self._journal_path.with_suffix(".journal.tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for e in self._ordered():
                    rec = {"op": "state", "entry": e.freeze().to_json()}
                    if e.receipt is not None:
                        rec["receipt"] = e.receipt
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            if self._journal is not None:
                self._journal.close()
            os.replace(tmp, self._journal_path)
            self._journal = open(self._journal_path, "a", encoding="utf-8")
            self._ops_since_compact = 0

    # -- internals ---------------------------------------------------------

    def _ordered(self) -> Iterator[_Entry]:
        return iter(sorted(self._entries.values(), key=lambda e: e.seq))

    def _add(self, task: TaskSpec, seq: int, now: int) -> _Entry:
        e = _Entry(task, seq, now)
        self._entries[task.id] = e
        self._n_visible += 1
        heapq.heappush(self._visible, (seq, task.id))
        return e

    def _remove(self, e: _Entry) -> None:
        del self._entries[e.task.id]
        if e.state is EntryState.VISIBLE:
            self._n_visible -= 1

    def _mark_dequeued(self, e: _Entry, receipt: str, now: int, until: int) -> None:
        if e.state is EntryState.VISIBLE:
            self._n_visible -= 1
        e.state = EntryState.INVISIBLE
        e.dequeue_count += 1
        e.receipt = receipt
        e.invisible_until = until
        if e.first_dequeued_at is None:
            e.first_dequeued_at = now
        heapq.heappush(self._invisible, (until, e.seq, e.task.id, e.dequeue_count))

    def _revert(self, e: _Entry) -> None:
        e.state = EntryState.VISIBLE
        self._n_visible += 1
        e.reversions += 1
        heapq.heappush(self._visible, (e.seq, e.task.id))

    def _revert_expired(self, now: int) -> int:
        n = 0
        while self._invisible and self._invisible[0][0] <= now:
            until, seq, tid, count = heapq.heappop(self._invisible)
            e = self._entries.get(tid)
            if (e is None or e.seq != seq or e.state is not EntryState.INVISIBLE
                    or e.dequeue_count != count):
                continue
            self._revert(e)
            self._log({"op": "revert", "id": tid})
            n += 1
        return n

    def _log(self, rec: dict[str, Any]) -> None:
        if self._journal is None:
            return
        self._journal.write(json.dumps(rec, separators=(",", ":")) + "\n")
        self._journal.flush()
        if self._fsync:
            os.fsync(self._journal.fileno())
        self._ops_since_compact += 1
        if self._ops_since_compact > max(1000, 4 * len(self._entries)):
            self.compact()

    def _replay(self) -> None:
        assert self._journal_path is not None
        if not self._journal_path.exists():
            self._journal_path.touch()
            return
        with open(self._journal_path, encoding="utf-8") as fh:
            lines = fh.readlines()
        for lineno, line in enumerate(lines, 1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError:
                # a torn final write from a crash is expected; anything else is not
                if lineno == len(lines):
                    log.warning("ignoring truncated journal tail at line %d", lineno)
                    continue
                raise
            self._apply(rec)
            self._ops_since_compact += 1

    def _apply(self, rec: dict[str, Any]) -> None:
        op = rec["op"]
        if op == "enqueue":
            self._add(TaskSpec.from_json(rec["task"]), next(self._seq), rec["at"])
        elif op == "state":
            q = QueueEntry.from_json(rec["entry"])
            e = self._add(q.task, next(self._seq), q.enqueued_at)
            e.dequeue_count = q.dequeue_count
            e.first_dequeued_at = q.first_dequeued_at
            e.reversions = q.reversions
            e.receipt = rec.get("receipt")
            if q.state is EntryState.INVISIBLE:
                e.state = EntryState.INVISIBLE
                self._n_visible -= 1
                e.invisible_until = q.invisible_until
                heapq.heappush(self._invisible, (e.invisible_until, e.seq, e.task.id, e.dequeue_count))
        elif op == "dequeue":
            e = self._entries[rec["id"]]
            self._mark_dequeued(e, rec["receipt"], rec["at"], rec["until"])
        elif op == "revert":
            self._revert(self._entries[rec["id"]])
        elif op in ("delete", "exhaust"):
            e = self._entries.get(rec["id"])
            if e is not None:
                self._remove(e)
        else:
            raise ValueError(f"unknown journal op {op!r}")
