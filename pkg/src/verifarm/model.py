"""Shared domain vocabulary: identifiers, tasks, outcomes, results and telemetry.

All value types are frozen dataclasses with a ``to_json``/``from_json`` pair that
maps onto the canonical snake_case JSON used by the fabric HTTP API.
"""

from __future__ import annotations

import random
import statistics
import threading
import time
import uuid
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Protocol


TaskId = str
ClientId = str
ToolVersionId = str


def new_task_id(rng: random.Random | None = None) -> TaskId:
    """Return a fresh 128-bit identifier rendered as hyphenated hex.

    Pass ``rng`` to draw from a seeded generator (the simulator does this so
    runs are reproducible); otherwise the OS entropy source is used.
    """
    if rng is None:
        return str(uuid.uuid4())
    return str(uuid.UUID(int=rng.getrandbits(128), version=4))


new_client_id = new_task_id


def parse_id(text: str) -> str:
    """Canonicalise an identifier; raises ValueError on malformed input."""
    return str(uuid.UUID(text))


class OutcomeKind(str, Enum):
    PASS = "Pass"
    DEFECT = "Defect"
    TIMEOUT = "TimeOut"
    SPACEOUT = "SpaceOut"
    TOOL_ERROR = "ToolError"
    VERSION_NOT_FOUND = "VersionNotFound"

    def __str__(self) -> str:
        return self.value


class Clock(Protocol):
    def now_ms(self) -> int: ...


class SystemClock:
    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000


class ManualClock:
    """Clock that only moves when told to. Used by tests and the simulator."""

    def __init__(self, start_ms: int = 0):
        self._now = start_ms

    def now_ms(self) -> int:
        return self._now

    def set(self, ms: int) -> None:
        if ms < self._now:
            raise ValueError("clock cannot move backwards")
        self._now = ms

    def advance(self, seconds: float) -> int:
        self._now += round(seconds * 1000)
        return self._now


@dataclass(frozen=True)
class ResourceLimits:
    timeout: int  # seconds
    spaceout: int  # megabytes

    def to_json(self) -> dict[str, Any]:
        return {"timeout": self.timeout, "spaceout": self.spaceout}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> ResourceLimits:
        return cls(timeout=int(d["timeout"]), spaceout=int(d["spaceout"]))


@dataclass(frozen=True)
class BlobRef:
    container: str
    name: str
    content_hash: str

    def to_json(self) -> dict[str, Any]:
        return {"container": self.container, "name": self.name, "content_hash": self.content_hash}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> BlobRef:
        return cls(container=d["container"], name=d["name"], content_hash=d["content_hash"])


@dataclass(frozen=True)
class TaskSpec:
    id: TaskId
    client: ClientId
    module_name: str
    rule_name: str
    version: ToolVersionId
    command: str
    limits: ResourceLimits
    payload: tuple[BlobRef, ...] = ()
    submitted_at: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "client": self.client,
            "module_name": self.module_name,
            "rule_name": self.rule_name,
            "version": self.version,
            "command": self.command,
            "payload": [ref.to_json() for ref in self.payload],
            "limits": self.limits.to_json(),
            "submitted_at": self.submitted_at,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> TaskSpec:
        return cls(
            id=d["id"],
            client=d["client"],
            module_name=d["module_name"],
            rule_name=d["rule_name"],
            version=d["version"],
            command=d["command"],
            limits=ResourceLimits.from_json(d["limits"]),
            payload=tuple(BlobRef.from_json(r) for r in d.get("payload", ())),
            submitted_at=int(d.get("submitted_at", 0)),
        )


def validate_task(spec: TaskSpec) -> list[str]:
    """List every invariant the task violates; empty means well-formed."""
    problems = []
    try:
        parse_id(spec.id)
    except (ValueError, TypeError, AttributeError):
        problems.append("id must be a hyphenated 128-bit identifier")
    if not spec.client:
        problems.append("client non-empty")
    if not spec.version:
        problems.append("version non-empty")
    if not spec.command or not spec.command.strip():
        problems.append("command non-empty")
    if not isinstance(spec.limits.timeout, int) or spec.limits.timeout < 1:
        problems.append("limits.timeout must be ≥ 1")
    if not isinstance(spec.limits.spaceout, int) or spec.limits.spaceout < 1:
        problems.append("limits.spaceout must be ≥ 1")
    for i, ref in enumerate(spec.payload):
        if not ref.container or not ref.name:
            problems.append(f"payload[{i}] container and name non-empty")
    return problems


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    detail: str | None = None
    trace_ref: BlobRef | None = None

    def __post_init__(self):
        # closes the kind set: strings are coerced, anything else raises
        object.__setattr__(self, "kind", OutcomeKind(self.kind))

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "detail": self.detail,
            "trace_ref": self.trace_ref.to_json() if self.trace_ref else None,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> Outcome:
        trace = d.get("trace_ref")
        return cls(
            kind=OutcomeKind(d["kind"]),
            detail=d.get("detail"),
            trace_ref=BlobRef.from_json(trace) if trace else None,
        )


@dataclass(frozen=True)
class ResultRecord:
    task: TaskId
    client: ClientId
    outcome: Outcome
    worker: str
    queue_wait: float
    processing_time: float
    completed_at: int
    module_name: str = ""
    rule_name: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "client": self.client,
            "outcome": self.outcome.to_json(),
            "worker": self.worker,
            "queue_wait": self.queue_wait,
            "processing_time": self.processing_time,
            "completed_at": self.completed_at,
            "module_name": self.module_name,
            "rule_name": self.rule_name,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> ResultRecord:
        return cls(
            task=d["task"],
            client=d["client"],
            outcome=Outcome.from_json(d["outcome"]),
            worker=d["worker"],
            queue_wait=float(d["queue_wait"]),
            processing_time=float(d["processing_time"]),
            completed_at=int(d["completed_at"]),
            module_name=d.get("module_name", ""),
            rule_name=d.get("rule_name", ""),
        )


@dataclass(frozen=True)
class TelemetryRecord:
    task: TaskId
    queue_wait: float
    processing_time: float
    dequeue_count: int
    visibility_transitions: int
    worker: str
    outcome: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "queue_wait": self.queue_wait,
            "processing_time": self.processing_time,
            "dequeue_count": self.dequeue_count,
            "visibility_transitions": self.visibility_transitions,
            "worker": self.worker,
            "outcome": self.outcome,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> TelemetryRecord:
        return cls(
            task=d["task"],
            queue_wait=float(d["queue_wait"]),
            processing_time=float(d["processing_time"]),
            dequeue_count=int(d["dequeue_count"]),
            visibility_transitions=int(d["visibility_transitions"]),
            worker=d["worker"],
            outcome=d.get("outcome", ""),
        )


@dataclass(frozen=True)
class WaitStats:
    count: int = 0
    mean: float = 0.0
    median: float = 0.0
    std: float = 0.0
    min: float = 0.0
    max: float = 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "count": self.count,
            "mean": self.mean,
            "median": self.median,
            "std": self.std,
            "min": self.min,
            "max": self.max,
        }


def summarize(values: list[float]) -> WaitStats:
    """Mean/median/population-std/min/max; all zeros for an empty sample."""
    if not values:
        return WaitStats()
    return WaitStats(
        count=len(values),
        mean=statistics.fmean(values),
        median=statistics.median(values),
        std=statistics.pstdev(values),
        min=min(values),
        max=max(values),
    )


@dataclass
class Counter:
    """Thread-safe named counters, used to observe fabric traffic in tests."""

    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()

    def incr(self, name: str) -> None:
        with self._lock:
            self.counts[name] = self.counts.get(name, 0) + 1

    def get(self, name: str) -> int:
        return self.counts.get(name, 0)
