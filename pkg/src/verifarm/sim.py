"""Deterministic discrete-event simulation of the whole farm.

Virtual time is integer milliseconds. The simulated queue is the real
:class:`~verifarm.queue.WorkQueue` and scale decisions come from the real
:func:`~verifarm.autoscale.evaluate`; only the clock and the workers are
virtual.

Cloud runs follow the full-matrix scheme: the client compiles up to
``compile_parallelism`` modules at once and a single submitter uploads and
enqueues each module's checks as soon as it is built. Workers poll every
``worker_poll_interval`` seconds while idle and immediately after finishing
a task. The local baseline is one module at a time: compile it, run its
checks on ``local_cores`` cores, move on.

Idle polling is simulated lazily. An idle worker keeps its polling phase,
and a poll event is only materialised when there are visible entries that no
already-scheduled poll will pick up; the earliest pollers on their phase grid
are the ones woken. This produces the same schedule as polling every
interval without generating millions of empty polls.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any

from verifarm.autoscale import AutoscaleController, AutoscalePolicy, StartupLatency
from verifarm.model import ResourceLimits, TaskSpec, WaitStats, new_task_id, summarize
from verifarm.queue import Dequeued, Exhausted, QueueConfig, WorkQueue


@dataclass(frozen=True)
class Dist:
    """A non-negative distribution in seconds.

    kinds: ``fixed`` (value=a), ``uniform`` (a..b), ``lognormal`` (median=a,
    sigma=b). ``cap`` clips every sample.
    """

    kind: str = "fixed"
    a: float = 0.0
    b: float = 0.0
    cap: float | None = None

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "lognormal"):
            raise ValueError(f"unknown distribution {self.kind!r}")
        if self.a < 0 or self.b < 0:
            raise ValueError("distribution parameters must be non-negative")

    def sample(self, rng: random.Random) -> float:
        if self.kind == "fixed":
            x = self.a
        elif self.kind == "uniform":
            x = rng.uniform(self.a, self.b)
        else:
            x = self.a * math.exp(self.b * rng.gauss(0.0, 1.0)) if self.a > 0 else 0.0
        return min(x, self.cap) if self.cap is not None else x

    @classmethod
    def fixed(cls, value: float) -> Dist:
        return cls("fixed", value)

    @classmethod
    def lognormal(cls, median: float, sigma: float, cap: float | None = None) -> Dist:
        return cls("lognormal", median, sigma, cap)

    @classmethod
    def uniform(cls, lo: float, hi: float) -> Dist:
        return cls("uniform", lo, hi)

    def to_json(self) -> Any:
        if self.kind == "fixed":
            return self.a
        if self.kind == "uniform":
            return {"uniform": [self.a, self.b]}
        d: dict[str, Any] = {"lognormal": {"median": self.a, "sigma": self.b}}
        if self.cap is not None:
            d["lognormal"]["cap"] = self.cap
        return d

    @classmethod
    def from_json(cls, d: Any) -> Dist:
        if isinstance(d, (int, float)):
            return cls.fixed(float(d))
        if "uniform" in d:
            lo, hi = d["uniform"]
            return cls.uniform(float(lo), float(hi))
        if "lognormal" in d:
            p = d["lognormal"]
            return cls.lognormal(float(p["median"]), float(p["sigma"]), p.get("cap"))
        raise ValueError(f"bad distribution spec {d!r}")


@dataclass(frozen=True)
class SimConfig:
    seed: int = 42
    n_modules: int = 1
    rules_per_module: int = 1
    service_time: Dist = Dist.fixed(60.0)
    compile_time: Dist = Dist.fixed(0.0)
    compile_parallelism: int = 1
    submit_overhead: Dist = Dist.fixed(0.0)
    policy: AutoscalePolicy = AutoscalePolicy()
    worker_poll_interval: float = 1.0
    crash_probability: float = 0.0
    initial_workers: int | None = None  # defaults to policy.min_instances
    queue: QueueConfig = QueueConfig()
    task_timeout: int = 3000
    local_cores: int = 64
    name: str = "suite"

    def __post_init__(self):
        if self.n_modules < 1 or self.rules_per_module < 1:
            raise ValueError("suite counts must be >= 1")
        if self.compile_parallelism < 1 or self.local_cores < 1:
            raise ValueError("parallelism must be >= 1")
        if not 0.0 <= self.crash_probability <= 1.0:
            raise ValueError("crash_probability must be in [0, 1]")
        if self.worker_poll_interval <= 0:
            raise ValueError("worker_poll_interval must be > 0")

    @property
    def n_tasks(self) -> int:
        return self.n_modules * self.rules_per_module

    @property
    def warm_workers(self) -> int:
        return self.policy.min_instances if self.initial_workers is None else self.initial_workers

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "seed": self.seed,
            "suite": {"n_modules": self.n_modules, "rules_per_module": self.rules_per_module},
            "service_time": self.service_time.to_json(),
            "compile_time": self.compile_time.to_json(),
            "compile_parallelism": self.compile_parallelism,
            "submit_overhead": self.submit_overhead.to_json(),
            "autoscale": self.policy.to_json(),
            "worker_poll_interval": self.worker_poll_interval,
            "crash_probability": self.crash_probability,
            "initial_workers": self.initial_workers,
            "queue": {"invisibility_buffer": self.queue.invisibility_buffer,
                      "dequeue_limit": self.queue.dequeue_limit},
            "task_timeout": self.task_timeout,
            "local_cores": self.local_cores,
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> SimConfig:
        suite = d.get("suite", {})
        q = d.get("queue", {})
        return cls(
            seed=int(d.get("seed", 42)),
            n_modules=int(suite.get("n_modules", 1)),
            rules_per_module=int(suite.get("rules_per_module", 1)),
            service_time=Dist.from_json(d.get("service_time", 60.0)),
            compile_time=Dist.from_json(d.get("compile_time", 0.0)),
            compile_parallelism=int(d.get("compile_parallelism", 1)),
            submit_overhead=Dist.from_json(d.get("submit_overhead", 0.0)),
            policy=AutoscalePolicy.from_json(d.get("autoscale", {})),
            worker_poll_interval=float(d.get("worker_poll_interval", 1.0)),
            crash_probability=float(d.get("crash_probability", 0.0)),
            initial_workers=d.get("initial_workers"),
            queue=QueueConfig(int(q.get("invisibility_buffer", 300)), int(q.get("dequeue_limit", 3))),
            task_timeout=int(d.get("task_timeout", 3000)),
            local_cores=int(d.get("local_cores", 64)),
            name=d.get("name", "suite"),
        )


class EventKind(IntEnum):
    # value is the tie-break rank at equal timestamps
    MODULE_COMPILED = 0
    TASK_ENQUEUED = 1
    TASK_COMPLETED = 2
    WORKER_CRASH = 3
    VISIBILITY_EXPIRY = 4
    WORKER_READY = 5
    WORKER_POLL = 6
    SCALE_TICK = 7


@dataclass(frozen=True, order=True)
class SimEvent:
    at: int
    kind: EventKind
    seq: int
    payload: tuple = field(compare=False, default=())


@dataclass
class SimReport:
    makespan: float
    waits: list[float]
    wait_stats: WaitStats
    worker_timeline: list[tuple[float, int]]
    duplicates: int
    dequeue_histogram: dict[int, int]
    enqueued: int
    completed: int
    exhausted: int
    events: int
    trace_hash: str
    time_scale: float = 1.0  # simulated seconds per modelled second

    def to_json(self) -> dict[str, Any]:
        return {
            "makespan": self.makespan,
            "wait_stats": self.wait_stats.to_json(),
            "waits": self.waits,
            "worker_timeline": [list(p) for p in self.worker_timeline],
            "duplicates": self.duplicates,
            "dequeue_histogram": {str(k): v for k, v in sorted(self.dequeue_histogram.items())},
            "enqueued": self.enqueued,
            "completed": self.completed,
            "exhausted": self.exhausted,
            "events": self.events,
            "trace_hash": self.trace_hash,
            "time_scale": self.time_scale,
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()


def wait_statistics(report: SimReport) -> WaitStats:
    return summarize(report.waits)


def _stable_seed(seed: int, *key: object) -> int:
    h = hashlib.blake2b(repr((seed, *key)).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def _stream(seed: int, *key: object) -> random.Random:
    return random.Random(_stable_seed(seed, *key))


def _ms(seconds: float) -> int:
    return round(seconds * 1000)


def service_ms(cfg: SimConfig, module: int, rule: int) -> int:
    """Service time of one check; capped at the task timeout."""
    s = cfg.service_time.sample(_stream(cfg.seed, "service", module, rule))
    return _ms(min(s, cfg.task_timeout))


def compile_ms(cfg: SimConfig, module: int) -> int:
    return _ms(cfg.compile_time.sample(_stream(cfg.seed, "compile", module)))


def submit_ms(cfg: SimConfig, module: int, rule: int) -> int:
    return _ms(cfg.submit_overhead.sample(_stream(cfg.seed, "submit", module, rule)))


class _Worker:
    __slots__ = ("id", "index", "state", "anchor", "wake", "restarts")

    def __init__(self, wid: str, index: int):
        self.id = wid
        self.index = index
        self.state = "pending"  # pending | idle | busy | dead
        self.anchor = 0
        self.wake = False
        self.restarts = 0


class _SimLauncher:
    def __init__(self, sim: _Simulation):
        self.sim = sim

    def launch(self, worker_id: str, ready_at: int) -> bool:
        self.sim.add_worker(worker_id, ready_at)
        return True


class _Simulation:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.poll_ms = _ms(cfg.worker_poll_interval)
        self.tick_ms = _ms(cfg.policy.eval_interval)
        receipts = itertools.count()
        self.queue = WorkQueue(cfg.queue, receipt_factory=lambda: f"r{next(receipts)}")
        self.events: list[SimEvent] = []
        self.seq = itertools.count()
        self.workers: dict[str, _Worker] = {}
        self.hasher = hashlib.sha256()
        self.n_events = 0
        self.now = 0

        id_rng = _stream(cfg.seed, "ids")
        client = new_task_id(id_rng)
        limits = ResourceLimits(cfg.task_timeout, 4096)
        self.tasks: dict[str, tuple[int, int]] = {}
        self.by_module: list[list[TaskSpec]] = []
        for m in range(cfg.n_modules):
            row = []
            for r in range(cfg.rules_per_module):
                tid = new_task_id(id_rng)
                row.append(TaskSpec(tid, client, f"m{m}", f"r{r}", "sim", "run-analysis", limits))
                self.tasks[tid] = (m, r)
            self.by_module.append(row)

        self.enqueued_at: dict[str, int] = {}
        self.first_dequeue: dict[str, int] = {}
        self.resolved: dict[str, int] = {}
        self.attempts: Counter = Counter()
        self.duplicates = 0
        self.exhausted = 0
        self.active = 0
        self.timeline: list[tuple[float, int]] = [(0.0, 0)]
        self.idle: dict[str, _Worker] = {}
        self.scheduled_wakes = 0
        self.controller = AutoscaleController(
            cfg.policy, _SimLauncher(self), seed=_stable_seed(cfg.seed, "autoscale"),
            name_prefix="vw")
        self.submit_free = 0
        self.next_module = 0

    # -- event plumbing ------------------------------------------------------

    def push(self, at: int, kind: EventKind, *payload) -> None:
        heapq.heappush(self.events, SimEvent(at, kind, next(self.seq), payload))

    def add_worker(self, wid: str, ready_at: int) -> None:
        w = _Worker(wid, len(self.workers))
        self.workers[wid] = w
        self.push(ready_at, EventKind.WORKER_READY, wid)

    def set_active(self, delta: int) -> None:
        self.active += delta
        t = self.now / 1000
        if self.timeline and self.timeline[-1][0] == t:
            self.timeline[-1] = (t, self.active)
        else:
            self.timeline.append((t, self.active))

    def pending_count(self) -> int:
        return sum(1 for w in self.workers.values() if w.state in ("pending", "dead"))

    def done(self) -> bool:
        return len(self.resolved) == len(self.tasks)

    # -- lazy idle polling ---------------------------------------------------

    def next_grid(self, w: _Worker, t: int) -> int:
        if t <= w.anchor:
            return w.anchor
        k = -(-(t - w.anchor) // self.poll_ms)
        return w.anchor + k * self.poll_ms

    def wake_idle(self) -> None:
        need = self.queue.visible_count() - self.scheduled_wakes
        if need <= 0:
            return
        candidates = [w for w in self.idle.values() if not w.wake]
        if not candidates:
            return
        chosen = heapq.nsmallest(need, candidates, key=lambda w: (self.next_grid(w, self.now), w.index))
        for w in chosen:
            w.wake = True
            self.scheduled_wakes += 1
            self.push(self.next_grid(w, self.now), EventKind.WORKER_POLL, w.id)

    def go_idle(self, w: _Worker) -> None:
        w.state = "idle"
        w.anchor = self.now
        self.idle[w.id] = w

    # -- handlers ----------------------------------------------------------

    def start_compiles(self) -> None:
        for _ in range(min(self.cfg.compile_parallelism, self.cfg.n_modules)):
            self.compile_next(0)

    def compile_next(self, now: int) -> None:
        if self.next_module >= self.cfg.n_modules:
            return
        m = self.next_module
        self.next_module += 1
        self.push(now + compile_ms(self.cfg, m), EventKind.MODULE_COMPILED, m)

    def on_module_compiled(self, m: int) -> None:
        t = max(self.now, self.submit_free)
        for r, task in enumerate(self.by_module[m]):
            t += submit_ms(self.cfg, m, r)
            self.push(t, EventKind.TASK_ENQUEUED, task.id)
        self.submit_free = t
        self.compile_next(self.now)

    def on_task_enqueued(self, tid: str) -> None:
        m, r = self.tasks[tid]
        task = self.by_module[m][r]
        self.queue.enqueue(task, self.now)
        self.enqueued_at[tid] = self.now
        self.wake_idle()

    def on_worker_ready(self, wid: str) -> None:
        w = self.workers[wid]
        w.state = "idle"
        self.set_active(+1)
        self.poll(w)

    def on_worker_poll(self, wid: str) -> None:
        w = self.workers[wid]
        if w.wake:
            w.wake = False
            self.scheduled_wakes -= 1
        if w.state != "idle":
            return
        self.poll(w)

    def poll(self, w: _Worker) -> None:
        self.idle.pop(w.id, None)
        got = self.queue.dequeue(self.now)
        if got is None:
            self.go_idle(w)
            return
        if isinstance(got, Exhausted):
            tid = got.entry.task.id
            self.exhausted += 1
            self.resolved.setdefault(tid, self.now)
            self.attempts[tid] = got.entry.dequeue_count
            # the worker publishes the ToolError and polls again straight away
            self.poll(w)
            return
        assert isinstance(got, Dequeued)
        tid = got.entry.task.id
        self.first_dequeue.setdefault(tid, self.now)
        attempt = got.entry.dequeue_count
        self.attempts[tid] = attempt
        m, r = self.tasks[tid]
        dur = service_ms(self.cfg, m, r)
        w.state = "busy"
        if self.cfg.crash_probability > 0:
            crng = _stream(self.cfg.seed, "crash", m, r, attempt)
            if crng.random() < self.cfg.crash_probability:
                self.push(self.now + round(dur * crng.random()), EventKind.WORKER_CRASH,
                          w.id, tid, got.entry.invisible_until)
                return
        self.push(self.now + dur, EventKind.TASK_COMPLETED, w.id, tid, got.receipt)

    def on_task_completed(self, wid: str, tid: str, receipt: str) -> None:
        w = self.workers[wid]
        if self.queue.exists(tid):
            self.queue.delete(tid, receipt)
            if tid in self.resolved:
                self.duplicates += 1
            else:
                self.resolved[tid] = self.now
        else:
            self.duplicates += 1
        w.state = "idle"
        self.poll(w)

    def on_worker_crash(self, wid: str, tid: str, invisible_until: int) -> None:
        w = self.workers[wid]
        w.state = "dead"
        w.restarts += 1
        self.set_active(-1)
        self.push(invisible_until, EventKind.VISIBILITY_EXPIRY, tid)
        delay = self.cfg.policy.startup.draw(_stream(self.cfg.seed, "restart", wid, w.restarts))
        self.push(self.now + _ms(delay), EventKind.WORKER_READY, wid)

    def on_visibility_expiry(self, tid: str) -> None:
        self.queue.revert_expired(self.now)
        self.wake_idle()

    def on_scale_tick(self) -> None:
        current = self.active + self.pending_count()
        self.controller.tick(self.now, self.queue.visible_count(), current)
        if not self.done():
            self.push(self.now + self.tick_ms, EventKind.SCALE_TICK)

    # -- main loop -------------------------------------------------------

    def run(self) -> SimReport:
        for i in range(self.cfg.warm_workers):
            self.add_worker(f"warm-{i:04d}", 0)
        self.start_compiles()
        self.push(0, EventKind.SCALE_TICK)
        handlers = {
            EventKind.MODULE_COMPILED: self.on_module_compiled,
            EventKind.TASK_ENQUEUED: self.on_task_enqueued,
            EventKind.TASK_COMPLETED: self.on_task_completed,
            EventKind.WORKER_CRASH: self.on_worker_crash,
            EventKind.VISIBILITY_EXPIRY: self.on_visibility_expiry,
            EventKind.WORKER_READY: self.on_worker_ready,
            EventKind.WORKER_POLL: self.on_worker_poll,
            EventKind.SCALE_TICK: lambda: self.on_scale_tick(),
        }
        while self.events:
            ev = heapq.heappop(self.events)
            if ev.at < self.now:
                raise AssertionError("event ordering violated")
            self.now = ev.at
            self.n_events += 1
            self.hasher.update(f"{ev.at}|{ev.kind.name}|{ev.payload}\n".encode())
            handlers[ev.kind](*ev.payload)
            if self.done() and ev.kind is not EventKind.SCALE_TICK:
                # drain nothing further: remaining events are idle polls and ticks
                if all(e.kind in (EventKind.WORKER_POLL, EventKind.SCALE_TICK,
                                  EventKind.WORKER_READY, EventKind.VISIBILITY_EXPIRY)
                       for e in self.events):
                    break
        if not self.done():
            raise AssertionError("simulation stalled before resolving every task")
        waits = [
            (self.first_dequeue[tid] - self.enqueued_at[tid]) / 1000
            for tid in self.tasks if tid in self.first_dequeue
        ]
        return SimReport(
            makespan=max(self.resolved.values()) / 1000,
            waits=waits,
            wait_stats=summarize(waits),
            worker_timeline=self.timeline,
            duplicates=self.duplicates,
            dequeue_histogram=dict(Counter(self.attempts.values())),
            enqueued=len(self.enqueued_at),
            completed=len(self.resolved) - self.exhausted,
            exhausted=self.exhausted,
            events=self.n_events,
            trace_hash=self.hasher.hexdigest(),
        )


def simulate(config: SimConfig) -> SimReport:
    """Run the cloud scheme to quiescence. Equal configs give equal reports."""
    return _Simulation(config).run()


def simulate_local(config: SimConfig) -> float:
    """Makespan in seconds of the one-module-at-a-time local baseline.

    Uses the same per-check service draws as :func:`simulate`, so cloud and
    local runs of one config see identical work.
    """
    t = 0
    for m in range(config.n_modules):
        t += compile_ms(config, m)
        cores = [t] * min(config.local_cores, config.rules_per_module)
        heapq.heapify(cores)
        end = t
        for r in range(config.rules_per_module):
            start = heapq.heappop(cores)
            finish = start + service_ms(config, m, r)
            end = max(end, finish)
            heapq.heappush(cores, finish)
        t = end
    return t / 1000


def with_cap(config: SimConfig, cap: int) -> SimConfig:
    policy = replace(config.policy, max_instances=cap,
                     min_instances=min(config.policy.min_instances, cap))
    return replace(config, policy=policy)


@dataclass(frozen=True)
class ExperimentRow:
    label: str
    cap: int | None
    makespan: float
    speedup: float

    def to_json(self) -> dict[str, Any]:
        return {"label": self.label, "cap": self.cap, "makespan": self.makespan, "speedup": self.speedup}


def run_experiment_table(base: SimConfig, worker_caps: list[int]) -> list[ExperimentRow]:
    """Local baseline plus one cloud run per worker cap; speedup = local / cloud."""
    if not worker_caps:
        raise ValueError("worker_caps must be non-empty")
    local = simulate_local(base)
    rows = [ExperimentRow("Local", None, local, 1.0)]
    for cap in worker_caps:
        span = simulate(with_cap(base, cap)).makespan
        rows.append(ExperimentRow(f"Azure{cap}", cap, span, local / span if span else math.inf))
    return rows


def hhmm(seconds: float) -> str:
    minutes = int(round(seconds / 60))
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def table_csv(config: SimConfig, rows: list[ExperimentRow]) -> str:
    header = ["Driver/Suite", "Drivers", "Checks"] + [r.label for r in rows]
    line = [config.name, str(config.n_modules), str(config.n_tasks)] + [hhmm(r.makespan) for r in rows]
    return ",".join(header) + "\n" + ",".join(line) + "\n"


__all__ = [
    "Dist", "SimConfig", "SimEvent", "EventKind", "SimReport", "ExperimentRow",
    "simulate", "simulate_local", "run_experiment_table", "wait_statistics", "with_cap",
    "table_csv", "hhmm", "StartupLatency",
]
