"""Queue-length autoscaler.

Every ``eval_interval`` seconds the controller compares the queue length to a
threshold; above it, ``step`` more workers are requested, never beyond
``max_instances``. The pool never drops below ``min_instances`` and never
shrinks. A launched worker becomes usable only after a startup delay drawn
from the policy's latency model.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Protocol

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StartupLatency:
    """Uniform startup delay on [lo, hi] seconds, clipped to ``cap``."""

    lo: float = 120.0
    hi: float = 180.0
    cap: float = 600.0

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise ValueError("startup latency needs 0 <= lo <= hi")

    def draw(self, rng: random.Random) -> float:
        if self.lo == self.hi:
            return min(self.lo, self.cap)
        return min(rng.uniform(self.lo, self.hi), self.cap)

    @property
    def upper_bound(self) -> float:
        return min(self.hi, self.cap)


@dataclass(frozen=True)
class AutoscalePolicy:
    min_instances: int = 2
    max_instances: int = 200
    step: int = 50
    queue_threshold: int = 100
    eval_interval: float = 600.0
    startup: StartupLatency = field(default_factory=StartupLatency)

    def __post_init__(self):
        if not 0 <= self.min_instances <= self.max_instances:
            raise ValueError("need 0 <= min_instances <= max_instances")
        if self.step < 1:
            raise ValueError("step must be >= 1")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1 second")

    def to_json(self) -> dict[str, Any]:
        return {
            "min": self.min_instances,
            "max": self.max_instances,
            "step": self.step,
            "threshold": self.queue_threshold,
            "interval_s": self.eval_interval,
            "startup_s": [self.startup.lo, self.startup.hi],
        }

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> AutoscalePolicy:
        lo, hi = d.get("startup_s", (120, 180))
        return cls(
            min_instances=int(d.get("min", 2)),
            max_instances=int(d.get("max", 200)),
            step=int(d.get("step", 50)),
            queue_threshold=int(d.get("threshold", 100)),
            eval_interval=float(d.get("interval_s", 600)),
            startup=StartupLatency(float(lo), float(hi), float(d.get("startup_cap_s", 600))),
        )


@dataclass(frozen=True)
class ScaleDecision:
    at: int
    observed_queue_length: int
    current: int
    target: int

    @property
    def launches(self) -> int:
        return self.target - self.current


def evaluate(policy: AutoscalePolicy, queue_length: int, current_instances: int, now: int) -> ScaleDecision:
    """Pure scale-up rule; ``current_instances`` counts active plus pending."""
    if queue_length > policy.queue_threshold:
        target = max(policy.min_instances, min(policy.max_instances, current_instances + policy.step))
    else:
        target = max(current_instances, policy.min_instances)
    # never shrink, even if current somehow exceeds the cap
    target = max(target, current_instances)
    return ScaleDecision(now, queue_length, current_instances, target)


class Launcher(Protocol):
    def launch(self, worker_id: str, ready_at: int) -> bool:
        """Start a worker that becomes usable at ``ready_at`` (ms). False on failure."""


@dataclass(frozen=True)
class PendingLaunch:
    worker_id: str
    ready_at: int


def apply(
    decision: ScaleDecision,
    launcher: Launcher,
    policy: AutoscalePolicy,
    rng: random.Random,
    name_prefix: str = "worker",
    first_index: int = 0,
) -> list[PendingLaunch]:
    """Ask the launcher for ``target - current`` workers.

    Failed launches are dropped from the result; the next tick will see the
    shortfall and retry.
    """
    if decision.target < decision.current:
        raise ValueError("scale-down is not supported")
    pending = []
    for i in range(decision.launches):
        wid = f"{name_prefix}-{first_index + i:04d}"
        ready_at = decision.at + round(policy.startup.draw(rng) * 1000)
        if launcher.launch(wid, ready_at):
            pending.append(PendingLaunch(wid, ready_at))
        else:
            log.warning("launch of %s failed; will retry next tick", wid)
    return pending


class AutoscaleController:
    """Ticks the policy and tracks how many workers it has asked for.

    ``tick`` is driven externally (a timer thread in the fabric, the event loop
    in the simulator), which keeps ticks on exact multiples of the interval.
    """

    def __init__(self, policy: AutoscalePolicy, launcher: Launcher, seed: int | None = None,
                 name_prefix: str = "worker"):
        self.policy = policy
        self.launcher = launcher
        self.rng = random.Random(seed)
        self.name_prefix = name_prefix
        self.launched = 0
        self.decisions: list[ScaleDecision] = []

    def bootstrap(self, now: int) -> list[PendingLaunch]:
        """Bring the pool up to the minimum with no startup delay."""
        out = []
        for _ in range(self.policy.min_instances):
            wid = f"{self.name_prefix}-{self.launched:04d}"
            if self.launcher.launch(wid, now):
                out.append(PendingLaunch(wid, now))
                self.launched += 1
        return out

    def tick(self, now: int, queue_length: int, current_instances: int) -> list[PendingLaunch]:
        decision = evaluate(self.policy, queue_length, current_instances, now)
        self.decisions.append(decision)
        if decision.launches <= 0:
            return []
        out = apply(decision, self.launcher, self.policy, self.rng, self.name_prefix, self.launched)
        self.launched += decision.launches
        log.info("scale tick: queue=%d current=%d target=%d launched=%d",
                 queue_length, current_instances, decision.target, len(out))
        return out
