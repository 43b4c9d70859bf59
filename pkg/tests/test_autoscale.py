import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from verifarm.autoscale import (
    AutoscaleController,
    AutoscalePolicy,
    StartupLatency,
    apply,
    evaluate,
)

POLICY = AutoscalePolicy()


@pytest.mark.parametrize("queue,cur,target", [
    (0, 2, 2),
    (120, 2, 52),
    (120, 180, 200),
    (100, 2, 2),  # threshold is exclusive
    (101, 2, 52),
    (0, 0, 2),
    (500, 200, 200),
])
def test_evaluate_table(queue, cur, target):
    assert evaluate(POLICY, queue, cur, 0).target == target


def test_scale_out_below_minimum_reaches_minimum():
    assert evaluate(AutoscalePolicy(4, 10, 1, 0), 5, 0, 0).target == 4


@given(st.integers(0, 10_000), st.integers(0, 400), st.integers(0, 50), st.integers(0, 300),
       st.integers(1, 100), st.integers(0, 500))
def test_evaluate_never_shrinks_and_respects_cap(q, cur, lo, span, step, threshold):
    policy = AutoscalePolicy(lo, lo + span, step, threshold)
    d = evaluate(policy, q, cur, 0)
    assert d.target >= cur
    assert d.target >= policy.min_instances
    if cur <= policy.max_instances:
        assert d.target <= policy.max_instances
    assert d.launches <= max(step, policy.min_instances - cur)


def test_policy_json_roundtrip():
    p = AutoscalePolicy(1, 10, 3, 5, 60.0, StartupLatency(1, 2, 600))
    assert AutoscalePolicy.from_json(p.to_json()) == p
    assert AutoscalePolicy.from_json({}) == AutoscalePolicy()


@given(st.integers(0, 2**32))
def test_startup_latency_bounds(seed):
    s = StartupLatency()
    x = s.draw(random.Random(seed))
    assert 120 <= x <= 180 <= s.upper_bound
    assert StartupLatency(700, 900, cap=600).draw(random.Random(seed)) == 600


class Recorder:
    def __init__(self, fail=()):
        self.launched = []
        self.fail = set(fail)

    def launch(self, worker_id, ready_at):
        if worker_id in self.fail:
            return False
        self.launched.append((worker_id, ready_at))
        return True


def test_apply_delays_readiness():
    rec = Recorder()
    out = apply(evaluate(POLICY, 120, 2, 1000), rec, POLICY, random.Random(1))
    assert len(out) == 50
    assert all(1000 + 120_000 <= p.ready_at <= 1000 + 180_000 for p in out)
    assert len({p.worker_id for p in out}) == 50


def test_failed_launch_is_dropped():
    rec = Recorder(fail={"worker-0001"})
    out = apply(evaluate(AutoscalePolicy(0, 3, 3, 0), 5, 0, 0), rec, POLICY, random.Random(1))
    assert [p.worker_id for p in out] == ["worker-0000", "worker-0002"]


def test_controller_bootstrap_and_ticks():
    rec = Recorder()
    c = AutoscaleController(POLICY, rec, seed=3)
    assert [p.ready_at for p in c.bootstrap(0)] == [0, 0]
    assert c.tick(600_000, 50, 2) == []
    assert len(c.tick(1_200_000, 150, 2)) == 50
    ids = [w for w, _ in rec.launched]
    assert len(ids) == len(set(ids)) == 52
