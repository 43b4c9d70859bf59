import threading

import pytest
from hypothesis import settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from verifarm.queue import (
    DeleteReport,
    Dequeued,
    DuplicateTask,
    EntryState,
    Exhausted,
    InvalidTask,
    QueueConfig,
    WorkQueue,
)
from conftest import make_task


def test_visibility_arithmetic():
    q = WorkQueue()
    q.enqueue(make_task(timeout=3000), 0)
    got = q.dequeue(1_000)
    assert isinstance(got, Dequeued)
    assert got.entry.invisible_until == 1_000 + 3300 * 1000
    assert got.entry.state is EntryState.INVISIBLE


def test_fifo_order_and_empty():
    q = WorkQueue()
    tasks = [make_task(rule=f"pass{i}") for i in range(5)]
    for i, t in enumerate(tasks):
        q.enqueue(t, i)
    assert [q.dequeue(10).entry.task.id for _ in range(5)] == [t.id for t in tasks]
    assert q.dequeue(10) is None


def test_reverted_entry_keeps_original_position():
    q = WorkQueue(QueueConfig(invisibility_buffer=0))
    a, b = make_task(timeout=1), make_task(timeout=1)
    q.enqueue(a, 0)
    q.enqueue(b, 0)
    assert q.dequeue(0).entry.task.id == a.id
    got = q.dequeue(1000)  # a expired exactly at 1000
    assert got.entry.task.id == a.id
    assert got.entry.dequeue_count == 2
    assert got.entry.reversions == 1


def test_duplicate_and_invalid_enqueue():
    q = WorkQueue()
    t = make_task()
    q.enqueue(t, 0)
    with pytest.raises(DuplicateTask):
        q.enqueue(t, 1)
    with pytest.raises(InvalidTask, match="limits.timeout must be ≥ 1"):
        q.enqueue(make_task(timeout=0), 0)
    assert len(q) == 1


def test_delete_reports():
    q = WorkQueue(QueueConfig(invisibility_buffer=0))
    t = make_task(timeout=1)
    q.enqueue(t, 0)
    first = q.dequeue(0)
    second = q.dequeue(1500)
    assert q.delete(t.id, first.receipt) is DeleteReport.STALE_RECEIPT
    assert q.delete(t.id, second.receipt) is DeleteReport.DELETED
    assert q.delete(t.id, second.receipt) is DeleteReport.ALREADY_GONE
    assert not q.exists(t.id)


def test_dequeue_limit_exhausts():
    q = WorkQueue(QueueConfig(invisibility_buffer=0, dequeue_limit=3))
    t = make_task(timeout=1)
    q.enqueue(t, 0)
    now = 0
    for n in range(1, 4):
        got = q.dequeue(now)
        assert isinstance(got, Dequeued) and got.entry.dequeue_count == n
        now += 1000
    got = q.dequeue(now)
    assert isinstance(got, Exhausted)
    assert got.entry.dequeue_count == 3
    assert len(q) == 0 and q.dequeue(now) is None


def test_visible_count_tracks_state():
    q = WorkQueue(QueueConfig(invisibility_buffer=0))
    for _ in range(3):
        q.enqueue(make_task(timeout=1), 0)
    assert q.visible_count() == 3
    d = q.dequeue(0)
    assert q.visible_count() == 2
    q.revert_expired(1000)
    assert q.visible_count() == 3
    d = q.dequeue(1000)
    q.delete(d.entry.task.id, d.receipt)
    assert q.visible_count() == 2 and len(q) == 2


def test_concurrent_dequeue_hands_each_entry_once():
    q = WorkQueue()
    n = 500
    for i in range(n):
        q.enqueue(make_task(rule=f"pass{i}"), 0)
    claimed: list[str] = []
    lock = threading.Lock()

    def worker():
        while True:
            got = q.dequeue(1)
            if got is None:
                return
            with lock:
                claimed.append(got.entry.task.id)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert len(claimed) == n == len(set(claimed))


def test_journal_replay_matches(tmp_path):
    path = tmp_path / "q.journal"
    q = WorkQueue(QueueConfig(invisibility_buffer=0), journal=path)
    tasks = [make_task(timeout=1, rule=f"pass{i}") for i in range(10)]
    for t in tasks:
        q.enqueue(t, 0)
    claims = [q.dequeue(5) for _ in range(4)]
    q.delete(tasks[0].id, claims[0].receipt)
    q.revert_expired(1005)
    q.dequeue(1005)
    before = (q.snapshot(), q.entries())
    q.close()
    again = WorkQueue(QueueConfig(invisibility_buffer=0), journal=path)
    assert (again.snapshot(), again.entries()) == before
    # receipts survive a restart
    assert again.delete(tasks[1].id, claims[1].receipt) is DeleteReport.STALE_RECEIPT
    assert again.visible_count() == q.visible_count()


def test_journal_ignores_torn_tail(tmp_path):
    path = tmp_path / "q.journal"
    q = WorkQueue(journal=path)
    q.enqueue(make_task(), 0)
    q.close()
    with open(path, "a") as fh:
        fh.write('{"op": "enq')
    assert len(WorkQueue(journal=path)) == 1


def test_compaction_preserves_state(tmp_path):
    path = tmp_path / "q.journal"
    q = WorkQueue(QueueConfig(invisibility_buffer=0), journal=path)
    live = []
    for i in range(1200):
        t = make_task(timeout=100, rule=f"pass{i}")
        q.enqueue(t, i)
        got = q.dequeue(i)
        if i % 3:
            q.delete(t.id, got.receipt)
        else:
            live.append(t.id)
    before = q.entries()
    lines = path.read_text().count("\n")
    assert lines < 3 * 1200  # compacted at least once
    q.close()
    assert WorkQueue(QueueConfig(invisibility_buffer=0), journal=path).entries() == before
    assert [e.task.id for e in before] == live


class QueueModel(RuleBasedStateMachine):
    """Compare WorkQueue with a plain list-based reference."""

    LIMIT = 3

    def __init__(self):
        super().__init__()
        self.q = WorkQueue(QueueConfig(invisibility_buffer=0, dequeue_limit=self.LIMIT))
        self.now = 0
        # reference: id -> [seq, state, until, count, receipt]
        self.ref: dict[str, list] = {}
        self.seq = 0
        self.receipts: list[tuple[str, str]] = []

    def _revert(self):
        for e in self.ref.values():
            if e[1] == "invisible" and e[2] <= self.now:
                e[1] = "visible"

    @rule(timeout=st.integers(1, 3))
    def enqueue(self, timeout):
        t = make_task(timeout=timeout)
        self.q.enqueue(t, self.now)
        self.ref[t.id] = [self.seq, "visible", 0, 0, None]
        self.seq += 1

    @rule(dt=st.integers(0, 2500))
    def tick(self, dt):
        self.now += dt

    @rule()
    def dequeue(self):
        self._revert()
        visible = sorted((e[0], tid) for tid, e in self.ref.items() if e[1] == "visible")
        got = self.q.dequeue(self.now)
        if not visible:
            assert got is None
            return
        tid = visible[0][1]
        e = self.ref[tid]
        assert got.entry.task.id == tid
        if e[3] + 1 > self.LIMIT:
            assert isinstance(got, Exhausted)
            del self.ref[tid]
            return
        assert isinstance(got, Dequeued)
        e[1], e[3], e[4] = "invisible", e[3] + 1, got.receipt
        e[2] = self.now + got.entry.task.limits.timeout * 1000
        assert got.entry.invisible_until == e[2]
        assert got.entry.dequeue_count == e[3]
        self.receipts.append((tid, got.receipt))

    @precondition(lambda self: self.receipts)
    @rule(i=st.integers(0, 1000))
    def delete(self, i):
        tid, receipt = self.receipts[i % len(self.receipts)]
        report = self.q.delete(tid, receipt)
        e = self.ref.get(tid)
        if e is None:
            assert report is DeleteReport.ALREADY_GONE
        elif e[4] != receipt:
            assert report is DeleteReport.STALE_RECEIPT
        else:
            assert report is DeleteReport.DELETED
            del self.ref[tid]

    @invariant()
    def same_contents(self):
        assert len(self.q) == len(self.ref)
        for entry in self.q.entries():
            assert entry.dequeue_count == self.ref[entry.task.id][3] <= self.LIMIT


TestQueueModel = QueueModel.TestCase
TestQueueModel.settings = settings(max_examples=60, stateful_step_count=40, deadline=None)
