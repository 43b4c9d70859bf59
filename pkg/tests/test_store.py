import hashlib

import pytest
from hypothesis import given
from hypothesis import strategies as st

from verifarm.model import BlobRef, ManualClock, Outcome, ResultRecord, TelemetryRecord
from verifarm.store import (
    BlobStore,
    Fabric,
    HashMismatch,
    MalformedArchive,
    NotFound,
    TopicBus,
    WorkerRegistry,
)
from conftest import make_task, toy_archive

CLIENT = "00000000-0000-4000-8000-000000000001"


def record(task_id: str, kind: str = "Pass", client: str = CLIENT) -> ResultRecord:
    return ResultRecord(task_id, client, Outcome(kind), "w", 0.0, 0.0, 0, "m", "r")


@pytest.mark.parametrize("root", [None, "disk"])
def test_blob_roundtrip_and_hash(tmp_path, root):
    store = BlobStore(tmp_path / "b" if root else None)
    ref = store.put("c1", "mod/artifacts.zip", b"hello")
    assert ref.content_hash == hashlib.sha256(b"hello").hexdigest()
    assert store.get(ref) == b"hello"
    with pytest.raises(HashMismatch):
        store.get(BlobRef("c1", "mod/artifacts.zip", "0" * 64))
    with pytest.raises(NotFound):
        store.read("c1", "missing")
    assert store.count() == 1


@pytest.mark.parametrize("name", ["../x", "a//b", "", "a/./b", "sp ace"])
def test_blob_rejects_bad_names(name):
    with pytest.raises(ValueError):
        BlobStore().put("c", name, b"")


@given(st.binary(max_size=2048))
def test_blob_hash_property(data):
    store = BlobStore()
    ref = store.put("c", "x", data)
    assert store.get(ref) == data


def test_topic_cursor_semantics(tmp_path):
    bus = TopicBus(tmp_path / "t")
    for i in range(5):
        assert bus.publish(CLIENT, record(f"t{i}")) == i + 1
    batch, cur = bus.poll(CLIENT, 0)
    assert [r.task for r in batch] == [f"t{i}" for i in range(5)] and cur == 5
    assert bus.poll(CLIENT, cur) == ([], 5)
    batch, cur = bus.poll(CLIENT, 3)
    assert len(batch) == 2 and cur == 5
    # survives reopen
    assert len(TopicBus(tmp_path / "t").poll(CLIENT, 0)[0]) == 5
    with pytest.raises(ValueError):
        bus.publish("other", record("x"))


@given(st.lists(st.integers(0, 3), max_size=30))
def test_topic_poll_never_loses_or_repeats(splits):
    bus = TopicBus()
    seen = []
    cursor = 0
    for i, k in enumerate(splits):
        for j in range(k):
            bus.publish(CLIENT, record(f"{i}-{j}"))
        batch, cursor = bus.poll(CLIENT, cursor)
        seen += [r.task for r in batch]
    assert seen == [r.task for r in bus.poll(CLIENT, 0)[0]]


def test_versions(tmp_path):
    fab = Fabric(tmp_path / "f")
    pkg = fab.upload_version("v1", toy_archive())
    assert fab.download_version("v1") == toy_archive()
    assert fab.download_version("nope") is None
    assert fab.requests.get("download_version") == 2
    with pytest.raises(MalformedArchive):
        fab.upload_version("bad", b"not a zip")
    import io
    import zipfile
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("sub/run-analysis", "")
    with pytest.raises(MalformedArchive):
        fab.upload_version("nested", buf.getvalue())
    fab.upload_version("v1", toy_archive("#!/bin/sh\n"))
    assert fab.list_versions() == ["v1"]
    fab.close()
    again = Fabric(tmp_path / "f")
    assert again.download_version("v1") == toy_archive("#!/bin/sh\n")
    assert pkg.id == "v1"


def test_telemetry_stats(tmp_path):
    fab = Fabric(tmp_path / "f")
    for w in (1.0, 2.0, 3.0):
        fab.record_telemetry(TelemetryRecord("t", w, 1.0, 1, 0, "w"))
    s = fab.telemetry_stats()
    assert (s.count, s.mean, s.median, s.min, s.max) == (3, 2.0, 2.0, 1.0, 3.0)
    assert len(fab.query_telemetry("t")) == 3


def test_registry_liveness():
    reg = WorkerRegistry(liveness_ms=30_000)
    reg.register_pending("a", ready_at=5000, now=0)
    reg.observe("b", 0)
    assert (reg.active_count(0), reg.pending_count(0)) == (1, 1)
    reg.observe("a", 6000)
    assert reg.active_count(6000) == 2
    # b stops polling; launched a stays
    assert reg.active_count(40_000) == 1
    reg.remove("a")
    assert reg.ids(40_000) == []


def test_fabric_monitor_snapshot():
    clock = ManualClock(0)
    fab = Fabric(clock=clock)
    t = make_task(rule="pass")
    fab.enqueue(t)
    fab.dequeue("w1")
    snap = fab.monitor_snapshot()
    assert snap.active_workers == 1
    row = snap.queue[0]
    assert (row.task_id, row.rule_name, row.version, row.dequeue_count) == (t.id, "pass", "v1", 1)
