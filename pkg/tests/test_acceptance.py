"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line; the lines are repeated in the pytest
terminal summary under "acceptance criteria".
"""

import json
import os
import signal
import subprocess
import sys
import threading
import time
from collections import Counter
from pathlib import Path

import pytest

from verifarm.autoscale import AutoscalePolicy, evaluate
from verifarm.model import ManualClock, OutcomeKind
from verifarm.orchestrator import (
    Manifest,
    SubmissionReceipt,
    await_results,
    build_tasks,
    generate_checks,
    load_manifest,
    run_local,
    submit,
)
from verifarm.queue import Dequeued, QueueConfig, WorkQueue
from verifarm.service import FabricClient, FabricServer
from verifarm.sim import Dist, SimConfig, run_experiment_table, simulate
from verifarm.store import Fabric
from verifarm.worker import Disposition, WorkerAgent, WorkerState, run_task
from conftest import (
    cli_env,
    criterion,
    install_toy,
    make_task,
    start_fabric_process,
    toy_archive,
    wait_for,
    write_toy_project,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def load_sim(name: str) -> SimConfig:
    return SimConfig.from_json(json.loads((CONFIGS / f"{name}.json").read_text()))


def test_ac01_fan_out_exactness():
    details, ok = [], True
    for modules, rules, expected in [(1, 192, 192), (28, 180, 5040), (91, 180, 16380)]:
        manifest = Manifest.from_json({
            "modules": [{"name": f"drv{i}", "analyze_template": "{tool}/run-analysis {rule}"}
                        for i in range(modules)],
            "rules": [f"rule{j:03d}" for j in range(rules)],
            "version": "v1",
            "limits": {"timeout": 3000, "spaceout": 4096},
        })
        start = time.monotonic()
        checks = build_tasks(manifest, {m.name: b"toy-artifacts" for m in manifest.modules})
        elapsed = time.monotonic() - start
        ok &= len(checks.tasks) == expected and elapsed < 1.0
        details.append(f"{modules}x{rules}={len(checks.tasks)} in {elapsed:.3f}s")
    criterion(1, "fan-out exactness", ok, "; ".join(details))


def test_ac02_visibility_arithmetic():
    q = WorkQueue()
    q.enqueue(make_task(timeout=3000), 0)
    t = 1_234_567
    got = q.dequeue(t)
    ok = isinstance(got, Dequeued) and got.entry.invisible_until == t + 3_300_000
    criterion(2, "visibility arithmetic", ok, f"dequeued at {t} ms, invisible_until={got.entry.invisible_until}")


@pytest.mark.slow
def test_ac03_crash_recovery(tmp_path):
    poll, service, timeout, buffer = 0.2, 1.5, 3, 1
    fabric = Fabric(tmp_path / "fabric", QueueConfig(invisibility_buffer=buffer))
    server = FabricServer(fabric)
    server.start_background()
    env = {**cli_env(), "TOY_SLOW": str(service)}

    def start_worker(name):
        return subprocess.Popen(
            [sys.executable, "-m", "verifarm", "worker", "--fabric", server.url, "--id", name,
             "--poll-interval", str(poll), "--cache-dir", str(tmp_path / name)],
            env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL, start_new_session=True)

    try:
        fabric.upload_version("v1", toy_archive())
        task = make_task(rule="slow", timeout=timeout)
        fabric.enqueue(task)
        first = start_worker("w-first")
        entry = wait_for(lambda: (e := fabric.queue.get(task.id)) and e.dequeue_count == 1 and e, timeout=15)
        time.sleep(0.3)  # mid-task
        os.killpg(first.pid, signal.SIGKILL)
        first.wait()
        second = start_worker("w-second")
        try:
            records = wait_for(lambda: fabric.poll(task.client, 0)[0], timeout=20)
        finally:
            second.terminate()
            second.wait(10)
        tel = [r for r in fabric.query_telemetry(task.id) if r.outcome == "Pass"]
        invisibility = timeout + buffer
        total = (records[0].completed_at - entry.first_dequeued_at) / 1000
        bound = invisibility + service + 2 * poll
        ok = (len(records) == 1 and records[0].outcome.kind is OutcomeKind.PASS
              and len(tel) == 1 and tel[0].dequeue_count == 2 and total <= bound)
        criterion(3, "crash recovery", ok,
                  f"dequeue_count={tel[0].dequeue_count if tel else None}, total {total:.2f}s <= bound {bound:.2f}s")
    finally:
        server.shutdown()
        server.server_close()
        fabric.close()


def test_ac04_duplicate_suppression(tmp_path):
    clock = ManualClock(0)
    fabric = Fabric(clock=clock)
    fabric.upload_version("v1", toy_archive())
    task = make_task(rule="pass", timeout=5)
    fabric.enqueue(task)
    a = WorkerAgent(fabric, WorkerState("A", tmp_path / "a"))
    b = WorkerAgent(fabric, WorkerState("B", tmp_path / "b"))
    claim_a = fabric.dequeue("A")
    # A stalls past its invisibility window before deleting
    clock.advance(5 + 300 + 1)
    step_b = b.step()
    step_a = a.process(claim_a)
    receipt = SubmissionReceipt(task.client, [task.id], {task.id: task.module_name})
    report = await_results(receipt, fabric, poll_interval=0, deadline=0)
    published = fabric.poll(task.client, 0)[0]
    ok = (step_b.action == "published" and step_a.action == Disposition.DISCARDED.value
          and len(published) == 1 and len(report.records) == 1 and report.duplicates == 0)
    criterion(4, "duplicate suppression", ok,
              f"B {step_b.action}, A {step_a.action}, topic records={len(published)}")


def test_ac05_dequeue_limit_exhaustion(tmp_path, monkeypatch):
    runs = tmp_path / "runs.log"
    monkeypatch.setenv("TOY_RUN_LOG", str(runs))
    clock = ManualClock(0)
    fabric = Fabric(clock=clock, queue_config=QueueConfig(invisibility_buffer=0, dequeue_limit=3))
    fabric.upload_version("v1", toy_archive())
    task = make_task(rule="crash", timeout=1)
    fabric.enqueue(task)
    worker = WorkerAgent(fabric, WorkerState("w", tmp_path / "cache"))
    while fabric.exists(task.id):
        worker.step()
        clock.advance(1)
    executions = len(runs.read_text().splitlines())
    records = fabric.poll(task.client, 0)[0]
    ok = (executions == 3 and len(records) == 1 and records[0].outcome.kind is OutcomeKind.TOOL_ERROR
          and len(fabric.queue) == 0)
    criterion(5, "dequeue-limit exhaustion", ok,
              f"executions={executions}, outcome={records[0].outcome.kind.value if records else None}, "
              f"queue={len(fabric.queue)}")


def test_ac06_resource_enforcement(tmp_path):
    tool = install_toy(tmp_path / "tool")
    start = time.monotonic()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    out_t, rep_t = run_task(make_task(rule="sleep", timeout=1), tool, tmp_path / "a")
    out_s, rep_s = run_task(make_task(rule="mem", spaceout=50), tool, tmp_path / "b")
    total = time.monotonic() - start
    ok = (out_t.kind is OutcomeKind.TIMEOUT and 1.0 <= rep_t.wall_time <= 1.5
          and out_s.kind is OutcomeKind.SPACEOUT and total < 10)
    criterion(6, "resource enforcement", ok,
              f"sleep: {out_t.kind.value} after {rep_t.wall_time:.3f}s; "
              f"alloc: {out_s.kind.value} at {rep_s.peak_memory:.0f} MB; total {total:.2f}s")


def test_ac07_version_provisioning(http_fabric, tmp_path):
    fabric, client = http_fabric
    client.upload_version("v1", toy_archive())
    for _ in range(2):
        client.enqueue(make_task(rule="pass", version="v1"))
    worker = WorkerAgent(client, WorkerState("w", tmp_path / "cache"))
    kinds = [worker.step().outcome.kind for _ in range(2)]
    downloads = fabric.requests.get("download_version")
    missing = make_task(rule="pass", version="v404")
    client.enqueue(missing)
    step = worker.step()
    ok = (kinds == [OutcomeKind.PASS] * 2 and downloads == 1
          and step.outcome.kind is OutcomeKind.VERSION_NOT_FOUND and len(fabric.queue) == 0)
    criterion(7, "version provisioning", ok,
              f"downloads={downloads}, unknown version -> {step.outcome.kind.value}, queue={len(fabric.queue)}")


def test_ac08_autoscale_unit_behaviour():
    p = AutoscalePolicy()
    got = [evaluate(p, 0, 2, 0).target, evaluate(p, 120, 2, 0).target, evaluate(p, 120, 180, 0).target]
    criterion(8, "autoscale evaluate", got == [2, 52, 200], f"targets {got} (expected [2, 52, 200])")


def test_ac09_simulator_oracle_and_determinism():
    cfg = SimConfig(seed=42, rules_per_module=100, service_time=Dist.fixed(60), initial_workers=20,
                    policy=AutoscalePolicy(20, 20, 1, 10**9))
    start = time.monotonic()
    a, b = simulate(cfg), simulate(cfg)
    elapsed = time.monotonic() - start
    oracle = -(-100 // 20) * 60
    ok = a.makespan == oracle and a.trace_hash == b.trace_hash and a.to_bytes() == b.to_bytes() and elapsed < 5
    criterion(9, "simulator oracle equivalence", ok,
              f"makespan {a.makespan}s vs oracle {oracle}s, identical hashes={a.trace_hash == b.trace_hash}, "
              f"{elapsed:.2f}s")


@pytest.mark.slow
def test_ac10_makespan_table_shape():
    start = time.monotonic()
    rows = {r.label: r for r in run_experiment_table(load_sim("sdv_bugbash"), [20, 100, 200])}
    t_big = time.monotonic() - start
    m20, m100, m200 = (rows[f"Azure{c}"].makespan for c in (20, 100, 200))
    local = rows["Local"].makespan
    gain_20_100 = local / m100 - local / m20
    gain_100_200 = local / m200 - local / m100
    ok_a = rows["Azure20"].speedup >= 5 and m200 <= m100 <= m20 and gain_100_200 < gain_20_100 and t_big < 60

    start = time.monotonic()
    small = run_experiment_table(load_sim("fail_driver1"), [20, 100, 200])
    t_small = time.monotonic() - start
    ok_b = all(r.makespan >= 0.9 * small[0].makespan for r in small[1:]) and t_small < 60
    criterion(10, "makespan table shape", ok_a and ok_b,
              f"bugbash speedups 20/100/200 = {rows['Azure20'].speedup:.2f}/{rows['Azure100'].speedup:.2f}/"
              f"{rows['Azure200'].speedup:.2f} ({t_big:.1f}s); fail_driver1 cloud/local = "
              f"{min(r.makespan for r in small[1:]) / small[0].makespan:.3f} ({t_small:.1f}s)")


def test_ac11_queue_wait_shape():
    cfg = load_sim("queue_wait")
    report = simulate(cfg)
    s = report.wait_stats
    bound = cfg.policy.startup.upper_bound + cfg.worker_poll_interval + cfg.policy.eval_interval
    ok = s.count == 3858 and 10 <= s.mean <= 60 and s.max <= bound
    criterion(11, "queue-wait shape", ok,
              f"n={s.count} mean {s.mean:.2f}s median {s.median:.2f}s std {s.std:.2f}s "
              f"min {s.min:.2f}s max {s.max:.2f}s (bound {bound:.0f}s)")


@pytest.mark.slow
def test_ac12_journal_recovery(tmp_path):
    config = {"launcher": "none", "sweep_interval": 3600, "queue": {"invisibility_buffer": 0}}
    root = tmp_path / "state"
    proc, url = start_fabric_process(root, config)
    try:
        c = FabricClient(url)
        for _ in range(10):
            c.enqueue(make_task(rule="pass", timeout=1))
        for _ in range(55):
            c.enqueue(make_task(rule="pass", timeout=3000))
        for _ in range(10):
            c.dequeue("w")
        time.sleep(1.1)
        for _ in range(10):
            c.dequeue("w")  # the short ones again, count 2
        time.sleep(1.1)
        for _ in range(5):
            c.dequeue("w")  # five short ones reach count 3
        claims = [c.dequeue("w") for _ in range(20)]
        for claim in claims[:15]:
            c.delete(claim.entry.task.id, claim.receipt)
        before = c.snapshot()
    finally:
        proc.kill()
        proc.wait()
    proc, url = start_fabric_process(root, config)
    try:
        after = FabricClient(url).snapshot()
    finally:
        proc.send_signal(signal.SIGTERM)
        proc.wait(20)
    mix = Counter((r.state.value, r.dequeue_count) for r in before)
    ok = len(before) == 50 and after == before
    criterion(12, "journal recovery", ok,
              f"{len(before)} live entries {dict(sorted(mix.items()))}; identical after SIGKILL restart={after == before}")


@pytest.mark.slow
def test_ac13_backend_equivalence(tmp_path):
    rules = ["pass", "defect", "fail", "silent", "artifact"]
    install_toy(tmp_path / "tools" / "v1")
    manifest = load_manifest(write_toy_project(tmp_path / "proj", rules))
    local = run_local(generate_checks(manifest), 2, tool_root=tmp_path / "tools")

    fabric = Fabric(tmp_path / "fabric")
    server = FabricServer(fabric)
    server.start_background()
    stop = threading.Event()
    try:
        client = FabricClient(server.url)
        client.upload_version("v1", toy_archive())
        workers = [WorkerAgent(client, WorkerState(f"w{i}", tmp_path / f"cache{i}", poll_interval=0.05))
                   for i in range(2)]
        threads = [threading.Thread(target=w.run, args=(stop,), daemon=True) for w in workers]
        for t in threads:
            t.start()
        receipt = submit(generate_checks(manifest), client)
        cloud = await_results(receipt, client, poll_interval=0.1, deadline=30)
    finally:
        stop.set()
        server.shutdown()
        server.server_close()
        fabric.close()
    ok = local.counts == cloud.counts and not cloud.unresolved
    criterion(13, "backend equivalence", ok, f"local {local.counts} vs cloud {cloud.counts}")
