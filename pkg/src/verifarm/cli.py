"""``verifarm`` command line.

Exit codes: 0 success, 1 operational failure, 2 usage error. ``submit``
returns 0 only when no task ended as Defect, ToolError or Unresolved.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import subprocess
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from verifarm.autoscale import AutoscaleController, AutoscalePolicy
from verifarm.orchestrator import (
    ManifestError,
    await_results,
    generate_checks,
    load_manifest,
    run_local,
    run_post_analysis,
    submit,
)
from verifarm.queue import QueueConfig
from verifarm.service import FabricClient, FabricServer, ServiceError
from verifarm.sim import SimConfig, run_experiment_table, simulate, table_csv
from verifarm.store import Fabric, FabricError
from verifarm.worker import WorkerAgent, WorkerState, default_worker_id

log = logging.getLogger("verifarm")

FABRIC_ENV = "VERIFARM_FABRIC"


class UsageError(Exception):
    pass


# -- fabric process ------------------------------------------------------------


@dataclass
class FabricConfig:
    listen: str = "127.0.0.1:8750"
    root: str = "./fabric-state"
    queue: QueueConfig = field(default_factory=QueueConfig)
    policy: AutoscalePolicy = field(default_factory=AutoscalePolicy)
    launcher: str = "process"  # "process" | "none"
    sweep_interval: float = 1.0
    worker_poll_interval: float = 1.0

    @property
    def address(self) -> tuple[str, int]:
        host, _, port = self.listen.rpartition(":")
        return host or "127.0.0.1", int(port)

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> FabricConfig:
        q = d.get("queue", {})
        cfg = cls(
            listen=d.get("listen", cls.listen),
            root=d.get("root", cls.root),
            queue=QueueConfig(int(q.get("invisibility_buffer", 300)), int(q.get("dequeue_limit", 3))),
            policy=AutoscalePolicy.from_json(d.get("autoscale", {})),
            launcher=d.get("launcher", "process"),
            sweep_interval=float(d.get("sweep_interval", 1.0)),
            worker_poll_interval=float(d.get("worker_poll_interval", 1.0)),
        )
        if cfg.launcher not in ("process", "none"):
            raise ValueError(f"launcher must be 'process' or 'none', got {cfg.launcher!r}")
        return cfg


class ProcessLauncher:
    """Starts ``verifarm worker`` subprocesses once their startup delay elapses."""

    def __init__(self, fabric: Fabric, url_holder: list[str], cache_root: Path, poll_interval: float):
        self.fabric = fabric
        self.url_holder = url_holder
        self.cache_root = cache_root
        self.poll_interval = poll_interval
        self.procs: dict[str, subprocess.Popen] = {}
        self.timers: list[threading.Timer] = []
        self.lock = threading.Lock()
        self.closed = False

    def launch(self, worker_id: str, ready_at: int) -> bool:
        now = self.fabric.now()
        self.fabric.registry.register_pending(worker_id, ready_at, now)
        delay = max(0.0, (ready_at - now) / 1000)
        t = threading.Timer(delay, self._spawn, args=(worker_id,))
        t.daemon = True
        with self.lock:
            self.timers.append(t)
        t.start()
        return True

    def _spawn(self, worker_id: str) -> None:
        with self.lock:
            if self.closed:
                return
            cmd = [sys.executable, "-m", "verifarm", "worker", "--fabric", self.url_holder[0],
                   "--id", worker_id, "--poll-interval", str(self.poll_interval),
                   "--cache-dir", str(self.cache_root / worker_id)]
            try:
                self.procs[worker_id] = subprocess.Popen(cmd, stdin=subprocess.DEVNULL)
            except OSError as exc:
                log.error("could not start worker %s: %s", worker_id, exc)
                self.fabric.registry.remove(worker_id)

    def reap(self) -> None:
        with self.lock:
            for wid, p in list(self.procs.items()):
                if p.poll() is not None:
                    log.warning("worker %s exited with %s", wid, p.returncode)
                    del self.procs[wid]
                    self.fabric.registry.remove(wid)

    def stop(self, timeout: float = 10.0) -> None:
        with self.lock:
            self.closed = True
            for t in self.timers:
                t.cancel()
            procs = list(self.procs.values())
        for p in procs:
            if p.poll() is None:
                p.terminate()
        for p in procs:
            try:
                p.wait(timeout)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()


def serve_fabric(cfg: FabricConfig, as_json: bool, stop: threading.Event | None = None) -> int:
    stop = stop or threading.Event()
    fabric = Fabric(cfg.root, cfg.queue)
    server = FabricServer(fabric, cfg.address)
    url = server.url
    server.start_background()
    threads = []

    def every(interval: float, fn, name: str) -> None:
        def loop():
            while not stop.wait(interval):
                try:
                    fn()
                except Exception:  # noqa: BLE001 - periodic chores must keep running
                    log.exception("%s failed", name)
        th = threading.Thread(target=loop, name=name, daemon=True)
        th.start()
        threads.append(th)

    every(cfg.sweep_interval, fabric.sweep, "sweep")
    launcher = None
    if cfg.launcher == "process":
        launcher = ProcessLauncher(fabric, [url], Path(cfg.root) / "worker-cache", cfg.worker_poll_interval)
        controller = AutoscaleController(cfg.policy, launcher)
        controller.bootstrap(fabric.now())

        def tick():
            now = fabric.now()
            current = fabric.registry.active_count(now) + fabric.registry.pending_count(now)
            controller.tick(now, fabric.queue.visible_count(), current)

        every(cfg.policy.eval_interval, tick, "autoscale")
        every(1.0, launcher.reap, "reaper")

    def on_signal(signum, frame):
        stop.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, on_signal)
        signal.signal(signal.SIGINT, on_signal)
    if as_json:
        print(json.dumps({"url": url, "root": str(cfg.root)}), flush=True)
    else:
        print(f"fabric listening on {url} (state in {cfg.root})", flush=True)
    try:
        stop.wait()
    finally:
        if launcher is not None:
            launcher.stop()
        server.shutdown()
        server.server_close()
        fabric.close()
    return 0


# -- output helpers ------------------------------------------------------------


def table(headers: list[str], rows: list[list[Any]]) -> str:
    cells = [[str(c) for c in r] for r in rows]
    widths = [max([len(h)] + [len(r[i]) for r in cells]) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def emit(args: argparse.Namespace, obj: Any, text: str) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True) if args.json else text)


def fabric_url(args: argparse.Namespace) -> str:
    url = getattr(args, "fabric", None) or os.environ.get(FABRIC_ENV)
    if not url:
        raise UsageError(f"no fabric URL: pass --fabric or set {FABRIC_ENV}")
    return url


# -- subcommands ------------------------------------------------------------


def cmd_fabric_serve(args: argparse.Namespace) -> int:
    cfg = FabricConfig()
    if args.config:
        cfg = FabricConfig.from_json(json.loads(Path(args.config).read_text()))
    if args.root:
        cfg.root = args.root
    if args.listen:
        cfg.listen = args.listen
    if args.no_launcher:
        cfg.launcher = "none"
    return serve_fabric(cfg, args.json)


def cmd_worker(args: argparse.Namespace) -> int:
    wid = args.id or default_worker_id()
    cache = Path(args.cache_dir) if args.cache_dir else Path(tempfile.gettempdir()) / "verifarm-cache" / wid
    agent = WorkerAgent(FabricClient(fabric_url(args)), WorkerState(wid, cache, args.poll_interval))
    stop = threading.Event()

    def on_signal(signum, frame):
        # the in-flight task finishes; the loop exits before the next poll
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    log.info("worker %s polling %s", wid, agent.fabric.url)
    agent.run(stop)
    return 0


def cmd_submit(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    backend = args.backend or manifest.backend
    checks = generate_checks(manifest)
    for w in checks.warnings:
        log.warning("%s", w)
    if backend == "local":
        report = run_local(checks, args.cores, tool_root=args.tool_root)
    else:
        url = args.fabric or manifest.fabric_url or os.environ.get(FABRIC_ENV)
        if not url:
            raise UsageError(f"cloud backend needs --fabric, a manifest fabric URL or {FABRIC_ENV}")
        fabric = FabricClient(url)
        receipt = submit(checks, fabric)
        if not args.json:
            print(f"client {checks.client}: submitted {len(receipt.task_ids)} tasks", flush=True)
        report = await_results(receipt, fabric, poll_interval=args.poll_interval, deadline=args.deadline)
        report.failures = dict(checks.failures)
    hook_failures = run_post_analysis(manifest, report)
    out = {"client": checks.client, "backend": backend, **report.to_json(),
           "hook_failures": hook_failures}
    rows = [[m, *(c.get(k, 0) for k in _KINDS)] for m, c in report.rollups.items()]
    text = table(["module", *_KINDS], rows)
    text += "\n\ntotal: " + ", ".join(f"{k}={v}" for k, v in report.counts.items())
    for m, err in report.failures.items():
        text += f"\nmodule {m} failed: {err}"
    emit(args, out, text)
    return report.exit_code


_KINDS = ["Pass", "Defect", "TimeOut", "SpaceOut", "ToolError", "VersionNotFound", "Unresolved"]


def cmd_results(args: argparse.Namespace) -> int:
    records, _ = FabricClient(fabric_url(args)).poll(args.client, 0)
    rows = [[r.task, r.module_name, r.rule_name, r.outcome.kind.value, r.worker,
             f"{r.queue_wait:.2f}", f"{r.processing_time:.2f}"] for r in records]
    text = table(["task", "module", "rule", "outcome", "worker", "wait_s", "run_s"], rows)
    emit(args, {"client": args.client, "records": [r.to_json() for r in records]}, text)
    return 0


def cmd_monitor(args: argparse.Namespace) -> int:
    snap = FabricClient(fabric_url(args)).monitor_snapshot()
    head = (f"deployment {snap.deployment}: {snap.active_workers} workers active, "
            f"{snap.pending_workers} pending, {len(snap.queue)} queued")
    rows = [[r.task_id, r.module_name, r.rule_name, r.version, r.submitted_at, r.state,
             r.dequeue_count, r.command] for r in snap.queue]
    text = head + "\n" + table(
        ["task", "module", "rule", "version", "submitted", "state", "dequeues", "command"], rows)
    emit(args, snap.to_json(), text)
    return 0


def cmd_versions_upload(args: argparse.Namespace) -> int:
    data = Path(args.archive).read_bytes()
    pkg = FabricClient(fabric_url(args)).upload_version(args.id, data)
    emit(args, pkg.to_json(), f"uploaded {pkg.id} ({pkg.archive.content_hash[:12]})")
    return 0


def cmd_versions_list(args: argparse.Namespace) -> int:
    ids = FabricClient(fabric_url(args)).list_versions()
    emit(args, {"versions": ids}, "\n".join(ids) if ids else "(no versions)")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = SimConfig.from_json(json.loads(Path(args.config).read_text()))
    report = simulate(cfg)
    out: dict[str, Any] = {"config": cfg.to_json(), "report": report.to_json()}
    s = report.wait_stats
    text = (f"{cfg.name}: {cfg.n_tasks} checks, makespan {report.makespan:.1f}s, "
            f"wait mean {s.mean:.2f}s median {s.median:.2f}s std {s.std:.2f}s "
            f"min {s.min:.2f}s max {s.max:.2f}s")
    if args.caps:
        rows = run_experiment_table(cfg, args.caps)
        out["table"] = [r.to_json() for r in rows]
        csv = table_csv(cfg, rows)
        text += "\n" + csv.rstrip()
        if args.csv:
            Path(args.csv).write_text(csv)
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True))
    if args.json:
        # the per-task wait list can be large; the file has it in full
        out["report"] = {k: v for k, v in out["report"].items() if k != "waits"}
    emit(args, out, text)
    return 0


# -- parser ------------------------------------------------------------------


def _caps(text: str) -> list[int]:
    try:
        caps = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"caps must be comma-separated integers, got {text!r}") from None
    if not caps or any(c < 1 for c in caps):
        raise argparse.ArgumentTypeError("caps must be positive")
    return caps


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit structured JSON")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="verifarm", description="distributed verification task farm")
    sub = p.add_subparsers(dest="command", required=True)

    fab = sub.add_parser("fabric", help="fabric service").add_subparsers(dest="fabric_cmd", required=True)
    serve = fab.add_parser("serve", parents=[common], help="run the fabric HTTP service")
    serve.add_argument("--root", help="state directory")
    serve.add_argument("--listen", help="HOST:PORT (port 0 picks a free one)")
    serve.add_argument("--config", help="fabric config JSON")
    serve.add_argument("--no-launcher", action="store_true", help="do not start worker processes")
    serve.set_defaults(func=cmd_fabric_serve)

    w = sub.add_parser("worker", parents=[common], help="run a worker agent")
    w.add_argument("--fabric", help=f"fabric URL (default ${FABRIC_ENV})")
    w.add_argument("--poll-interval", type=float, default=1.0)
    w.add_argument("--id")
    w.add_argument("--cache-dir")
    w.set_defaults(func=cmd_worker)

    s = sub.add_parser("submit", parents=[common], help="build, fan out and run a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--backend", choices=["local", "cloud"])
    s.add_argument("--fabric")
    s.add_argument("--deadline", type=float, help="seconds to wait for results")
    s.add_argument("--poll-interval", type=float, default=2.0)
    s.add_argument("--tool-root", default=".", help="local backend: directory of installed versions")
    s.add_argument("--cores", type=int, help="local backend: parallel checks")
    s.set_defaults(func=cmd_submit)

    r = sub.add_parser("results", parents=[common], help="print a client's published results")
    r.add_argument("--client", required=True)
    r.add_argument("--fabric")
    r.set_defaults(func=cmd_results)

    m = sub.add_parser("monitor", parents=[common], help="show workers and queue contents")
    m.add_argument("--fabric")
    m.set_defaults(func=cmd_monitor)

    v = sub.add_parser("versions", help="tool version repository").add_subparsers(
        dest="versions_cmd", required=True)
    up = v.add_parser("upload", parents=[common])
    up.add_argument("--id", required=True)
    up.add_argument("--archive", required=True)
    up.add_argument("--fabric")
    up.set_defaults(func=cmd_versions_upload)
    ls = v.add_parser("list", parents=[common])
    ls.add_argument("--fabric")
    ls.set_defaults(func=cmd_versions_list)

    sim = sub.add_parser("simulate", parents=[common], help="run the discrete-event simulator")
    sim.add_argument("--config", required=True)
    sim.add_argument("--caps", type=_caps, help="worker caps for a speedup table, e.g. 20,100,200")
    sim.add_argument("--out", help="write the full JSON report here")
    sim.add_argument("--csv", help="write the speedup table as CSV here")
    sim.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"verifarm: error: {exc}", file=sys.stderr)
        return 2
    except (ServiceError, FabricError, ManifestError, OSError, ValueError, KeyError) as exc:
        print(f"verifarm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
