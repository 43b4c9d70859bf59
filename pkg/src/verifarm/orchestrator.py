"""Client side: turn a module × rule manifest into verification tasks, run them
locally or through the fabric, and fold the results into a report.

Per module the pipeline is: pre_build hook, normal build, post_build hook,
intercepted build (collecting artifacts), pre_analysis hook. After results are
in, the post_analysis hook runs. A failing hook or build drops that module's
tasks and is reported; other modules carry on.
"""

from __future__ import annotations

import io
import json
import logging
import os
import re
import shutil
import subprocess
import tempfile
import threading
import time
import zipfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import zip_longest
from pathlib import Path
from typing import Any, Callable

from verifarm.intercept import (
    ARTIFACTS_ENV,
    JOURNAL_ENV,
    Invocation,
    read_journal,
    search_path,
    write_recorders,
)
from verifarm.model import (
    BlobRef,
    Clock,
    Outcome,
    OutcomeKind,
    ResourceLimits,
    ResultRecord,
    SystemClock,
    TaskId,
    TaskSpec,
    new_client_id,
    new_task_id,
)
from verifarm.store import ENTRY_POINT, digest
from verifarm.worker import run_task

log = logging.getLogger(__name__)

UNRESOLVED = "Unresolved"
_NAME = re.compile(r"^[A-Za-z0-9._+-]+$")


class ManifestError(ValueError):
    pass


class PipelineError(Exception):
    pass


class BuildFailed(PipelineError):
    pass


class HookFailed(PipelineError):
    pass


@dataclass(frozen=True)
class PipelineHooks:
    pre_build: str | None = None
    post_build: str | None = None
    pre_analysis: str | None = None
    post_analysis: str | None = None

    STATIONS = ("pre_build", "post_build", "pre_analysis", "post_analysis")


@dataclass(frozen=True)
class ModuleSpec:
    name: str
    source_dir: Path
    build: str
    analyze_template: str
    intercept: dict[str, str] = field(default_factory=dict)
    path: tuple[str, ...] = ()


@dataclass(frozen=True)
class Manifest:
    modules: tuple[ModuleSpec, ...]
    rules: tuple[str, ...]
    version: str
    limits: ResourceLimits
    backend: str = "local"  # "local" | "cloud"
    fabric_url: str | None = None
    compile_parallelism: int = 1
    hooks: PipelineHooks = PipelineHooks()

    def validate(self) -> None:
        if not self.modules:
            raise ManifestError("manifest needs at least one module")
        if not self.rules:
            raise ManifestError("manifest needs at least one rule")
        if not self.version:
            raise ManifestError("version must be non-empty")
        if self.compile_parallelism < 1:
            raise ManifestError("compile_parallelism must be >= 1")
        if self.limits.timeout < 1 or self.limits.spaceout < 1:
            raise ManifestError("limits must be >= 1")
        seen = set()
        for m in self.modules:
            if not _NAME.match(m.name):
                raise ManifestError(f"module name {m.name!r} must match {_NAME.pattern}")
            if m.name in seen:
                raise ManifestError(f"duplicate module {m.name!r}")
            seen.add(m.name)
            if "{rule}" not in m.analyze_template:
                raise ManifestError(f"module {m.name}: analyze_template lacks {{rule}}")
        if len(set(self.rules)) != len(self.rules):
            raise ManifestError("rules must be unique")

    @classmethod
    def from_json(cls, d: dict[str, Any], base: Path | None = None) -> Manifest:
        base = base or Path.cwd()
        backend = d.get("backend", "local")
        fabric_url = None
        if isinstance(backend, dict):
            fabric_url = backend.get("cloud")
            backend = "cloud"
        modules = tuple(
            ModuleSpec(
                name=m["name"],
                source_dir=(base / m.get("source_dir", ".")).resolve(),
                build=m.get("build", "true"),
                analyze_template=m["analyze_template"],
                intercept=dict(m.get("intercept", {})),
                path=tuple(str((base / p).resolve()) for p in m.get("path", ())),
            )
            for m in d.get("modules", ())
        )
        hooks = d.get("hooks", {})
        man = cls(
            modules=modules,
            rules=tuple(d.get("rules", ())),
            version=d.get("version", ""),
            limits=ResourceLimits.from_json(d.get("limits", {"timeout": 3000, "spaceout": 4096})),
            backend=backend,
            fabric_url=fabric_url,
            compile_parallelism=int(d.get("compile_parallelism", 1)),
            hooks=PipelineHooks(**{k: hooks.get(k) for k in PipelineHooks.STATIONS}),
        )
        man.validate()
        return man


def load_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    return Manifest.from_json(json.loads(path.read_text(encoding="utf-8")), base=path.parent)


# -- pipeline -------------------------------------------------------------


@dataclass
class ArtifactSet:
    module: str
    artifact_dir: Path
    journal: list[Invocation] = field(default_factory=list)
    artifacts: dict[str, Path] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def bundle(self) -> bytes:
        """Deterministic zip of every artifact, keyed by relative path."""
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
            for rel in sorted(self.artifacts):
                info = zipfile.ZipInfo(rel, date_time=(1980, 1, 1, 0, 0, 0))
                info.external_attr = 0o644 << 16
                zf.writestr(info, self.artifacts[rel].read_bytes())
        return buf.getvalue()


def _run_hook(station: str, command: str | None, module: ModuleSpec, env: dict[str, str]) -> None:
    if not command:
        return
    proc = subprocess.run(command, shell=True, cwd=module.source_dir,
                          env={**env, "VERIFARM_STAGE": station}, capture_output=True, text=True)
    if proc.returncode != 0:
        raise HookFailed(f"{module.name}: {station} hook exited {proc.returncode}: {proc.stderr.strip()[-500:]}")


def run_pipeline(module: ModuleSpec, hooks: PipelineHooks, workspace: Path) -> ArtifactSet:
    """Normal build, then intercepted build; returns the collected artifacts."""
    if not module.source_dir.is_dir():
        raise BuildFailed(f"{module.name}: source_dir {module.source_dir} does not exist")
    work = workspace / module.name
    if work.exists():
        shutil.rmtree(work)
    bin_dir, art_dir = work / "intercept-bin", work / "artifacts"
    art_dir.mkdir(parents=True)
    journal = work / "intercept.jsonl"
    env = dict(os.environ)
    env.update({"VERIFARM_MODULE": module.name, ARTIFACTS_ENV: str(art_dir)})
    plain_env = {**env, "PATH": search_path(*module.path)}

    _run_hook("pre_build", hooks.pre_build, module, plain_env)
    proc = subprocess.run(module.build, shell=True, cwd=module.source_dir, env=plain_env,
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise BuildFailed(f"{module.name}: build exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
    _run_hook("post_build", hooks.post_build, module, plain_env)

    write_recorders(bin_dir, module.intercept)
    icpt_env = {**env, "PATH": search_path(bin_dir, *module.path), JOURNAL_ENV: str(journal)}
    proc = subprocess.run(module.build, shell=True, cwd=module.source_dir, env=icpt_env,
                          capture_output=True, text=True)
    if proc.returncode != 0:
        raise BuildFailed(f"{module.name}: intercepted build exited {proc.returncode}: "
                          f"{proc.stderr.strip()[-500:]}")
    result = ArtifactSet(module.name, art_dir, journal=read_journal(journal))
    result.artifacts = {
        str(p.relative_to(art_dir)): p for p in sorted(art_dir.rglob("*")) if p.is_file()
    }
    if module.intercept and not result.journal:
        msg = f"{module.name}: intercepted build invoked none of {sorted(module.intercept)}"
        log.warning("InterceptionEmpty: %s", msg)
        result.warnings.append(f"InterceptionEmpty: {msg}")
    _run_hook("pre_analysis", hooks.pre_analysis, module, plain_env)
    return result


# -- task generation --------------------------------------------------------


@dataclass
class CheckSet:
    client: str
    tasks: list[TaskSpec] = field(default_factory=list)
    blobs: dict[tuple[str, str], bytes] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def modules(self) -> dict[TaskId, str]:
        return {t.id: t.module_name for t in self.tasks}


def expand_template(template: str, module: str, rule: str, version: str) -> str:
    return template.replace("{rule}", rule).replace("{module}", module).replace("{version}", version)


def build_tasks(
    manifest: Manifest,
    artifacts: dict[str, ArtifactSet | bytes],
    client: str | None = None,
    clock: Clock | None = None,
) -> CheckSet:
    """Fan built modules out into one task per (module, rule).

    ``artifacts`` maps module name to its ArtifactSet (or a pre-built bundle).
    Modules absent from the mapping are skipped. Each task carries two
    payload blobs: the module's artifact bundle, shared by all of its rules,
    and a per-task ``check.json`` naming the rule. With compile_parallelism
    above 1, tasks from different modules are interleaved round-robin.
    """
    manifest.validate()
    client = client or new_client_id()
    now = (clock or SystemClock()).now_ms()
    out = CheckSet(client)
    per_module: list[list[TaskSpec]] = []
    for m in manifest.modules:
        art = artifacts.get(m.name)
        if art is None:
            continue
        bundle = art if isinstance(art, bytes) else art.bundle()
        bundle_ref = BlobRef(client, f"{m.name}/artifacts.zip", digest(bundle))
        out.blobs[(bundle_ref.container, bundle_ref.name)] = bundle
        tasks = []
        for rule in manifest.rules:
            tid = new_task_id()
            check = json.dumps({"task": tid, "module": m.name, "rule": rule,
                                "version": manifest.version}).encode()
            check_ref = BlobRef(client, f"{tid}/check.json", digest(check))
            out.blobs[(check_ref.container, check_ref.name)] = check
            tasks.append(TaskSpec(
                id=tid,
                client=client,
                module_name=m.name,
                rule_name=rule,
                version=manifest.version,
                command=expand_template(m.analyze_template, m.name, rule, manifest.version),
                limits=manifest.limits,
                payload=(bundle_ref, check_ref),
                submitted_at=now,
            ))
        per_module.append(tasks)
    if manifest.compile_parallelism > 1:
        out.tasks = [t for row in zip_longest(*per_module) for t in row if t is not None]
    else:
        out.tasks = [t for tasks in per_module for t in tasks]
    return out


def generate_checks(
    manifest: Manifest,
    client: str | None = None,
    workspace: str | os.PathLike | None = None,
) -> CheckSet:
    """Run every module pipeline (compile_parallelism at a time) and fan out."""
    manifest.validate()
    own_ws = workspace is None
    ws = Path(workspace) if workspace else Path(tempfile.mkdtemp(prefix="verifarm-build-"))
    built: dict[str, ArtifactSet] = {}
    failures: dict[str, str] = {}
    try:
        with ThreadPoolExecutor(max_workers=manifest.compile_parallelism) as pool:
            futures = {m.name: pool.submit(run_pipeline, m, manifest.hooks, ws) for m in manifest.modules}
            for name, fut in futures.items():
                try:
                    built[name] = fut.result()
                except PipelineError as exc:
                    log.error("module %s dropped: %s", name, exc)
                    failures[name] = str(exc)
        checks = build_tasks(manifest, built, client)
    finally:
        if own_ws:
            shutil.rmtree(ws, ignore_errors=True)
    checks.failures = failures
    checks.warnings = [w for a in built.values() for w in a.warnings]
    return checks


# -- submission and results -------------------------------------------------


@dataclass
class SubmissionReceipt:
    client: str
    task_ids: list[TaskId]
    modules: dict[TaskId, str]
    failed: dict[TaskId, str] = field(default_factory=dict)
    trace: list[tuple[str, str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {"client": self.client, "task_ids": self.task_ids, "modules": self.modules,
                "failed": self.failed}


def submit(checks: CheckSet, fabric: Any) -> SubmissionReceipt:
    """Upload each task's payload, then enqueue it. A task whose upload fails
    is not enqueued and is listed in ``failed``."""
    receipt = SubmissionReceipt(checks.client, [], {})
    uploaded: set[tuple[str, str]] = set()
    for task in checks.tasks:
        try:
            for ref in task.payload:
                key = (ref.container, ref.name)
                if key in uploaded:
                    continue
                stored = fabric.put_blob(ref.container, ref.name, checks.blobs[key])
                if stored.content_hash != ref.content_hash:
                    raise RuntimeError(f"hash mismatch storing {ref.name}")
                uploaded.add(key)
                receipt.trace.append(("put", f"{ref.container}/{ref.name}"))
        except Exception as exc:  # noqa: BLE001 - per-task failure is data
            log.error("upload for task %s failed: %s", task.id, exc)
            receipt.failed[task.id] = f"upload failed: {exc}"
            continue
        try:
            fabric.enqueue(task)
        except Exception as exc:  # noqa: BLE001
            receipt.failed[task.id] = f"enqueue failed: {exc}"
            continue
        receipt.trace.append(("enqueue", task.id))
        receipt.task_ids.append(task.id)
        receipt.modules[task.id] = task.module_name
    return receipt


@dataclass
class RunReport:
    records: dict[TaskId, ResultRecord]
    modules: dict[TaskId, str]
    unresolved: list[TaskId] = field(default_factory=list)
    duplicates: int = 0
    wall_time: float = 0.0
    failures: dict[str, str] = field(default_factory=dict)  # module -> pipeline error
    rejected: dict[TaskId, str] = field(default_factory=dict)  # task -> submission error
    timeline: list[tuple[TaskId, float, float]] = field(default_factory=list)

    def kind_of(self, task: TaskId) -> str:
        rec = self.records.get(task)
        return rec.outcome.kind.value if rec else UNRESOLVED

    @property
    def counts(self) -> dict[str, int]:
        c = Counter(self.kind_of(t) for t in self.modules)
        return dict(sorted(c.items()))

    @property
    def rollups(self) -> dict[str, dict[str, int]]:
        out: dict[str, Counter] = {}
        for tid, module in self.modules.items():
            out.setdefault(module, Counter())[self.kind_of(tid)] += 1
        return {m: dict(sorted(c.items())) for m, c in sorted(out.items())}

    @property
    def exit_code(self) -> int:
        bad = {OutcomeKind.DEFECT.value, OutcomeKind.TOOL_ERROR.value, UNRESOLVED}
        return 1 if bad & set(self.counts) or self.failures or self.rejected else 0

    def to_json(self) -> dict[str, Any]:
        return {
            "tasks": len(self.modules),
            "counts": self.counts,
            "modules": self.rollups,
            "duplicates": self.duplicates,
            "unresolved": self.unresolved,
            "wall_time": self.wall_time,
            "failures": self.failures,
            "rejected": self.rejected,
            "records": [self.records[t].to_json() for t in self.modules if t in self.records],
        }


def await_results(
    receipt: SubmissionReceipt,
    fabric: Any,
    poll_interval: float = 2.0,
    deadline: float | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> RunReport:
    """Poll the client's topic until every task has a record or ``deadline``
    seconds pass. The first record per task wins; later ones count as
    duplicates."""
    start = time.monotonic()
    wanted = set(receipt.task_ids)
    records: dict[TaskId, ResultRecord] = {}
    duplicates = 0
    cursor = 0
    while True:
        batch, cursor = fabric.poll(receipt.client, cursor)
        for rec in batch:
            if rec.task not in wanted:
                continue
            if rec.task in records:
                duplicates += 1
            else:
                records[rec.task] = rec
        if len(records) == len(wanted):
            break
        if deadline is not None and time.monotonic() - start >= deadline:
            break
        sleep(poll_interval)
    return RunReport(
        records=records,
        modules=dict(receipt.modules),
        unresolved=[t for t in receipt.task_ids if t not in records],
        duplicates=duplicates,
        wall_time=time.monotonic() - start,
        rejected=dict(receipt.failed),
    )


# -- local backend --------------------------------------------------------------


def run_local(
    checks: CheckSet,
    core_count: int | None = None,
    tool_root: str | os.PathLike = ".",
    worker_name: str = "local",
) -> RunReport:
    """Execute every task on this machine, at most ``core_count`` at once.

    Tool versions are looked up as ``<tool_root>/<version>/run-analysis``; a
    missing install yields VersionNotFound, as on a worker.
    """
    cores = core_count or os.cpu_count() or 1
    if cores < 1:
        raise ValueError("core_count must be >= 1")
    tool_root = Path(tool_root)
    start = time.monotonic()
    records: dict[TaskId, ResultRecord] = {}
    timeline: list[tuple[TaskId, float, float]] = []
    lock = threading.Lock()

    def one(task: TaskSpec) -> None:
        t0 = time.monotonic()
        tool_dir = tool_root / task.version
        if not (tool_dir / ENTRY_POINT).exists():
            outcome = Outcome(OutcomeKind.VERSION_NOT_FOUND, f"{task.version} not installed under {tool_root}")
        else:
            with tempfile.TemporaryDirectory(prefix=f"local-{task.id[:8]}-") as wd:
                outcome, _ = run_task(task, tool_dir, Path(wd), blobs=checks.blobs)
        t1 = time.monotonic()
        rec = ResultRecord(task.id, task.client, outcome, worker_name, 0.0, t1 - t0,
                           time.time_ns() // 1_000_000, task.module_name, task.rule_name)
        with lock:
            records[task.id] = rec
            timeline.append((task.id, t0 - start, t1 - start))

    with ThreadPoolExecutor(max_workers=cores) as pool:
        list(pool.map(one, checks.tasks))
    return RunReport(
        records=records,
        modules=checks.modules(),
        wall_time=time.monotonic() - start,
        failures=dict(checks.failures),
        timeline=sorted(timeline, key=lambda x: x[1]),
    )


def run_post_analysis(manifest: Manifest, report: RunReport) -> dict[str, str]:
    """Run the post_analysis hook once per module; returns hook failures."""
    failed = {}
    for m in manifest.modules:
        if m.name in report.failures:
            continue
        try:
            _run_hook("post_analysis", manifest.hooks.post_analysis, m,
                      {**os.environ, "VERIFARM_MODULE": m.name,
                       "VERIFARM_RESULTS": json.dumps(report.rollups.get(m.name, {}))})
        except HookFailed as exc:
            failed[m.name] = str(exc)
    return failed
