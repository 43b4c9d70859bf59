from __future__ import annotations

import io
import json
import os
import stat
import subprocess
import sys
import time
import zipfile
from pathlib import Path

import pytest

from verifarm.model import ResourceLimits, TaskSpec, new_task_id
from verifarm.service import FabricClient, FabricServer
from verifarm.store import Fabric

# The toy analysis tool picks its behaviour from the rule name prefix.
# Every run appends the rule to $TOY_RUN_LOG when it is set.
TOY_TOOL = r"""#!/bin/sh
rule="$1"
if [ -n "$TOY_RUN_LOG" ]; then echo "$rule" >> "$TOY_RUN_LOG"; fi
case "$rule" in
  pass*) echo '{"kind": "Pass"}' > outcome.json ;;
  silent*) ;;
  defect*) echo "step 1 -> step 2" > trace.txt
           echo '{"kind": "Defect", "detail": "rule violated", "trace": "trace.txt"}' > outcome.json ;;
  fail*) echo "internal error" >&2; exit 3 ;;
  crash*) kill -SEGV $$ ;;
  sleep*) sleep 5 ;;
  slow*) sleep "${TOY_SLOW:-1}"; echo '{"kind": "Pass"}' > outcome.json ;;
  mem*) exec "$TOY_PYTHON" -c "import time; b = bytearray(200 * 1024 * 1024); b[::4096] = b'x' * len(b[::4096]); time.sleep(5)" ;;
  artifact*) test -f unit.o && echo '{"kind": "Pass"}' > outcome.json || exit 4 ;;
  *) echo "unknown rule $rule" >&2; exit 2 ;;
esac
"""


def toy_archive(script: str = TOY_TOOL) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        zf.writestr("run-analysis", script)
        zf.writestr("README", "toy tool")
    return buf.getvalue()


def install_toy(dest: Path, script: str = TOY_TOOL) -> Path:
    dest.mkdir(parents=True, exist_ok=True)
    p = dest / "run-analysis"
    p.write_text(script)
    p.chmod(p.stat().st_mode | stat.S_IXUSR)
    return dest


def make_task(rule: str = "pass", timeout: int = 30, spaceout: int = 512, version: str = "v1",
              module: str = "m1", client: str | None = None, payload=(), tid: str | None = None) -> TaskSpec:
    return TaskSpec(
        id=tid or new_task_id(),
        client=client or "00000000-0000-4000-8000-000000000001",
        module_name=module,
        rule_name=rule,
        version=version,
        command=f"{{tool}}/run-analysis {rule}",
        limits=ResourceLimits(timeout, spaceout),
        payload=tuple(payload),
    )


@pytest.fixture(autouse=True)
def _toy_env(monkeypatch):
    monkeypatch.setenv("TOY_PYTHON", sys.executable)


@pytest.fixture
def http_fabric(tmp_path):
    fabric = Fabric(tmp_path / "fabric")
    server = FabricServer(fabric)
    server.start_background()
    client = FabricClient(server.url, timeout=10)
    client.wait_ready()
    yield fabric, client
    server.shutdown()
    server.server_close()
    fabric.close()


def cli_env() -> dict[str, str]:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parents[1] / "src")
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    env["TOY_PYTHON"] = sys.executable
    return env


def start_fabric_process(root: Path, config: dict | None = None, extra: list[str] | None = None):
    """Launch ``verifarm fabric serve`` and return (process, url)."""
    cmd = [sys.executable, "-m", "verifarm", "fabric", "serve", "--root", str(root),
           "--listen", "127.0.0.1:0", "--json"]
    if config is not None:
        cfg = root.parent / f"{root.name}-config.json"
        cfg.write_text(json.dumps(config))
        cmd += ["--config", str(cfg)]
    cmd += extra or []
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                            env=cli_env(), text=True)
    line = proc.stdout.readline()
    if not line:
        proc.kill()
        raise RuntimeError("fabric process did not start")
    url = json.loads(line)["url"]
    FabricClient(url).wait_ready()
    return proc, url


def wait_for(pred, timeout: float = 10.0, interval: float = 0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = pred()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError("condition not met in time")


def write_toy_project(root: Path, rules: list[str], modules: list[str] = ("m1",),
                      version: str = "v1", **extra) -> Path:
    """A buildable toy project: each module 'compiles' with a fake cc that the
    intercepted build turns into an artifact. Returns the manifest path."""
    root.mkdir(parents=True, exist_ok=True)
    mods = []
    for name in modules:
        src = root / name
        src.mkdir(exist_ok=True)
        (src / "unit.c").write_text("int main(void) { return 0; }\n")
        mods.append({
            "name": name,
            "source_dir": name,
            "build": "cc -c unit.c -o /dev/null",
            "intercept": {"cc": 'echo "$@" > "$VERIFARM_ARTIFACTS/unit.o"'},
            "analyze_template": "{tool}/run-analysis {rule}",
        })
    manifest = {"modules": mods, "rules": list(rules), "version": version,
                "limits": {"timeout": 30, "spaceout": 512}, **extra}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


ACCEPTANCE_LINES: list[str] = []


def criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and record one acceptance line, then fail the test if needed."""
    line = f"AC{number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
